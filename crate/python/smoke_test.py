"""Smoke test for the speechlm_py extension.

Build first with `cargo build -p speechlm-py` (or `maturin develop` inside
crates/python). The script imports an installed module when present and
otherwise loads the freshly built library from target/.
"""

import importlib.machinery
import importlib.util
import os
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        import speechlm_py

        return speechlm_py
    except ImportError:
        pass
    explicit = os.environ.get("SPEECHLM_PY_LIB")
    candidates = [Path(explicit)] if explicit else [
        ROOT / "target" / profile / "libspeechlm_py.so" for profile in ("release", "debug")
    ]
    for lib in candidates:
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("speechlm_py", str(lib))
            spec = importlib.util.spec_from_file_location("speechlm_py", str(lib), loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("speechlm_py not built; run `cargo build -p speechlm-py` first")


def main():
    m = load()

    grid = [[1, 2, 3], [4, 5, 6]]
    ids = m.interleave(grid, 10, 8)
    assert ids == [10, 13, 24, 14, 25, 15, 26, 11], ids
    assert m.deinterleave(ids, 10, 2, 8) == grid
    assert m.order_violations(ids, 10, 2, 8) == (0, True)
    swapped = [ids[0], ids[2], ids[1]] + ids[3:]
    assert m.order_violations(swapped, 10, 2, 8)[0] == 2

    assert m.lr_at(1500, 100_000, 1500) == 3e-4
    assert abs(m.lr_at(100_000, 100_000, 1500) - 3e-5) < 1e-18

    prompt = m.judge_prompt("a", "b")
    golden = (ROOT / "crates/core/tests/golden/judge_prompt_a_b.txt").read_text()
    assert prompt == golden
    assert m.parse_judge_score(" 7\n") == 7
    for bad in ("seven", "11"):
        try:
            m.parse_judge_score(bad)
        except ValueError:
            pass
        else:
            raise AssertionError(f"{bad!r} should be rejected")

    words, frames, speaker = m.synth_utterance(3, seed=0, max_frames=64)
    assert words and 12 <= len(frames) <= 64 and len(frames[0]) == 16
    assert 0 <= speaker < 64
    assert m.synth_utterance(3, seed=0, max_frames=64) == (words, frames, speaker)

    try:
        m.Codec.load("/nonexistent/codec.rvq")
    except OSError:
        pass
    else:
        raise AssertionError("missing codec should raise OSError")

    with tempfile.TemporaryDirectory() as root:
        report = m.verify_root(root)
        assert '"missing"' in report

    print("speechlm_py smoke test passed")


if __name__ == "__main__":
    main()
