//! Oracle speaker probe: least-squares fit of the known rendering model to
//! the acoustic coordinates of a segment.

use crate::corpus::{FeatureFrameSeq, Language};
use crate::error::{Error, Result};

/// Solves the symmetric positive definite system `a x = b` (row-major `n×n`).
fn solve_spd(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[piv * n + col].abs() < 1e-12 {
            return Err(Error::Degenerate("singular probe system".into()));
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Ok(x)
}

/// Speaker component of a segment whose first frame sits at absolute frame
/// index `t0`. Fits `x_t = v + sum_b g_b amp_b(t) dir_b` on the acoustic
/// coordinates, then removes the prosody direction from `v` (sentiment is a
/// constant offset along it and cannot be told apart from the speaker).
pub fn recover_speaker(lang: &Language, frames: &FeatureFrameSeq, t0: usize) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(Error::Empty("speaker probe segment".into()));
    }
    let c = &lang.config;
    let (sd, d) = (c.semantic_dim, c.dim);
    if frames.dim != d {
        return Err(Error::Dimension {
            what: "probe frame dim".into(),
            expected: d,
            got: frames.dim,
        });
    }
    let a = d - sd;
    let nb = lang.backgrounds.len();
    let n = a + nb;
    let mut ata = vec![0.0; n * n];
    let mut atb = vec![0.0; n];
    let mut row = vec![0.0; n];
    for (t, f) in frames.frames().enumerate() {
        let amps: Vec<f64> = lang.backgrounds.iter().map(|bg| bg.amplitude(t0 + t)).collect();
        for i in 0..a {
            row.iter_mut().for_each(|r| *r = 0.0);
            row[i] = 1.0;
            for (b, bg) in lang.backgrounds.iter().enumerate() {
                row[a + b] = amps[b] * bg.direction[sd + i];
            }
            let y = f[sd + i] as f64;
            for p in 0..n {
                if row[p] == 0.0 {
                    continue;
                }
                atb[p] += row[p] * y;
                for q in 0..n {
                    ata[p * n + q] += row[p] * row[q];
                }
            }
        }
    }
    // light ridge on the background gains keeps short segments solvable
    for b in 0..nb {
        ata[(a + b) * n + a + b] += 1e-6 * frames.len() as f64;
    }
    let x = solve_spd(ata, atb, n)?;
    let mut v = x[..a].to_vec();
    let p: Vec<f64> = lang.prosody_basis[sd..].to_vec();
    let pn: f64 = p.iter().map(|x| x * x).sum();
    if pn > 0.0 {
        let dot: f64 = v.iter().zip(&p).map(|(x, y)| x * y).sum::<f64>() / pn;
        v.iter_mut().zip(&p).for_each(|(x, y)| *x -= dot * y);
    }
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-9 || nb < 1e-9 {
        return Err(Error::Degenerate("zero-norm speaker vector".into()));
    }
    Ok((a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of the speakers recovered from a prompt and its
/// continuation; the continuation starts at frame `prompt.len()`.
pub fn speaker_similarity(lang: &Language, prompt: &FeatureFrameSeq, continuation: &FeatureFrameSeq) -> Result<f64> {
    let a = recover_speaker(lang, prompt, 0)?;
    let b = recover_speaker(lang, continuation, prompt.len())?;
    cosine(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_language, render_utterance, AcousticFactors, CorpusConfig};

    fn lang() -> Language {
        build_language(&CorpusConfig::default()).unwrap()
    }

    fn factors(speaker_id: usize, sentiment: f64, background_id: usize) -> AcousticFactors {
        AcousticFactors {
            speaker_id,
            sentiment,
            background_id,
            room_coeff: 0.0,
        }
    }

    #[test]
    fn same_speaker_is_similar() {
        let l = lang();
        let words: Vec<u32> = (0..12).map(|i| l.objects[i % l.objects.len()]).collect();
        for spk in [0, 5, 17] {
            let a = render_utterance(&l, &words, factors(spk, 0.5, 1), 10).unwrap();
            let b = render_utterance(&l, &words, factors(spk, -1.0, 3), 11).unwrap();
            let (p, c) = (a.frames.slice(0, 37), b.frames.slice(37, b.frames.len()));
            let s = speaker_similarity(&l, &p, &c).unwrap();
            assert!(s > 0.95, "speaker {spk}: {s}");
            let other = render_utterance(&l, &words, factors(spk + 1, 0.5, 1), 10).unwrap();
            let s2 = speaker_similarity(&l, &p, &other.frames.slice(37, other.frames.len())).unwrap();
            assert!(s2 < s);
        }
    }

    #[test]
    fn segment_with_itself_is_one() {
        let l = lang();
        let a = render_utterance(&l, &l.objects[..6], factors(3, 0.0, 2), 1).unwrap();
        let v = recover_speaker(&l, &a.frames, 0).unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
        let l = lang();
        let empty = FeatureFrameSeq {
            data: vec![],
            dim: l.config.dim,
            frame_rate_hz: 12.5,
        };
        assert!(recover_speaker(&l, &empty, 0).is_err());
    }

    #[test]
    fn solver_matches_hand_solution() {
        let x = solve_spd(vec![4.0, 1.0, 1.0, 3.0], vec![1.0, 2.0], 2).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12 && (x[1] - 7.0 / 11.0).abs() < 1e-12);
    }
}
