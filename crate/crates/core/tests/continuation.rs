use speechlm::codec::{fit_codec, CodecConfig, RvqCodec};
use speechlm::corpus::{build_language, generate_utterance, CorpusConfig, Utterance};
use speechlm::model::{init_model, LmConfig, LmParams};
use speechlm::sample::{continue_audio, SampleConfig};
use speechlm::tokens::UnifiedVocab;

const Q: usize = 2;
const K: usize = 16;

fn world() -> (RvqCodec, UnifiedVocab, Utterance) {
    let config = CorpusConfig {
        lexicon_size: 48,
        n_speakers: 4,
        max_frames: 80,
        ..Default::default()
    };
    let lang = build_language(&config).unwrap();
    let utts: Vec<Utterance> = (0..60).map(|i| generate_utterance(&lang, i).unwrap()).collect();
    let frames: Vec<f32> = utts.iter().flat_map(|u| u.frames.data.iter().copied()).collect();
    let cc = CodecConfig {
        levels: Q,
        codebook_size: K,
        iters: 10,
        ..Default::default()
    };
    let codec = fit_codec(&frames, config.dim, config.semantic_dim, None, &cc).unwrap();
    let vocab = UnifiedVocab::new(48, Q as u32, K as u32).unwrap();
    let long = utts.into_iter().max_by_key(|u| u.frames.len()).unwrap();
    (codec, vocab, long)
}

/// A model whose next-token distribution ignores the context: attention and
/// MLP outputs are zeroed and every token embeds to the same vector, so the
/// logits are `head · 1` after the final norm.
fn constant_model(vocab: &UnifiedVocab, head: impl Fn(u32) -> f32) -> LmParams<f32> {
    let c = LmConfig {
        vocab_size: vocab.total_size() as usize,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 256,
        ..Default::default()
    };
    let mut p = init_model::<f32>(&c).unwrap();
    let (v, d, f) = (c.vocab_size, c.d_model, c.d_ff);
    let l = p.layout.layers[0];
    p.data[l.wo..l.wo + d * d].fill(0.0);
    p.data[l.w_down..l.w_down + f * d].fill(0.0);
    let e = p.layout.tok_emb;
    p.data[e..e + v * d].fill(1.0);
    let n = p.layout.final_norm;
    p.data[n..n + d].fill(1.0);
    let h = p.layout.head;
    for id in 0..v {
        let w = head(id as u32);
        p.data[h + id * d..h + (id + 1) * d].fill(w);
    }
    p
}

fn sc(max_new_tokens: usize) -> SampleConfig {
    SampleConfig {
        temperature: 1.0,
        top_k: 82,
        max_new_tokens,
        constrain_order: false,
        seed: 9,
    }
}

#[test]
fn immediate_close_gives_empty_continuation() {
    let (codec, vocab, utt) = world();
    let close = vocab.audio_close();
    let params = constant_model(&vocab, |id| if id == close { 10.0 } else { 0.0 });
    let c = continue_audio(&params, &codec, &vocab, &utt.frames, 1.0, &sc(40)).unwrap();
    assert!(c.stats.stopped);
    assert_eq!(c.stats.generated_tokens, 1);
    assert_eq!(c.stats.continuation_frames, 0);
    assert_eq!(c.grid.frames(), 0);
    assert!(c.frames.is_none());
    assert_eq!(c.stats.prompt_frames, 12);
    assert_eq!(c.stats.prompt_tokens, 1 + 12 * Q);
}

#[test]
fn trailing_partial_frame_is_dropped() {
    let (codec, vocab, utt) = world();
    let close = vocab.audio_close();
    let params = constant_model(&vocab, |id| if id == close { -10.0 } else { 0.0 });
    let c = continue_audio(&params, &codec, &vocab, &utt.frames, 1.0, &sc(2 * Q + 1)).unwrap();
    assert!(!c.stats.stopped);
    assert_eq!(c.stats.generated_tokens, 2 * Q + 1);
    assert_eq!(c.stats.continuation_frames, 2);
    assert_eq!(c.stats.dropped_partial_tokens, 1);
    let frames = c.frames.as_ref().unwrap();
    assert_eq!(frames.len(), 2);
    assert_eq!(frames.dim, utt.frames.dim);

    let again = continue_audio(&params, &codec, &vocab, &utt.frames, 1.0, &sc(2 * Q + 1)).unwrap();
    assert_eq!(again.generation.ids, c.generation.ids, "same seed, same draw");
}

#[test]
fn constrained_sampling_has_no_order_violations() {
    let (codec, vocab, utt) = world();
    let close = vocab.audio_close();
    let params = constant_model(&vocab, |id| if id == close { -10.0 } else { 0.0 });
    let mut config = sc(6 * Q);
    let free = continue_audio(&params, &codec, &vocab, &utt.frames, 1.0, &config).unwrap();
    // uniform over a vocabulary that is mostly not the expected level
    assert!(free.stats.order_violations > 0);
    config.constrain_order = true;
    let c = continue_audio(&params, &codec, &vocab, &utt.frames, 1.0, &config).unwrap();
    assert_eq!(c.stats.order_violations, 0);
    assert_eq!(c.stats.continuation_frames, 6);
}

#[test]
fn short_prompt_is_rejected() {
    let (codec, vocab, utt) = world();
    let params = constant_model(&vocab, |_| 0.0);
    let seconds = (utt.frames.len() + 1) as f64 / utt.frames.frame_rate_hz;
    assert!(continue_audio(&params, &codec, &vocab, &utt.frames, seconds, &sc(4)).is_err());
    assert!(continue_audio(&params, &codec, &vocab, &utt.frames, 0.01, &sc(4)).is_err());
}
