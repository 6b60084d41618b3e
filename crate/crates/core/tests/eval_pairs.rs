use speechlm::codec::{fit_codec, CodecConfig, RvqCodec};
use speechlm::corpus::{build_language, generate_utterance, render_utterance, AcousticFactors, CorpusConfig, Language};
use speechlm::eval::{speaker_similarity, PairBuilder, Task};
use speechlm::tokens::{deinterleave, validate_order, UnifiedVocab};
use speechlm::Error;

fn config() -> CorpusConfig {
    CorpusConfig {
        lexicon_size: 96,
        n_speakers: 6,
        max_frames: 80,
        ..Default::default()
    }
}

fn codec_for(lang: &Language) -> RvqCodec {
    let mut frames = Vec::new();
    let mut teacher = Vec::new();
    for i in 0..150 {
        let u = generate_utterance(lang, i).unwrap();
        frames.extend_from_slice(&u.frames.data);
        teacher.extend(u.frame_phonemes().into_iter().map(u32::from));
    }
    let cc = CodecConfig {
        levels: 3,
        codebook_size: 32,
        iters: 15,
        ..Default::default()
    };
    fit_codec(&frames, lang.config.dim, lang.config.semantic_dim, Some(&teacher), &cc).unwrap()
}

fn builder<'a>(lang: &'a Language, codec: &'a RvqCodec, sources: Vec<usize>) -> PairBuilder<'a> {
    PairBuilder {
        lang,
        codec,
        vocab: UnifiedVocab::new(lang.config.lexicon_size as u32, 3, 32).unwrap(),
        sources,
        seed: 5,
    }
}

#[test]
fn consistency_pairs_differ_only_acoustically() {
    let lang = build_language(&config()).unwrap();
    let codec = codec_for(&lang);
    let b = builder(&lang, &codec, (200..230).collect());
    for task in [Task::Speaker, Task::Sentiment, Task::Background] {
        let pairs = b.build(task, 20).unwrap();
        // a coarse codebook can absorb a small switch on short utterances
        let differing = pairs.iter().filter(|p| p.pos != p.neg).count();
        assert!(differing >= 16, "{task:?}: {differing}/20 pairs differ");
        for p in pairs {
            assert_eq!(p.pos.len(), p.neg.len(), "{task:?}");
            assert!(validate_order(&b.vocab, &p.pos).well_formed && validate_order(&b.vocab, &p.neg).well_formed);
            let (gp, gn) = (deinterleave(&b.vocab, &p.pos).unwrap(), deinterleave(&b.vocab, &p.neg).unwrap());
            // acoustic factors live outside the semantic subspace
            assert_eq!(gp.row(0), gn.row(0), "{task:?} {}", p.source);
        }
    }
    for p in b.build(Task::Room, 10).unwrap() {
        assert_eq!(p.pos.len(), p.neg.len());
    }
}

#[test]
fn semantic_pairs_are_length_matched() {
    let lang = build_language(&config()).unwrap();
    let codec = codec_for(&lang);
    let b = builder(&lang, &codec, vec![200]);
    for task in [Task::Lexical, Task::Syntax, Task::Topic] {
        let pairs = b.build(task, 25).unwrap();
        assert_eq!(pairs, b.build(task, 25).unwrap(), "pairs are deterministic");
        for p in pairs {
            assert_eq!(p.pos.len(), p.neg.len(), "{task:?}");
            assert_ne!(p.pos, p.neg);
            assert!(p.score_from < p.pos.len() - 1);
            if task == Task::Topic {
                assert!(p.score_from > 0);
                assert_eq!(p.pos[..p.score_from + 1], p.neg[..p.score_from + 1], "shared prompt");
            }
        }
    }
}

#[test]
fn too_many_switch_pairs_is_a_capacity_error() {
    let lang = build_language(&config()).unwrap();
    let codec = codec_for(&lang);
    let b = builder(&lang, &codec, vec![200, 201]);
    // 2 sources x 5 other speakers
    assert!(b.build(Task::Speaker, 10).is_ok());
    assert!(matches!(b.build(Task::Speaker, 11), Err(Error::Capacity { available: 10, .. })));
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn remove(v: &mut [f64], d: &[f64]) {
    let dd: f64 = d.iter().map(|x| x * x).sum();
    let k = v.iter().zip(d).map(|(a, b)| a * b).sum::<f64>() / dd;
    v.iter_mut().zip(d).for_each(|(a, b)| *a -= k * b);
}

#[test]
fn orthogonal_speakers_have_near_zero_similarity() {
    let mut lang = build_language(&config()).unwrap();
    let mut s1 = lang.speakers[1].clone();
    remove(&mut s1, &lang.speakers[0]);
    remove(&mut s1, &lang.prosody_basis);
    unit(&mut s1);
    lang.speakers[1] = s1;
    let words: Vec<u32> = (0..14).map(|i| lang.objects[i % lang.objects.len()]).collect();
    let f = |speaker_id| AcousticFactors {
        speaker_id,
        sentiment: 0.0,
        background_id: 2,
        room_coeff: 0.0,
    };
    let a = render_utterance(&lang, &words, f(0), 3).unwrap();
    let b = render_utterance(&lang, &words, f(1), 4).unwrap();
    let n = a.frames.len().min(b.frames.len());
    let s = speaker_similarity(&lang, &a.frames.slice(0, 37), &b.frames.slice(37, n)).unwrap();
    assert!(s.abs() < 0.1, "{s}");
    let same = speaker_similarity(&lang, &a.frames.slice(0, 37), &a.frames.slice(37, n)).unwrap();
    assert!(same > 0.95, "{same}");
}
