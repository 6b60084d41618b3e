//! Synthetic spoken-language world: lexicon and grammar, acoustic factors,
//! frame rendering and the persisted corpus.

mod config;
mod language;
mod render;
mod store;

pub use config::CorpusConfig;
pub use language::{
    build_language, legal_string_count, Background, Language, Phoneme, PhonemeClass, PhonemeId,
    Word, WordId, WordRole,
};
pub use render::{
    alternatives, draw_durations, make_consistency_negative, render_frames, render_phoneme_string,
    render_utterance, AcousticFactors, Axis, FactorSwitch, FeatureFrameSeq, Utterance,
};
pub use store::{
    decode_frames, encode_frames, gen_corpus, generate_utterance, read_frames, split_of,
    utterance_id, utterance_index, write_frames, Corpus, IndexHeader, Split, UtteranceRecord, FRAMES_DIR,
    INDEX_FILE,
};
