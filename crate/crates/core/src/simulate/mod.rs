//! Reproducible multi-speaker meeting simulation with controlled overlap,
//! plus toy band-limited-noise speakers for data-free experiments.

mod augment;
mod dataset;
mod meeting;
mod toy;

pub use augment::{augment, fft_convolve, synthetic_rir, ReverbConfig};
pub use dataset::{emit_dataset, load_meeting, read_jsonl, resolve, write_jsonl, MeetingEntry, UtteranceEntry};
pub use meeting::{
    simulate_meeting, MeetingArtifact, MeetingSpec, PoolUtterance, SourceInfo, TurnConfig, UtterancePool,
};
pub use toy::{phone_inventory, synthesize, toy_noise, Formant, ToyCorpus, ToyVoice, VoiceVariation, TOY_RMS};
