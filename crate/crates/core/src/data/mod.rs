//! Datasets on disk, clip sampling and synthetic sequence generation.

pub mod clips;
pub mod dataset;
pub mod netpbm;
pub mod synth;

pub use clips::{clip_at, Clip, ClipSampler};
pub use dataset::{load_dataset, split_sequences, write_dataset, Dataset, Label, Padding, VideoSequence};
pub use netpbm::{read_mask, write_mask, Image};
pub use synth::{synth_dataset, synth_generate, SynthConfig, SynthDataset, SynthSpec};
