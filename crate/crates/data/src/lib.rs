//! Synthetic datasets, PNG corpora and augmentation for DD-Net training.

pub mod augment;
pub mod corpus;
pub mod error;
pub mod flow;
pub mod palette;
pub mod pngio;
pub mod sample;
pub mod split;
pub mod synth;

pub use augment::{augment, AugPolicy, Flip};
pub use corpus::{load_corpus, Corpus};
pub use error::{DataError, Result};
pub use flow::{fuse_flow, FlowField};
pub use palette::Palette;
pub use sample::{batch, Sample};
pub use split::split_ids;
pub use synth::{synth_dataset, Manifest, ShapeKind, SynthSpec};
