//! Dense tensors with reverse-mode differentiation, the building blocks of
//! DD-Net and the graph that wires them together.

pub mod archspec;
pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod kv;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod real;
pub mod session;
pub mod tensor;

pub use archspec::{ArchSpec, SkipSet, UpsampleBlock};
pub use autodiff::{Mode, Padding, Tape, Var};
pub use blocks::{Block, BlockKind, BlockSpec};
pub use error::{Error, Result, SpecError};
pub use graph::{EdgeKind, Graph, HeadOutputs};
pub use labels::{LabelMap, LabelSpace, VOID};
pub use losses::{ClassWeights, PixelCounts, SegLoss, WeightStrategy};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use params::{ParamId, ParamRegistry, ParamStore};
pub use real::{Precision, Real};
pub use session::Session;
pub use tensor::{Shape4, Tensor4};
