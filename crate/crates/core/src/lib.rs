//! Differentiable cell search with straight-through Gumbel-softmax sampling,
//! per-operation importance counters and gradual operation pruning.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod genotype;
pub mod graph;
pub mod importance;
pub mod kernels;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod params;
pub mod search;
pub mod space;
pub mod tensor;

pub use data::{Dataset, SyntheticSpec, SyntheticVariant};
pub use error::{Error, Result};
pub use eval::{count_madds, count_params, EvalConfig, EvalNetwork, EvalReport, StemKind};
pub use genotype::{decode_genotype, CellGenotype, Genotype, NodeInput};
pub use graph::{Graph, Var};
pub use importance::{ImportanceState, IndicatorTable};
pub use ops::OpKind;
pub use params::{Group, ParamId, ParamStore, Session};
pub use search::{run_search, SearchConfig, SearchData, SearchOutcome, Searcher};
pub use space::{CellType, Supernet, SupernetConfig};
pub use tensor::{Real, Tensor};
