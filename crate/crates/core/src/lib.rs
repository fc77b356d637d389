//! Meta-analysis engine: effect sizes, random- and mixed-effects models,
//! multilevel models, cluster-robust inference, post-fit summaries,
//! publication-bias statistics and SVG plots.

pub mod dist;
pub mod error;
pub mod escalc;
pub mod ingest;
pub mod kernel;
pub mod mv;
pub mod optim;
pub mod plots;
pub mod postfit;
pub mod pubbias;
pub mod robust;
pub mod table;
pub mod uni;

pub use error::{MetaError, Result};
