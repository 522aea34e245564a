//! Cascaded binary-code retrieval.
//!
//! A gallery is stored as several aligned binary code matrices of increasing
//! length. A query is first ranked against the whole gallery with the shortest
//! codes; only items whose distance falls under a calibrated threshold are
//! re-ranked with the next, longer codes, and so on until the longest level.
//! Thresholds come from fitting Gaussian models to the Hamming distances of
//! same-identity and different-identity pairs and maximizing an F-beta score.
//!
//! Modules:
//! - [`codebook`]: packed code matrices, multi-level codebooks, the `CTFC`
//!   container and the threshold sidecar.
//! - [`hamming`]: popcount distance kernels and linear-time counting-sort ranking.
//! - [`cascade`]: full ranking at a single level and coarse-to-fine search.
//! - [`dto`]: distance threshold calibration.
//! - [`eval`]: CMC, mAP and query timing.
//! - [`synth`]: synthetic identity-structured codebooks.
//! - [`bench`]: benchmark experiments emitting CSV records.

pub mod bench;
pub mod cascade;
pub mod codebook;
pub mod dto;
mod error;
pub mod eval;
pub mod hamming;
pub mod par;
pub mod synth;

pub use cascade::{
    ctf_search, full_rank, search_parallel, search_sequential, QueryCodes, RankedResult, Rankings,
    SearchMode, SearchScratch,
};
pub use codebook::{
    load_codebook, save_codebook, validate, CodeLengthSchedule, MultiLevelCodebook,
    PackedCodeMatrix, ThresholdSet, Violation,
};
pub use dto::{calibrate, ClassWeighting, FBetaConfig, FormulaMode, GaussianPairModel};
pub use error::{Error, Result};
pub use eval::{evaluate, timed_search, EvalOutcome, EvalReport};
pub use hamming::{batch_distances, counting_sort_rank, hamming_distance, select_within};
pub use synth::{generate, SynthSpec};
