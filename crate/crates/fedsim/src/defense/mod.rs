//! Server-side defenses behind the aggregation seam.
//!
//! `robust` holds the robust-aggregation rules (Bulyan, Robust LR, DeepSight
//! with DBSCAN); `refine` holds the model-refinement and certified defenses
//! (FedDF, FedRAD, FedMV pruning, CRFL).

pub mod refine;
pub mod robust;
