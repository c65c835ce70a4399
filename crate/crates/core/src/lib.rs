//! Forensic shoeprint comparison engine.
//!
//! Two outsole scans go in; aligned point clouds, 35 similarity features and a
//! random-forest posterior that the pair is mated come out. The crate also
//! carries a deterministic synthetic outsole generator and the evaluation kit
//! used to study how the features shift across capture conditions.
//!
//! Module map:
//! - [`imgproc`]: grayscale loading, Laplacian edges, point extraction, binarization
//! - [`pointcloud`]: clouds, rigid transforms, KD-tree, downsampling, partial cuts
//! - [`icp`]: multi-start two-way ICP alignment
//! - [`simfeatures`]: overlap, Jaccard, nearest-distance statistics
//! - [`clustersim`]: Ward-seeded k-means cluster comparison
//! - [`imagemetrics`]: phase correlation, NCC, MSE, SSIM
//! - [`forest`]: random forest, grid search, importances
//! - [`pipeline`]: image pair to feature vector
//! - [`evalkit`]: scenario pairing, splits, evaluation, EMD, experiment matrix
//! - [`synthgen`]: synthetic outsoles and registries

pub mod clustersim;
pub mod error;
pub mod evalkit;
pub mod forest;
pub mod icp;
pub mod imagemetrics;
pub mod imgproc;
pub mod pipeline;
pub mod pointcloud;
pub mod seed;
pub mod simfeatures;
pub mod stats;
pub mod synthgen;

pub use error::{Error, Result};
