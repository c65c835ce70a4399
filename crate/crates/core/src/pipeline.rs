//! End-to-end pair analysis: image → point cloud and binary image → alignment
//! → the 35-feature vector.

use serde::{Deserialize, Serialize};

use crate::clustersim::{self, WardTree, FEATURE_KS};
use crate::error::{Error, Result};
use crate::forest::FEATURE_NAMES;
use crate::icp::{self, AlignmentResult, IcpConfig};
use crate::imagemetrics::{self, ImageMetricReport};
use crate::imgproc::{self, BinaryImage, GrayImage};
use crate::pointcloud::{Foot, PartialCut, PointCloud, Region, ToeDirection};
use crate::seed;
use crate::simfeatures;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Pixels of the inverted edge image darker than this become points.
    pub darkness_threshold: u8,
    pub binarize_threshold: u8,
    pub icp: IcpConfig,
    pub toe: ToeDirection,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            darkness_threshold: imgproc::DEFAULT_DARKNESS_THRESHOLD,
            binarize_threshold: imgproc::DEFAULT_BINARIZE_THRESHOLD,
            icp: IcpConfig::default(),
            toe: ToeDirection::Up,
            seed: 0,
        }
    }
}

/// Optional preprocessing applied to one print before feature extraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrintOptions {
    /// Keep only this region of the print (computed on its own point cloud).
    pub cut: Option<(Region, Foot)>,
    /// Mirror the image left to right before extraction.
    pub reflect: bool,
}

/// A print reduced to its point cloud and its binarized image.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPrint {
    pub cloud: PointCloud,
    pub binary: BinaryImage,
}

impl PreparedPrint {
    pub fn width(&self) -> usize {
        self.binary.width()
    }

    pub fn height(&self) -> usize {
        self.binary.height()
    }
}

pub fn prepare_print(img: &GrayImage, opts: PrintOptions, cfg: &PipelineConfig) -> Result<PreparedPrint> {
    let flipped;
    let img = if opts.reflect {
        flipped = img.flip_horizontal();
        &flipped
    } else {
        img
    };
    let edges = imgproc::edge_detect(img);
    let mut cloud = imgproc::extract_points(&edges, cfg.darkness_threshold);
    let mut binary = imgproc::binarize(img, cfg.binarize_threshold);
    if let Some((region, foot)) = opts.cut {
        let cut = PartialCut::for_cloud(&cloud, region, foot, cfg.toe)?;
        cloud = cut.apply(&cloud)?;
        let h = binary.height();
        for row in 0..h {
            for col in 0..binary.width() {
                let p = crate::pointcloud::Point::new(col as f64, (h - 1 - row) as f64);
                if !cut.keeps(&p) {
                    binary.set(row, col, 1);
                }
            }
        }
    }
    Ok(PreparedPrint { cloud, binary })
}

/// The 35 features of one pair, in [`FEATURE_NAMES`] order. NaN marks a
/// metric that was undefined for this pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn names() -> &'static [&'static str; 35] {
        &FEATURE_NAMES
    }

    pub fn missing(&self) -> Vec<bool> {
        self.values.iter().map(|v| v.is_nan()).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.values[i])
    }

    /// Name/value pairs with missing values as `None`, for JSON output.
    pub fn named(&self) -> Vec<(&'static str, Option<f64>)> {
        FEATURE_NAMES.iter().zip(&self.values).map(|(n, v)| (*n, (!v.is_nan()).then_some(*v))).collect()
    }
}

/// Everything computed for one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAnalysis {
    pub alignment: AlignmentResult,
    pub features: FeatureVector,
    pub image_metrics: ImageMetricReport,
    pub cluster_metrics: Vec<Option<clustersim::ClusterMetrics>>,
}

fn opt(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

/// Aligns K onto Q with the multi-start ICP, seeded from `cfg.seed`.
pub fn align_prints(q: &PreparedPrint, k: &PreparedPrint, cfg: &PipelineConfig) -> Result<AlignmentResult> {
    if q.cloud.is_empty() {
        return Err(Error::EmptyCloud("Q point cloud"));
    }
    if k.cloud.is_empty() {
        return Err(Error::EmptyCloud("K point cloud"));
    }
    let mut icp_cfg = cfg.icp.clone();
    icp_cfg.seed = seed::derive_str(cfg.seed, "icp");
    icp::align(&q.cloud, &k.cloud, &icp_cfg)
}

/// Aligns K onto Q and computes the feature vector.
pub fn analyze_pair(q: &PreparedPrint, k: &PreparedPrint, cfg: &PipelineConfig) -> Result<PairAnalysis> {
    let alignment = align_prints(q, k, cfg)?;
    featurize_aligned(q, k, alignment, cfg)
}

/// Computes the feature vector for a pair that has already been aligned.
pub fn featurize_aligned(q: &PreparedPrint, k: &PreparedPrint, alignment: AlignmentResult, cfg: &PipelineConfig) -> Result<PairAnalysis> {
    let k_star = alignment.aligned(&k.cloud);

    let md = simfeatures::min_dist_stats(&q.cloud, &k_star)?;
    let overlap = simfeatures::overlap_report(&q.cloud, &k_star)?;
    let jac = simfeatures::jaccard_report(&q.cloud, &k_star);

    let tree = WardTree::build(&q.cloud, seed::derive_str(cfg.seed, "ward")).ok();
    let cluster_metrics: Vec<Option<clustersim::ClusterMetrics>> = FEATURE_KS
        .iter()
        .map(|&kk| tree.as_ref().and_then(|t| clustersim::cluster_metrics_with_tree(&q.cloud, &k_star, t, kk).ok()))
        .collect();

    let jk = imagemetrics::rasterize_aligned(&k.binary, &alignment.transform, q.width(), q.height());
    let im = imagemetrics::image_metrics(&q.binary, &jk);

    let mut v = Vec::with_capacity(35);
    v.push(q.cloud.len() as f64);
    v.push(k.cloud.len() as f64);
    v.extend([md.mean, md.std, md.p10, md.p25, md.p50, md.p75, md.p90]);
    for cm in &cluster_metrics {
        match cm {
            Some(m) => v.extend([m.cdm, m.cpm, m.im as f64, opt(m.twrm)]),
            None => v.extend([f64::NAN; 4]),
        }
    }
    for i in 0..5 {
        v.push(overlap.q[i]);
        v.push(overlap.k[i]);
    }
    v.extend([opt(im.peak_value), im.mse, opt(im.ssim), opt(im.ncc), opt(im.psr)]);
    v.extend([jac.decimals_0, jac.decimals_1, jac.decimals_2]);
    debug_assert_eq!(v.len(), FEATURE_NAMES.len());
    Ok(PairAnalysis { alignment, features: FeatureVector { values: v }, image_metrics: im, cluster_metrics })
}

/// Convenience wrapper: prepare both images and analyze the pair.
pub fn analyze_images(
    q: &GrayImage,
    q_opts: PrintOptions,
    k: &GrayImage,
    k_opts: PrintOptions,
    cfg: &PipelineConfig,
) -> Result<PairAnalysis> {
    let q = prepare_print(q, q_opts, cfg)?;
    let k = prepare_print(k, k_opts, cfg)?;
    analyze_pair(&q, &k, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn print(w: usize, h: usize) -> GrayImage {
        // dark blocks with white gaps and a few white holes
        GrayImage::from_fn(w, h, |r, c| {
            let block = (r / 6 + c / 6) % 3 != 0;
            let hole = (r % 17 == 8 && c % 13 == 5) || (r * 7 + c * 3) % 97 == 0;
            if block && !hole {
                20
            } else {
                255
            }
        })
        .unwrap()
    }

    #[test]
    fn self_pair_identity_features() {
        let img = print(48, 64);
        let cfg = PipelineConfig::default();
        let a = analyze_images(&img, PrintOptions::default(), &img, PrintOptions::default(), &cfg).unwrap();
        let f = &a.features;
        for name in ["q_pct_threshold_1", "k_pct_threshold_1", "jaccard_index_0", "jaccard_index_-2", "NCC", "SSIM"] {
            assert!((f.get(name).unwrap() - 1.0).abs() < 1e-9, "{name}");
        }
        for name in ["mean", "std", "0.5", "MSE", "centroid_distance_n_clusters_20", "cluster_proportion_n_clusters_100", "wcv_ratio_n_clusters_20"] {
            assert!(f.get(name).unwrap().abs() < 1e-9, "{name} = {:?}", f.get(name));
        }
        assert_eq!(f.get("iterations_k_n_clusters_20"), Some(1.0));
        assert_eq!(f.values.len(), 35);
    }

    #[test]
    fn blank_image_fails_with_empty_cloud() {
        let blank = GrayImage::filled(20, 20, 255).unwrap();
        let img = print(48, 64);
        let err = analyze_images(&blank, PrintOptions::default(), &img, PrintOptions::default(), &PipelineConfig::default());
        assert!(matches!(err, Err(Error::EmptyCloud(_))));
    }

    #[test]
    fn cut_masks_cloud_and_image() {
        let img = print(48, 64);
        let cfg = PipelineConfig::default();
        let full = prepare_print(&img, PrintOptions::default(), &cfg).unwrap();
        let toe = prepare_print(&img, PrintOptions { cut: Some((Region::Toe, Foot::Left)), reflect: false }, &cfg).unwrap();
        assert!(toe.cloud.len() < full.cloud.len());
        assert!(toe.binary.black_count() < full.binary.black_count());
        // bottom rows are heel and must be white after a toe cut
        assert!((0..48).all(|c| toe.binary.get(63, c) == 1));
    }
}
