//! Image-space similarity between the binarized Q image and the binarized K
//! image carried through the ICP transform.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::BinaryImage;
use crate::pointcloud::{Point, RigidTransform};

/// Side of the square excluded around the correlation peak when measuring sidelobes.
pub const PSR_EXCLUSION: usize = 11;

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Maps the black pixels of `k_img` through `tf` into a white canvas of
/// `width` × `height`, using plane coordinates (y up from the bottom row) on
/// both sides. Each pixel lands on its nearest cell; cells outside are dropped.
pub fn rasterize_aligned(k_img: &BinaryImage, tf: &RigidTransform, width: usize, height: usize) -> BinaryImage {
    let mut out = BinaryImage::white(width, height);
    let hk = k_img.height() as f64;
    for row in 0..k_img.height() {
        for col in 0..k_img.width() {
            if k_img.get(row, col) != 0 {
                continue;
            }
            let p = tf.apply_point(&Point::new(col as f64, hk - 1.0 - row as f64));
            let c = p.x.round();
            let r = (height as f64 - 1.0) - p.y.round();
            if c >= 0.0 && r >= 0.0 && c < width as f64 && r < height as f64 {
                out.set(r as usize, c as usize, 0);
            }
        }
    }
    out
}

/// Both images padded with white to their element-wise maximum size.
pub fn pad_common(a: &BinaryImage, b: &BinaryImage) -> (BinaryImage, BinaryImage) {
    let w = a.width().max(b.width());
    let h = a.height().max(b.height());
    (a.padded(w, h), b.padded(w, h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCorrMap {
    pub width: usize,
    pub height: usize,
    /// Row-major real part of the inverse transform.
    pub r: Vec<f64>,
    /// (row, col) of the first maximum in row-major order.
    pub peak_location: (usize, usize),
    pub peak: f64,
}

impl PhaseCorrMap {
    pub fn from_values(width: usize, height: usize, r: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || r.len() != width * height {
            return Err(Error::InvalidArgument("correlation map shape mismatch".into()));
        }
        let mut best = 0;
        for (i, v) in r.iter().enumerate() {
            if *v > r[best] {
                best = i;
            }
        }
        Ok(Self { width, height, peak: r[best], peak_location: (best / width, best % width), r })
    }

    pub fn mean(&self) -> f64 {
        self.r.iter().sum::<f64>() / self.r.len() as f64
    }
}

fn fft2(data: &mut [Complex<f64>], width: usize, height: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for c in 0..width {
        for r in 0..height {
            col[r] = data[r * width + c];
        }
        col_fft.process(&mut col);
        for r in 0..height {
            data[r * width + c] = col[r];
        }
    }
}

fn to_complex(img: &BinaryImage) -> Vec<Complex<f64>> {
    img.pixels().iter().map(|&v| Complex::new(v as f64, 0.0)).collect()
}

/// Unnormalized cross-power spectrum `conj(F(jq)) * F(jk)`, inverse
/// transformed. If `jk` is `jq` circularly shifted by (di, dj), the peak sits at (di, dj).
pub fn phase_correlation(jq: &BinaryImage, jk: &BinaryImage) -> PhaseCorrMap {
    let (jq, jk) = pad_common(jq, jk);
    let (w, h) = (jq.width(), jq.height());
    let mut fq = to_complex(&jq);
    let mut fk = to_complex(&jk);
    fft2(&mut fq, w, h, false);
    fft2(&mut fk, w, h, false);
    let mut prod: Vec<Complex<f64>> = fq.iter().zip(&fk).map(|(a, b)| a.conj() * b).collect();
    fft2(&mut prod, w, h, true);
    let scale = (w * h) as f64;
    let r = prod.iter().map(|c| c.re / scale).collect();
    PhaseCorrMap::from_values(w, h, r).expect("shape is consistent")
}

/// Peak of the correlation map divided by its mean.
pub fn peak_value(map: &PhaseCorrMap) -> Result<f64> {
    let m = map.mean();
    if m == 0.0 {
        return Err(Error::UndefinedMetric("peak value: map mean is zero"));
    }
    Ok(map.peak / m)
}

/// Peak-to-sidelobe ratio. The exclusion window wraps around the map edges,
/// matching the circular geometry of the correlation.
pub fn psr(map: &PhaseCorrMap) -> Result<f64> {
    let half = (PSR_EXCLUSION / 2) as isize;
    let (pr, pc) = (map.peak_location.0 as isize, map.peak_location.1 as isize);
    let (h, w) = (map.height as isize, map.width as isize);
    let mut excluded = vec![false; map.r.len()];
    for dr in -half..=half {
        for dc in -half..=half {
            let r = (pr + dr).rem_euclid(h) as usize;
            let c = (pc + dc).rem_euclid(w) as usize;
            excluded[r * map.width + c] = true;
        }
    }
    let side: Vec<f64> = map.r.iter().zip(&excluded).filter(|(_, &e)| !e).map(|(v, _)| *v).collect();
    if side.is_empty() {
        return Err(Error::UndefinedMetric("psr: no sidelobe outside the exclusion window"));
    }
    let mean = side.iter().sum::<f64>() / side.len() as f64;
    let var = side.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / side.len() as f64;
    if var <= 0.0 {
        return Err(Error::UndefinedMetric("psr: sidelobe has zero spread"));
    }
    Ok((map.peak - mean) / var.sqrt())
}

fn check_dims(a: &BinaryImage, b: &BinaryImage) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::InvalidArgument(format!(
            "image dims differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Pearson correlation of pixel values.
pub fn ncc(a: &BinaryImage, b: &BinaryImage) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.pixels().len() as f64;
    let ma = a.pixels().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.pixels().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedMetric("ncc: constant image"));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Mean squared difference, which for binary images is the fraction of disagreeing pixels.
pub fn mse(a: &BinaryImage, b: &BinaryImage) -> Result<f64> {
    check_dims(a, b)?;
    let diff = a.pixels().iter().zip(b.pixels()).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.pixels().len() as f64)
}

/// Summed-area table with a zero border row and column.
fn integral(width: usize, height: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let w1 = width + 1;
    let mut t = vec![0.0; w1 * (height + 1)];
    for r in 0..height {
        let mut run = 0.0;
        for c in 0..width {
            run += f(r * width + c);
            t[(r + 1) * w1 + c + 1] = t[r * w1 + c + 1] + run;
        }
    }
    t
}

/// Mean SSIM over every fully contained 7×7 window, with uniform weights,
/// sample (n−1) covariance and a dynamic range of 1.
pub fn ssim(a: &BinaryImage, b: &BinaryImage) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::TooSmall { width: w, height: h, window: SSIM_WINDOW });
    }
    let pa = a.pixels();
    let pb = b.pixels();
    let sa = integral(w, h, |i| pa[i] as f64);
    let sb = integral(w, h, |i| pb[i] as f64);
    let saa = integral(w, h, |i| (pa[i] as f64).powi(2));
    let sbb = integral(w, h, |i| (pb[i] as f64).powi(2));
    let sab = integral(w, h, |i| pa[i] as f64 * pb[i] as f64);
    let w1 = w + 1;
    let box_sum = |t: &[f64], r: usize, c: usize| {
        let (r2, c2) = (r + SSIM_WINDOW, c + SSIM_WINDOW);
        t[r2 * w1 + c2] - t[r * w1 + c2] - t[r2 * w1 + c] + t[r * w1 + c]
    };
    let np = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let cov_norm = np / (np - 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let mx = box_sum(&sa, r, c) / np;
            let my = box_sum(&sb, r, c) / np;
            let vx = cov_norm * (box_sum(&saa, r, c) / np - mx * mx);
            let vy = cov_norm * (box_sum(&sbb, r, c) / np - my * my);
            let vxy = cov_norm * (box_sum(&sab, r, c) / np - mx * my);
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * vxy + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Image metrics for one pair; a metric is `None` when it is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetricReport {
    pub peak_value: Option<f64>,
    pub psr: Option<f64>,
    pub ncc: Option<f64>,
    pub mse: f64,
    pub ssim: Option<f64>,
}

/// All image metrics. The images are padded to a common size first.
pub fn image_metrics(jq: &BinaryImage, jk_aligned: &BinaryImage) -> ImageMetricReport {
    let (a, b) = pad_common(jq, jk_aligned);
    let map = phase_correlation(&a, &b);
    ImageMetricReport {
        peak_value: peak_value(&map).ok(),
        psr: psr(&map).ok(),
        ncc: ncc(&a, &b).ok(),
        mse: mse(&a, &b).expect("padded to common dims"),
        ssim: ssim(&a, &b).ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random_binary(w: usize, h: usize, s: u64) -> BinaryImage {
        let mut rng = seed::rng(s);
        BinaryImage::new(w, h, (0..w * h).map(|_| rng.random_range(0..2u8)).collect()).unwrap()
    }

    fn shifted(img: &BinaryImage, di: usize, dj: usize) -> BinaryImage {
        let (w, h) = (img.width(), img.height());
        let mut out = BinaryImage::white(w, h);
        for r in 0..h {
            for c in 0..w {
                out.set((r + di) % h, (c + dj) % w, img.get(r, c));
            }
        }
        out
    }

    #[test]
    fn rasterize_identity_and_shift() {
        let img = BinaryImage::new(4, 1, vec![0, 0, 1, 0]).unwrap();
        assert_eq!(rasterize_aligned(&img, &RigidTransform::IDENTITY, 4, 1), img);
        let moved = rasterize_aligned(&img, &RigidTransform::translation(2.0, 0.0), 4, 1);
        assert_eq!(moved.pixels(), &[1, 1, 0, 0]);
    }

    #[test]
    fn rasterize_quarter_turn() {
        // plane (1,0) is row 2, col 1 of a 3-row image; (0,1) is row 1, col 0
        let mut img = BinaryImage::white(3, 3);
        img.set(2, 1, 0);
        let out = rasterize_aligned(&img, &RigidTransform::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0), 3, 3);
        assert_eq!(out.black_count(), 1);
        assert_eq!(out.get(1, 0), 0);
    }

    #[test]
    fn phase_correlation_finds_planted_shift() {
        let a = random_binary(24, 17, 1);
        assert_eq!(phase_correlation(&a, &a).peak_location, (0, 0));
        let b = shifted(&a, 5, 9);
        assert_eq!(phase_correlation(&a, &b).peak_location, (5, 9));
    }

    #[test]
    fn white_fields_give_flat_map() {
        let w = BinaryImage::new(8, 8, vec![1; 64]).unwrap();
        let m = phase_correlation(&w, &w);
        assert!(m.r.iter().all(|v| (v - m.r[0]).abs() < 1e-9));
        assert!((peak_value(&m).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn peak_value_arithmetic() {
        let mut r = vec![0.0; 100];
        r[37] = 10.0;
        let m = PhaseCorrMap::from_values(10, 10, r).unwrap();
        assert!((peak_value(&m).unwrap() - 100.0).abs() < 1e-12);
        let z = PhaseCorrMap::from_values(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(peak_value(&z), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn psr_on_flat_and_noisy_fields() {
        let mut r = vec![0.0; 400];
        r[0] = 10.0;
        let flat = PhaseCorrMap::from_values(20, 20, r).unwrap();
        assert!(matches!(psr(&flat), Err(Error::UndefinedMetric(_))));

        // alternating +-1 sidelobe (an even count of cells) has mean 0 and std 1
        let (w, h) = (41usize, 41usize);
        let mut vals = vec![0.0; w * h];
        let mut sign = 1.0;
        for r in 0..h {
            for c in 0..w {
                if r.abs_diff(20) <= 5 && c.abs_diff(20) <= 5 {
                    continue;
                }
                vals[r * w + c] = sign;
                sign = -sign;
            }
        }
        vals[20 * w + 20] = 10.0;
        let m = PhaseCorrMap::from_values(w, h, vals).unwrap();
        assert!((psr(&m).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_cases() {
        let a = random_binary(16, 16, 2);
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = BinaryImage::new(16, 16, a.pixels().iter().map(|v| 1 - v).collect()).unwrap();
        assert!((ncc(&a, &inv).unwrap() + 1.0).abs() < 1e-12);
        let flat = BinaryImage::white(16, 16);
        assert!(matches!(ncc(&a, &flat), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn mse_cases() {
        let black = BinaryImage::new(4, 4, vec![0; 16]).unwrap();
        let white = BinaryImage::white(4, 4);
        assert_eq!(mse(&black, &white).unwrap(), 1.0);
        assert_eq!(mse(&black, &black).unwrap(), 0.0);
        let half = BinaryImage::new(4, 4, (0..16).map(|i| (i < 8) as u8).collect()).unwrap();
        assert_eq!(mse(&half, &white).unwrap(), 0.5);
    }

    #[test]
    fn ssim_identity_and_size_check() {
        let a = random_binary(12, 9, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let tiny = BinaryImage::white(6, 10);
        assert!(matches!(ssim(&tiny, &tiny), Err(Error::TooSmall { .. })));
    }
}
