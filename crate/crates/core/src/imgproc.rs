//! Grayscale image handling: loading, Laplacian edge detection with inversion,
//! darkness-threshold point extraction and binarization.
//!
//! Coordinates follow the plane convention used everywhere else in the crate:
//! `x` is the column index and `y = height - 1 - row`, so `y` grows upward from
//! the bottom row.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageReader};

use crate::error::{Error, Result};
use crate::pointcloud::{Point, PointCloud};

/// Intensity below which a pixel counts as black when binarizing.
pub const DEFAULT_BINARIZE_THRESHOLD: u8 = 85;

/// Darkness threshold applied to the inverted edge image when extracting points.
pub const DEFAULT_DARKNESS_THRESHOLD: u8 = 85;

/// 8-connected Laplacian, the same kernel as the common "find edges" filter.
pub const LAPLACIAN_KERNEL: [[i32; 3]; 3] = [[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]];

/// Row-major 8-bit grayscale image (0 = black, 255 = white).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("zero-dimension image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Format(format!(
                "pixel buffer has {} entries, expected {}",
                pixels.len(),
                width * height
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image from `f(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.pixels[row * self.width + col] = value;
    }

    /// Mirror image about the vertical center line.
    pub fn flip_horizontal(&self) -> GrayImage {
        let mut out = self.clone();
        for r in 0..self.height {
            let row = &mut out.pixels[r * self.width..(r + 1) * self.width];
            row.reverse();
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::Format("pixel buffer size mismatch".into()))?;
        buf.save_with_format(path.as_ref(), image::ImageFormat::Png)
            .map_err(image_error)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::Format("pixel buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png).map_err(image_error)?;
        Ok(out.into_inner())
    }
}

/// Row-major binary image: 0 = black, 1 = white.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Format(format!("bad binary image geometry {width}x{height}")));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::Format("binary image entries must be 0 or 1".into()));
        }
        Ok(Self { width, height, pixels })
    }

    /// All-white canvas.
    pub fn white(width: usize, height: usize) -> Self {
        Self { width: width.max(1), height: height.max(1), pixels: vec![1; width.max(1) * height.max(1)] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.pixels[row * self.width + col] = value.min(1);
    }

    pub fn black_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 0).count()
    }

    /// Raw view as a gray image with intensities in {0, 1}.
    pub fn to_gray_raw(&self) -> GrayImage {
        GrayImage { width: self.width, height: self.height, pixels: self.pixels.clone() }
    }

    /// Display view with intensities in {0, 255}.
    pub fn to_gray_display(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| p * 255).collect(),
        }
    }

    /// Pads with white on the right and bottom up to `width` x `height`.
    pub fn padded(&self, width: usize, height: usize) -> BinaryImage {
        assert!(width >= self.width && height >= self.height);
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = BinaryImage::white(width, height);
        for r in 0..self.height {
            out.pixels[r * width..r * width + self.width]
                .copy_from_slice(&self.pixels[r * self.width..(r + 1) * self.width]);
        }
        out
    }
}

fn image_error(e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

/// Pillow's integer "L" conversion: `(19595 R + 38470 G + 7471 B + 2^15) >> 16`.
fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((u32::from(r) * 19595 + u32::from(g) * 38470 + u32::from(b) * 7471 + 0x8000) >> 16) as u8
}

fn from_dynamic(img: DynamicImage) -> Result<GrayImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Format("zero-dimension image".into()));
    }
    let pixels = if img.color().has_color() {
        img.to_rgb8().pixels().map(|p| luma(p[0], p[1], p[2])).collect()
    } else {
        img.to_luma8().into_raw()
    };
    GrayImage::new(w, h, pixels)
}

/// Loads a PNG/TIFF/JPEG file as grayscale; color inputs use standard luma weights.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let reader = ImageReader::open(path.as_ref())?.with_guessed_format()?;
    from_dynamic(reader.decode().map_err(image_error)?)
}

/// Decodes an in-memory raster.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    if reader.format().is_none() {
        return Err(Error::Format("unrecognized image format".into()));
    }
    from_dynamic(reader.decode().map_err(image_error)?)
}

/// Laplacian edge response (edge-replicated borders, clamped to [0, 255]),
/// inverted so that edges come out dark on a light background.
pub fn edge_detect(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width, img.height);
    let mut out = vec![0u8; w * h];
    let clamp_idx = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for r in 0..h {
        for c in 0..w {
            let mut acc: i32 = 0;
            for (kr, krow) in LAPLACIAN_KERNEL.iter().enumerate() {
                let rr = clamp_idx(r as isize + kr as isize - 1, h);
                for (kc, &kv) in krow.iter().enumerate() {
                    let cc = clamp_idx(c as isize + kc as isize - 1, w);
                    acc += kv * i32::from(img.pixels[rr * w + cc]);
                }
            }
            out[r * w + c] = 255 - acc.clamp(0, 255) as u8;
        }
    }
    GrayImage { width: w, height: h, pixels: out }
}

/// Coordinates of every pixel strictly darker than `darkness_threshold`.
pub fn extract_points(edge_img: &GrayImage, darkness_threshold: u8) -> PointCloud {
    let h = edge_img.height;
    let mut pts = Vec::new();
    for r in 0..h {
        for c in 0..edge_img.width {
            if edge_img.get(r, c) < darkness_threshold {
                pts.push(Point::new(c as f64, (h - 1 - r) as f64));
            }
        }
    }
    PointCloud::new(pts)
}

/// Like [`extract_points`] but with a threshold above the 8-bit range, so a
/// value of 256 selects every pixel.
pub fn extract_points_wide(edge_img: &GrayImage, darkness_threshold: u16) -> PointCloud {
    if darkness_threshold > 255 {
        let h = edge_img.height;
        let pts = (0..h)
            .flat_map(|r| (0..edge_img.width).map(move |c| Point::new(c as f64, (h - 1 - r) as f64)))
            .collect();
        return PointCloud::new(pts);
    }
    extract_points(edge_img, darkness_threshold as u8)
}

/// Pixel becomes 0 (black) iff its intensity is below `threshold`, else 1.
pub fn binarize(img: &GrayImage, threshold: u8) -> BinaryImage {
    BinaryImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&p| u8::from(p >= threshold)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn white(w: usize, h: usize) -> GrayImage {
        GrayImage::filled(w, h, 255).unwrap()
    }

    #[test]
    fn rejects_zero_dimensions() {
        assert!(matches!(GrayImage::new(0, 3, vec![]), Err(Error::Format(_))));
    }

    #[test]
    fn pillow_luma_of_pure_red() {
        assert_eq!(luma(255, 0, 0), 76);
        assert_eq!(luma(255, 255, 255), 255);
        assert_eq!(luma(0, 0, 0), 0);
    }

    #[test]
    fn flat_field_has_no_edges() {
        let img = GrayImage::filled(6, 4, 137).unwrap();
        assert!(edge_detect(&img).pixels().iter().all(|&p| p == 255));
    }

    #[test]
    fn single_black_pixel_darkens_its_ring() {
        let mut img = white(3, 3);
        img.set(1, 1, 0);
        let e = edge_detect(&img);
        // Center: 8*0 - 8*255 < 0 -> 0 -> inverted 255. Every neighbor (with
        // replication) sees the black pixel once and seven 255s: 8*255 - 7*255.
        let expected = [0, 0, 0, 0, 255, 0, 0, 0, 0];
        assert_eq!(e.pixels(), &expected);
    }

    #[test]
    fn vertical_step_responds_only_next_to_step() {
        let img = GrayImage::from_fn(8, 5, |_, c| if c < 4 { 0 } else { 255 }).unwrap();
        let e = edge_detect(&img);
        for r in 0..5 {
            for c in 0..8 {
                let v = e.get(r, c);
                if c == 4 {
                    // white side: 8*255 - (5*255 + 3*0) = 765 -> 255 -> inverted 0
                    assert_eq!(v, 0);
                } else {
                    // black side is negative and clamps to 0; flat regions are 0
                    assert_eq!(v, 255, "row {r} col {c}");
                }
            }
        }
    }

    #[test]
    fn extraction_uses_bottom_origin_and_strict_threshold() {
        let mut img = white(10, 10);
        img.set(5, 3, 0);
        img.set(7, 7, 85);
        let cloud = extract_points(&img, 85);
        assert_eq!(cloud.points(), &[Point::new(3.0, 4.0)]);
        assert!(extract_points(&white(4, 4), 85).is_empty());
    }

    #[test]
    fn threshold_bounds() {
        let img = GrayImage::from_fn(5, 4, |r, c| ((r * 5 + c) * 13) as u8).unwrap();
        assert!(extract_points(&img, 0).is_empty());
        assert_eq!(extract_points_wide(&img, 256).len(), 20);
    }

    #[test]
    fn binarize_threshold_85() {
        let img = GrayImage::new(2, 1, vec![84, 85]).unwrap();
        assert_eq!(binarize(&img, 85).pixels(), &[0, 1]);
        let black = GrayImage::filled(3, 3, 0).unwrap();
        assert!(binarize(&black, 85).pixels().iter().all(|&p| p == 0));
        let checker = GrayImage::from_fn(4, 4, |r, c| if (r + c) % 2 == 0 { 0 } else { 255 }).unwrap();
        let b = binarize(&checker, 85);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(b.get(r, c), ((r + c) % 2) as u8);
            }
        }
    }

    #[test]
    fn png_round_trip_through_decoder() {
        let img = GrayImage::from_fn(3, 2, |r, c| (r * 100 + c * 20) as u8).unwrap();
        let bytes = img.encode_png().unwrap();
        assert_eq!(decode_gray(&bytes).unwrap(), img);
        assert!(matches!(decode_gray(b"not an image"), Err(Error::Format(_))));
    }

    #[test]
    fn padding_is_white() {
        let b = BinaryImage::new(2, 1, vec![0, 0]).unwrap();
        let p = b.padded(3, 2);
        assert_eq!(p.pixels(), &[0, 0, 1, 1, 1, 1]);
    }
}
