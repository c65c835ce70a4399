//! Deterministic synthetic outsoles: a tread pattern shared by every shoe of a
//! model, per-shoe accidental marks (RACs), and capture effects (placement
//! jitter, wear, blur, partial masks, scanner specks).

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{self, ShoeRecord};
use crate::imgproc::GrayImage;
use crate::pointcloud::{Foot, PartialCut, Point, PointCloud, Region, ToeDirection};
use crate::seed;

pub const RUBBER: u8 = 20;
pub const BACKGROUND: u8 = 255;

/// Gap between the sole outline and the canvas edge; wide enough that the
/// strongest blur never reaches the border.
const SOLE_MARGIN: f64 = 18.0;

/// Darkness threshold suited to synthetic captures: blurred prints have weak
/// edge responses, so almost any response is kept.
pub const SYNTH_DARKNESS_THRESHOLD: u8 = 240;

/// Pipeline settings for synthetic corpora.
pub fn pipeline_config(seed_value: u64) -> crate::pipeline::PipelineConfig {
    crate::pipeline::PipelineConfig { darkness_threshold: SYNTH_DARKNESS_THRESHOLD, seed: seed_value, ..Default::default() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternFamily {
    Grid,
    Waves,
    Hex,
}

impl PatternFamily {
    pub const ALL: [PatternFamily; 3] = [PatternFamily::Grid, PatternFamily::Waves, PatternFamily::Hex];
}

/// Parameters of one shoe model and of how its prints are captured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub pattern: PatternFamily,
    /// Tread repeat length in pixels.
    pub pattern_period: f64,
    pub groove_width: f64,
    /// Small model-specific dimples; shared by every shoe of the model.
    pub dimple_count: u32,
    pub rac_count_min: u32,
    pub rac_count_max: u32,
    pub rac_radius_min: f64,
    pub rac_radius_max: f64,
    /// Per-capture translation jitter (standard deviation, pixels).
    pub jitter_sigma: f64,
    /// Per-capture rotation jitter (standard deviation, degrees).
    pub rotation_jitter_deg: f64,
    /// Gaussian blur sigma per blur level.
    pub blur_sigma_per_level: f64,
    /// Fraction of each RAC's pixels filled in per wear level.
    pub wear_erosion_per_level: f64,
    /// Dark scanner specks per capture.
    pub salt_count: u32,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            pattern: PatternFamily::Grid,
            pattern_period: 26.0,
            groove_width: 2.0,
            dimple_count: 14,
            rac_count_min: 12,
            rac_count_max: 18,
            rac_radius_min: 3.0,
            rac_radius_max: 5.0,
            jitter_sigma: 2.0,
            rotation_jitter_deg: 1.5,
            blur_sigma_per_level: 0.6,
            wear_erosion_per_level: 0.25,
            salt_count: 6,
            width: 130,
            height: 280,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [self.jitter_sigma, self.rotation_jitter_deg, self.blur_sigma_per_level];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("sigmas must be finite and non-negative".into()));
        }
        if self.rac_count_min > self.rac_count_max {
            return Err(Error::InvalidArgument("rac_count_min exceeds rac_count_max".into()));
        }
        if !(self.rac_radius_min > 0.0 && self.rac_radius_min <= self.rac_radius_max) {
            return Err(Error::InvalidArgument("RAC radii must satisfy 0 < min <= max".into()));
        }
        if !(self.pattern_period > 2.0 * self.groove_width && self.groove_width > 0.0) {
            return Err(Error::InvalidArgument("pattern period must exceed twice the groove width".into()));
        }
        if !(0.0..=1.0).contains(&self.wear_erosion_per_level) {
            return Err(Error::InvalidArgument("wear erosion per level must lie in [0, 1]".into()));
        }
        if self.width < 32 || self.height < 32 {
            return Err(Error::InvalidArgument("canvas must be at least 32x32".into()));
        }
        Ok(())
    }

    pub fn blur_sigma(&self, level: u8) -> f64 {
        self.blur_sigma_per_level * f64::from(level)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RacKind {
    Dot,
    Nick,
}

/// One randomly acquired characteristic: a white hole or cut in the rubber.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RacMark {
    pub kind: RacKind,
    /// Centre in pixel coordinates (column, row).
    pub col: f64,
    pub row: f64,
    pub radius: f64,
    pub angle: f64,
    /// Covered pixels, outermost first; wear fills them in this order.
    pub pixels: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthShoe {
    pub shoe_id: String,
    pub foot: Foot,
    pub master: GrayImage,
    pub racs: Vec<RacMark>,
}

#[derive(Clone, Copy)]
struct Sole {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Sole {
    fn new(spec: &SynthSpec) -> Sole {
        let (w, h) = (spec.width as f64, spec.height as f64);
        Sole { cx: (w - 1.0) / 2.0, cy: (h - 1.0) / 2.0, a: w / 2.0 - SOLE_MARGIN, b: h / 2.0 - SOLE_MARGIN }
    }

    /// Inside test for an elongated outline with a narrower waist below the middle.
    fn contains(&self, row: f64, col: f64, margin: f64) -> bool {
        let v = (row - self.cy) / (self.b - margin);
        if v.abs() > 1.0 {
            return false;
        }
        let waist = 1.0 - 0.28 * (-((v - 0.2) / 0.25).powi(2)).exp();
        let half = (self.a * waist - margin) * (1.0 - v.powi(6)).sqrt();
        (col - self.cx).abs() <= half
    }
}

struct Pattern {
    family: PatternFamily,
    period: f64,
    half_groove: f64,
    angle: f64,
    phase: (f64, f64),
}

impl Pattern {
    fn new(spec: &SynthSpec) -> Pattern {
        let mut rng = seed::rng(seed::derive_str(spec.seed, "pattern"));
        Pattern {
            family: spec.pattern,
            period: spec.pattern_period,
            half_groove: spec.groove_width / 2.0,
            angle: rng.random_range(-0.5..0.5),
            phase: (rng.random_range(0.0..spec.pattern_period), rng.random_range(0.0..spec.pattern_period)),
        }
    }

    fn is_groove(&self, row: f64, col: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let u = c * col - s * row + self.phase.0;
        let v = s * col + c * row + self.phase.1;
        let p = self.period;
        let line_dist = |t: f64| {
            let m = t.rem_euclid(p);
            m.min(p - m)
        };
        match self.family {
            PatternFamily::Grid => line_dist(u) <= self.half_groove || line_dist(v) <= self.half_groove,
            PatternFamily::Waves => {
                let wave = v + 0.3 * p * (std::f64::consts::TAU * u / (1.7 * p)).sin();
                line_dist(wave) <= self.half_groove
            }
            PatternFamily::Hex => {
                let dy = p * 3f64.sqrt() / 2.0;
                let j0 = (v / dy).floor() as i64;
                let mut d = [f64::INFINITY; 2];
                for j in j0 - 1..=j0 + 2 {
                    let off = if j.rem_euclid(2) == 1 { p / 2.0 } else { 0.0 };
                    let i0 = ((u - off) / p).floor() as i64;
                    for i in i0 - 1..=i0 + 2 {
                        let dist = ((u - (i as f64 * p + off)).powi(2) + (v - j as f64 * dy).powi(2)).sqrt();
                        if dist < d[0] {
                            d = [dist, d[0]];
                        } else if dist < d[1] {
                            d[1] = dist;
                        }
                    }
                }
                d[1] - d[0] <= 2.0 * self.half_groove
            }
        }
    }
}

fn disk_pixels(col: f64, row: f64, radius: f64, w: usize, h: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let r0 = (row - radius).floor().max(0.0) as usize;
    let r1 = ((row + radius).ceil() as usize).min(h - 1);
    let c0 = (col - radius).floor().max(0.0) as usize;
    let c1 = ((col + radius).ceil() as usize).min(w - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if (r as f64 - row).powi(2) + (c as f64 - col).powi(2) <= radius * radius {
                out.push((r, c));
            }
        }
    }
    out
}

fn nick_pixels(col: f64, row: f64, len: f64, angle: f64, w: usize, h: usize) -> Vec<(usize, usize)> {
    let (s, c) = angle.sin_cos();
    let mut out = Vec::new();
    let reach = len / 2.0 + 1.5;
    let r0 = (row - reach).floor().max(0.0) as usize;
    let r1 = ((row + reach).ceil() as usize).min(h - 1);
    let c0 = (col - reach).floor().max(0.0) as usize;
    let c1 = ((col + reach).ceil() as usize).min(w - 1);
    for r in r0..=r1 {
        for cc in c0..=c1 {
            let (dx, dy) = (cc as f64 - col, r as f64 - row);
            let along = dx * c + dy * s;
            let across = -dx * s + dy * c;
            if along.abs() <= len / 2.0 && across.abs() <= 1.0 {
                out.push((r, cc));
            }
        }
    }
    out
}

/// Renders the model's tread (outline, grooves, dimples) without any RACs.
/// Mirrored for the right foot.
pub fn render_tread(spec: &SynthSpec, foot: Foot) -> Result<GrayImage> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let sole = Sole::new(spec);
    let pattern = Pattern::new(spec);
    let mut img = GrayImage::from_fn(w, h, |r, c| {
        let (rf, cf) = (r as f64, c as f64);
        if sole.contains(rf, cf, 0.0) && !pattern.is_groove(rf, cf) {
            RUBBER
        } else {
            BACKGROUND
        }
    })?;
    let mut rng = seed::rng(seed::derive_str(spec.seed, "dimples"));
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.dimple_count && attempts < 10_000 {
        attempts += 1;
        let (col, row) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let px = disk_pixels(col, row, 1.6, w, h);
        if px.iter().all(|&(r, c)| img.get(r, c) == RUBBER && sole.contains(r as f64, c as f64, 3.0)) {
            for (r, c) in px {
                img.set(r, c, BACKGROUND);
            }
            placed += 1;
        }
    }
    if foot == Foot::Right {
        img = img.flip_horizontal();
    }
    Ok(img)
}

/// Generates one shoe: the model's tread plus seeded per-shoe RACs. Each RAC
/// lies entirely on rubber with a gap of at least two pixels to every other
/// white feature, so each mark is its own connected component.
pub fn generate_shoe(spec: &SynthSpec, shoe_id: &str, foot: Foot) -> Result<SynthShoe> {
    let tread = render_tread(spec, foot)?;
    let (w, h) = (spec.width, spec.height);
    let sole = Sole::new(spec);
    let mut rng = seed::rng(seed::derive_str(spec.seed, &format!("{shoe_id}/{}", foot.as_str())));
    let target = rng.random_range(spec.rac_count_min..=spec.rac_count_max);
    let mut master = tread.clone();
    let mut racs: Vec<RacMark> = Vec::new();
    let mut attempts = 0;
    while (racs.len() as u32) < target && attempts < 20_000 {
        attempts += 1;
        let col = rng.random_range(0.0..w as f64);
        let row = rng.random_range(0.0..h as f64);
        let radius = rng.random_range(spec.rac_radius_min..=spec.rac_radius_max);
        let kind = if rng.random_bool(0.7) { RacKind::Dot } else { RacKind::Nick };
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let px = match kind {
            RacKind::Dot => disk_pixels(col, row, radius, w, h),
            RacKind::Nick => nick_pixels(col, row, 2.5 * radius, angle, w, h),
        };
        if px.is_empty() {
            continue;
        }
        // the mark plus a 2-pixel ring must be solid rubber
        let clear = px.iter().all(|&(r, c)| {
            sole.contains(r as f64, c as f64, 3.0)
                && (r.saturating_sub(2)..=(r + 2).min(h - 1))
                    .all(|rr| (c.saturating_sub(2)..=(c + 2).min(w - 1)).all(|cc| master.get(rr, cc) == RUBBER))
        });
        if !clear {
            continue;
        }
        let mut px = px;
        let d = |&(r, c): &(usize, usize)| (r as f64 - row).powi(2) + (c as f64 - col).powi(2);
        px.sort_by(|a, b| d(b).total_cmp(&d(a)).then(a.cmp(b)));
        for &(r, c) in &px {
            master.set(r, c, BACKGROUND);
        }
        racs.push(RacMark { kind, col, row, radius, angle, pixels: px });
    }
    Ok(SynthShoe { shoe_id: shoe_id.to_string(), foot, master, racs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptureOptions {
    pub replicate: u32,
    /// 1 for the first visit; each later visit adds one wear level.
    pub visit: u8,
    pub blur_level: u8,
    pub partial: Option<Region>,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        Self { replicate: 0, visit: 1, blur_level: 0, partial: None }
    }
}

/// Simulates one scan of a shoe. The placement jitter depends only on the
/// visit and replicate, so blurred captures are blurred copies of the pristine
/// scan with the same index.
pub fn capture(spec: &SynthSpec, shoe: &SynthShoe, opts: &CaptureOptions) -> Result<GrayImage> {
    spec.validate()?;
    let base = seed::derive_str(spec.seed, &format!("{}/{}", shoe.shoe_id, shoe.foot.as_str()));
    let (w, h) = (spec.width, spec.height);

    let mut img = shoe.master.clone();
    let wear = f64::from(opts.visit.saturating_sub(1)) * spec.wear_erosion_per_level;
    if wear > 0.0 {
        for rac in &shoe.racs {
            let n = ((wear.min(1.0) * rac.pixels.len() as f64).round() as usize).min(rac.pixels.len());
            for &(r, c) in &rac.pixels[..n] {
                img.set(r, c, RUBBER);
            }
        }
    }

    let mut rng = seed::rng(seed::derive(base, u64::from(opts.visit) << 32 | u64::from(opts.replicate)));
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng, sd: f64| if sd > 0.0 { Normal::new(0.0, sd).unwrap().sample(rng) } else { 0.0 };
    let theta = gauss(&mut rng, spec.rotation_jitter_deg).to_radians();
    let tx = gauss(&mut rng, spec.jitter_sigma);
    let ty = gauss(&mut rng, spec.jitter_sigma);
    let mut buf = warp(&img, theta, tx, ty);

    let sigma = spec.blur_sigma(opts.blur_level);
    if sigma > 0.0 {
        buf = gaussian_blur(&buf, w, h, sigma);
    }
    let mut out = GrayImage::new(w, h, buf.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect())?;

    if let Some(region) = opts.partial {
        mask_partial(&mut out, region, shoe.foot)?;
    }

    let mut salt = seed::rng(seed::derive(base, (u64::from(opts.visit) << 32 | u64::from(opts.replicate)) ^ (u64::from(opts.blur_level) << 48) ^ 0x5a17));
    for _ in 0..spec.salt_count {
        let (r, c) = (salt.random_range(0..h), salt.random_range(0..w));
        out.set(r, c, salt.random_range(0..60));
    }
    Ok(out)
}

/// Rotates about the canvas centre and translates (x right, y up), with
/// bilinear resampling and white fill.
fn warp(img: &GrayImage, theta: f64, tx: f64, ty: f64) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = theta.sin_cos();
    let px = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
            f64::from(BACKGROUND)
        } else {
            f64::from(img.get(r as usize, col as usize))
        }
    };
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for col in 0..w {
            // output position in centred y-up coordinates, undo translation then rotation
            let x = col as f64 - cx - tx;
            let y = cy - r as f64 - ty;
            let sx = c * x + s * y;
            let sy = -s * x + c * y;
            let (fc, fr) = (sx + cx, cy - sy);
            let (c0, r0) = (fc.floor(), fr.floor());
            let (ac, ar) = (fc - c0, fr - r0);
            let (c0, r0) = (c0 as isize, r0 as isize);
            out[r * w + col] = (1.0 - ar) * ((1.0 - ac) * px(r0, c0) + ac * px(r0, c0 + 1))
                + ar * ((1.0 - ac) * px(r0 + 1, c0) + ac * px(r0 + 1, c0 + 1));
        }
    }
    out
}

/// Separable Gaussian blur with a kernel of radius ceil(3σ) and edge replication.
pub fn gaussian_blur(buf: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let rad = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-rad..=rad).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    let mut tmp = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * buf[r * w + (c as isize + i as isize - rad).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[(r as isize + i as isize - rad).clamp(0, h as isize - 1) as usize * w + c])
                .sum();
        }
    }
    out
}

/// Whites out everything outside the region, with the cut computed on the
/// dark pixels of the capture.
fn mask_partial(img: &mut GrayImage, region: Region, foot: Foot) -> Result<()> {
    let h = img.height();
    let dark: Vec<Point> = (0..h)
        .flat_map(|r| (0..img.width()).map(move |c| (r, c)))
        .filter(|&(r, c)| img.get(r, c) < 128)
        .map(|(r, c)| Point::new(c as f64, (h - 1 - r) as f64))
        .collect();
    let cut = PartialCut::for_cloud(&PointCloud::new(dark), region, foot, ToeDirection::Up)?;
    for r in 0..h {
        for c in 0..img.width() {
            if !cut.keeps(&Point::new(c as f64, (h - 1 - r) as f64)) {
                img.set(r, c, BACKGROUND);
            }
        }
    }
    Ok(())
}

/// Layout of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    /// Template for every model; pattern family, period and seed vary per model.
    pub base: SynthSpec,
    pub n_models: usize,
    pub shoes_per_model: usize,
    /// Extra shoes that are alone in their (model, size) class.
    pub singleton_shoes: usize,
    pub feet: Vec<Foot>,
    pub replicates: u32,
    pub visits: u8,
    pub blur_levels: Vec<u8>,
    /// Replicates captured at each nonzero blur level.
    pub blur_replicates: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            base: SynthSpec::default(),
            n_models: 3,
            shoes_per_model: 10,
            singleton_shoes: 0,
            feet: vec![Foot::Left],
            replicates: 2,
            visits: 1,
            blur_levels: vec![2, 6, 10],
            blur_replicates: 1,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn model_spec(&self, model: usize) -> SynthSpec {
        let mut s = self.base.clone();
        s.seed = seed::derive(self.seed, model as u64);
        s.pattern = PatternFamily::ALL[model % 3];
        s.pattern_period = self.base.pattern_period * (1.0 + 0.15 * ((model / 3) % 4) as f64);
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.feet.is_empty() || self.replicates == 0 || self.visits == 0 || self.visits > 3 {
            return Err(Error::InvalidArgument("need at least one foot, one replicate and 1..=3 visits".into()));
        }
        if let Some(b) = self.blur_levels.iter().find(|b| !evalkit::BLUR_LEVELS.contains(b)) {
            return Err(Error::InvalidArgument(format!("unsupported blur level {b}")));
        }
        Ok(())
    }
}

struct ShoePlan {
    shoe_id: String,
    model: String,
    size: String,
    spec: SynthSpec,
}

fn plan(spec: &CorpusSpec) -> Vec<ShoePlan> {
    let mut out = Vec::new();
    for m in 0..spec.n_models {
        for s in 0..spec.shoes_per_model {
            out.push(ShoePlan {
                shoe_id: format!("m{m:02}s{s:03}"),
                model: format!("M{m:02}"),
                size: "9".into(),
                spec: spec.model_spec(m),
            });
        }
    }
    for s in 0..spec.singleton_shoes {
        let m = spec.n_models + s;
        out.push(ShoePlan { shoe_id: format!("u{s:03}"), model: format!("U{s:03}"), size: "10".into(), spec: spec.model_spec(m) });
    }
    out
}

/// Writes every capture as a PNG under `out_dir/images` and the registry to
/// `out_dir/registry.csv`. Returns the registry rows.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<Vec<ShoeRecord>> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join("images"))?;
    let shoes = plan(spec);
    let per_shoe: Vec<Result<Vec<ShoeRecord>>> = shoes
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut recs = Vec::new();
            for &foot in &spec.feet {
                let shoe = generate_shoe(&p.spec, &p.shoe_id, foot)?;
                let mut shots: Vec<(u8, u8, u32)> = Vec::new();
                for visit in 1..=spec.visits {
                    shots.extend((0..spec.replicates).map(|r| (visit, 0, r)));
                }
                for &b in spec.blur_levels.iter().filter(|&&b| b > 0) {
                    shots.extend((0..spec.blur_replicates).map(|r| (1, b, r)));
                }
                for (visit, blur, rep) in shots {
                    let img = capture(&p.spec, &shoe, &CaptureOptions { replicate: rep, visit, blur_level: blur, partial: None })?;
                    let rel = format!("images/{}_{}_v{visit}_b{blur:02}_r{rep}.png", p.shoe_id, foot.as_str());
                    img.save_png(out_dir.join(&rel))?;
                    recs.push(ShoeRecord {
                        shoe_id: p.shoe_id.clone(),
                        person_id: format!("p{i:03}"),
                        model: p.model.clone(),
                        size: p.size.clone(),
                        foot,
                        visit,
                        blur_level: blur,
                        replicate: rep,
                        image_path: rel,
                    });
                }
            }
            Ok(recs)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_shoe {
        records.extend(r?);
    }
    evalkit::write_registry(out_dir.join("registry.csv"), &records)?;
    Ok(records)
}
