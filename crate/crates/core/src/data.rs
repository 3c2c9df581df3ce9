//! Synthetic morphology-controlled samples, the on-disk dataset layout and
//! flip/rotation augmentation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masl::morph_features;
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 32;
const NOISE_STD: f64 = 0.03;
/// Square brush radius used to draw tubes; gives a 3 px wide stroke.
const TUBE_HALF_WIDTH: isize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Blob,
    Tube,
    Irregular,
    Multi,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Blob, ShapeKind::Tube, ShapeKind::Irregular, ShapeKind::Multi];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Blob => "blob",
            ShapeKind::Tube => "tube",
            ShapeKind::Irregular => "irregular",
            ShapeKind::Multi => "multi",
        }
    }

    /// Range the corpus generator draws `size_fraction` from.
    pub fn size_range(self) -> (f64, f64) {
        match self {
            ShapeKind::Blob => (0.08, 0.3),
            ShapeKind::Tube => (0.03, 0.07),
            ShapeKind::Irregular => (0.08, 0.3),
            ShapeKind::Multi => (0.06, 0.2),
        }
    }

    pub fn default_wiggle(self) -> f64 {
        match self {
            ShapeKind::Blob => 0.06,
            ShapeKind::Tube => 0.08,
            ShapeKind::Irregular => 0.4,
            ShapeKind::Multi => 0.06,
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape kind `{s}` (blob, tube, irregular, multi)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Target foreground fraction, in (0, 1).
    pub size_fraction: f64,
    /// Boundary perturbation amplitude. For tubes it is the turning rate.
    pub wiggle: f64,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, size_fraction: f64, seed: u64) -> Self {
        ShapeSpec {
            kind,
            size_fraction,
            wiggle: kind.default_wiggle(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(3, H, W)` in [0, 1].
    pub image: Tensor,
    /// `(H, W)` with values in {0, 1}.
    pub mask: Tensor,
    pub id: String,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.mask.shape();
        (s[0], s[1])
    }
}

fn infeasible(spec: &ShapeSpec, why: &str) -> Error {
    Error::Data(format!(
        "size_fraction {} infeasible for {}: {why}",
        spec.size_fraction, spec.kind
    ))
}

/// Radial profile `1 + sum_k a_k cos(k t + phi_k)` sampled at `n` angles,
/// with the perturbation rescaled so its peak magnitude is `amp`.
fn radial_profile(rng: &mut ChaCha8Rng, harmonics: std::ops::RangeInclusive<usize>, amp: f64, n: usize) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64)> = harmonics
        .map(|k| {
            let a = rng.gen_range(0.3..1.0) / (k as f64).sqrt();
            (k as f64, a, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let pert: Vec<f64> = (0..n)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / n as f64;
            terms.iter().map(|(k, a, ph)| a * (k * t + ph).cos()).sum()
        })
        .collect();
    let peak = pert.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    pert.iter().map(|p| 1.0 + amp * p / peak).collect()
}

/// Star-shaped region around `(cy, cx)` whose radius at angle `t` is
/// `r0 * profile(t)`, painted into `mask`.
fn paint_radial(mask: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, r0: f64, profile: &[f64]) {
    let n = profile.len();
    let rmax = r0 * profile.iter().cloned().fold(0.0, f64::max);
    let lo_i = (cy - rmax - 1.0).floor().max(0.0) as usize;
    let hi_i = ((cy + rmax + 1.0).ceil() as usize).min(h - 1);
    let lo_j = (cx - rmax - 1.0).floor().max(0.0) as usize;
    let hi_j = ((cx + rmax + 1.0).ceil() as usize).min(w - 1);
    for i in lo_i..=hi_i {
        for j in lo_j..=hi_j {
            let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
            let t = dy.atan2(dx).rem_euclid(2.0 * PI);
            let pos = t / (2.0 * PI) * n as f64;
            let a = pos.floor() as usize % n;
            let b = (a + 1) % n;
            let f = pos - pos.floor();
            let r = r0 * (profile[a] * (1.0 - f) + profile[b] * f);
            if dy * dy + dx * dx <= r * r {
                mask[i * w + j] = 1.0;
            }
        }
    }
}

/// Radius scale giving area `target` for a profile: `A = r0^2 / 2 * int f^2`.
fn radius_for_area(profile: &[f64], target: f64) -> f64 {
    let mean_sq = profile.iter().map(|f| f * f).sum::<f64>() / profile.len() as f64;
    (target / (PI * mean_sq)).sqrt()
}

fn star_shape(spec: &ShapeSpec, h: usize, w: usize, rng: &mut ChaCha8Rng, harmonics: std::ops::RangeInclusive<usize>) -> Result<Vec<f64>> {
    let profile = radial_profile(rng, harmonics, spec.wiggle.clamp(0.0, 0.8), 720);
    let target = spec.size_fraction * (h * w) as f64;
    let r0 = radius_for_area(&profile, target);
    let rmax = r0 * profile.iter().cloned().fold(0.0, f64::max);
    let room = h.min(w) as f64 / 2.0 - 2.0;
    if rmax > room {
        return Err(infeasible(spec, &format!("radius {rmax:.1} exceeds {room:.1}")));
    }
    let cy = rng.gen_range(rmax + 1.0..=h as f64 - rmax - 1.0);
    let cx = rng.gen_range(rmax + 1.0..=w as f64 - rmax - 1.0);
    let mut mask = vec![0.0; h * w];
    paint_radial(&mut mask, h, w, cy, cx, r0, &profile);
    Ok(mask)
}

fn multi_shape(spec: &ShapeSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = rng.gen_range(2..=4usize);
    let target = spec.size_fraction * (h * w) as f64 / n as f64;
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut mask = vec![0.0; h * w];
    for _ in 0..n {
        let profile = radial_profile(rng, 2..=3, spec.wiggle.clamp(0.0, 0.8), 360);
        let r0 = radius_for_area(&profile, target);
        let rmax = r0 * profile.iter().cloned().fold(0.0, f64::max);
        if 2.0 * rmax + 2.0 >= h.min(w) as f64 {
            return Err(infeasible(spec, "objects do not fit"));
        }
        let mut spot = None;
        for _ in 0..500 {
            let cy = rng.gen_range(rmax + 1.0..=h as f64 - rmax - 1.0);
            let cx = rng.gen_range(rmax + 1.0..=w as f64 - rmax - 1.0);
            if placed
                .iter()
                .all(|&(y, x, r)| ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() > r + rmax + 2.0)
            {
                spot = Some((cy, cx));
                break;
            }
        }
        let (cy, cx) = spot.ok_or_else(|| infeasible(spec, "could not place separated objects"))?;
        paint_radial(&mut mask, h, w, cy, cx, r0, &profile);
        placed.push((cy, cx, rmax));
    }
    Ok(mask)
}

/// A smooth random walk with slowly varying heading, drawn with a 3 px
/// square brush until the painted area reaches the target.
fn tube_shape(spec: &ShapeSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if spec.size_fraction > 0.15 {
        return Err(infeasible(spec, "a 3 px tube cannot cover more than 0.15 without piling up"));
    }
    let target = (spec.size_fraction * (h * w) as f64).round().max(1.0);
    let margin = 3.0;
    let (hf, wf) = (h as f64, w as f64);
    let mut y = rng.gen_range(margin..hf - margin);
    let mut x = rng.gen_range(margin..wf - margin);
    let mut heading = rng.gen_range(0.0..2.0 * PI);
    let mut turn = 0.0;
    let turn_noise = Normal::new(0.0, spec.wiggle.max(1e-3)).expect("positive std");
    let mut mask = vec![0.0; h * w];
    let mut area = 0.0;
    for _ in 0..200_000 {
        let (ci, cj) = (y.floor() as isize, x.floor() as isize);
        for di in -TUBE_HALF_WIDTH..=TUBE_HALF_WIDTH {
            for dj in -TUBE_HALF_WIDTH..=TUBE_HALF_WIDTH {
                let (i, j) = (ci + di, cj + dj);
                if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
                    let px = &mut mask[i as usize * w + j as usize];
                    if *px == 0.0 {
                        *px = 1.0;
                        area += 1.0;
                    }
                }
            }
        }
        if area >= target {
            return Ok(mask);
        }
        turn = 0.9 * turn + turn_noise.sample(rng);
        heading += 0.1 * turn;
        y += 0.7 * heading.sin();
        x += 0.7 * heading.cos();
        if y < margin || y > hf - margin {
            heading = -heading;
            y = y.clamp(margin, hf - margin);
        }
        if x < margin || x > wf - margin {
            heading = PI - heading;
            x = x.clamp(margin, wf - margin);
        }
    }
    Err(infeasible(spec, "walk never reached the target area"))
}

/// Two passes of a 3x3 box filter with replicate borders.
fn smooth(mask: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut cur = mask.to_vec();
    for _ in 0..2 {
        let mut next = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        let ii = (i as isize + di).clamp(0, h as isize - 1) as usize;
                        let jj = (j as isize + dj).clamp(0, w as isize - 1) as usize;
                        s += cur[ii * w + jj];
                    }
                }
                next[i * w + j] = s / 9.0;
            }
        }
        cur = next;
    }
    cur
}

/// Smoothed mask over a low-frequency background, plus Gaussian noise.
fn render_image(mask: &[f64], h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let soft = smooth(mask, h, w);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let base = rng.gen_range(0.3..0.5);
        let fy = rng.gen_range(0.5..2.0) / h as f64;
        let fx = rng.gen_range(0.5..2.0) / w as f64;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let sign = if c == 0 || rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let contrast = sign * rng.gen_range(0.2..0.35);
        for i in 0..h {
            for j in 0..w {
                let bg = base + 0.1 * (2.0 * PI * (fy * i as f64 + fx * j as f64) + phase).sin();
                let v = bg + contrast * soft[i * w + j] + noise.sample(rng);
                data[c * h * w + i * w + j] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([3, h, w], data).expect("sized above")
}

/// Deterministic sample for `spec` at `(H, W)`.
pub fn gen_shape(spec: &ShapeSpec, hw: (usize, usize)) -> Result<Sample> {
    let (h, w) = hw;
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Data(format!("generated samples need H, W >= {MIN_SIDE}, got {h}x{w}")));
    }
    if !(spec.size_fraction > 0.0 && spec.size_fraction < 1.0) {
        return Err(infeasible(spec, "must lie in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mask = match spec.kind {
        ShapeKind::Blob => star_shape(spec, h, w, &mut rng, 2..=3)?,
        ShapeKind::Irregular => star_shape(spec, h, w, &mut rng, 2..=16)?,
        ShapeKind::Multi => multi_shape(spec, h, w, &mut rng)?,
        ShapeKind::Tube => tube_shape(spec, h, w, &mut rng)?,
    };
    let image = render_image(&mask, h, w, &mut rng);
    Ok(Sample {
        image,
        mask: Tensor::new([h, w], mask)?,
        id: format!("{}_{:06}", spec.kind, spec.seed),
    })
}

/// `count` specs cycling through `kinds`, sizes drawn from each kind's range.
pub fn corpus_specs(kinds: &[ShapeKind], count: usize, seed: u64) -> Vec<ShapeSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            let (lo, hi) = kind.size_range();
            let s = rng.gen_range(lo..hi);
            ShapeSpec::new(kind, s, rng.gen())
        })
        .collect()
}

pub fn gen_corpus(kinds: &[ShapeKind], count: usize, hw: (usize, usize), seed: u64) -> Result<Vec<(ShapeSpec, Sample)>> {
    if kinds.is_empty() {
        return Err(Error::Config("no shape kinds given".into()));
    }
    corpus_specs(kinds, count, seed)
        .into_iter()
        .map(|spec| gen_shape(&spec, hw).map(|s| (spec, s)))
        .collect()
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `images/`, `masks/` and `manifest.csv` under `root`.
pub fn write_dataset(root: &Path, samples: &[(ShapeSpec, Sample)]) -> Result<()> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let manifest = root.join("manifest.csv");
    let mut csv = csv::Writer::from_path(&manifest)?;
    csv.write_record(["stem", "kind", "seed", "s", "tau", "c", "iota"])?;
    for (spec, s) in samples {
        let (h, w) = s.size();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| to_u8(s.image.data()[c * h * w + y as usize * w + x as usize]);
            Rgb([at(0), at(1), at(2)])
        });
        let p = img_dir.join(format!("{}.png", s.id));
        img.save(&p).map_err(|e| image_err(&p, e))?;
        let p = mask_dir.join(format!("{}.png", s.id));
        mask_image(&s.mask)?.save(&p).map_err(|e| image_err(&p, e))?;
        let f = morph_features(&s.mask)?;
        csv.write_record([
            s.id.clone(),
            spec.kind.to_string(),
            spec.seed.to_string(),
            format!("{:.6}", f.scale),
            format!("{:.6}", f.tubularity),
            format!("{:.6}", f.compactness),
            format!("{:.6}", f.irregularity),
        ])?;
    }
    csv.flush().map_err(|e| Error::io(&manifest, e))
}

fn mask_image(mask: &Tensor) -> Result<GrayImage> {
    let (_, h, w) = mask.planes()?;
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(mask.data()[y as usize * w + x as usize])])
    }))
}

/// Grayscale PGM of a `(.., H, W)` single plane with values in [0, 1].
pub fn save_pgm(path: &Path, plane: &Tensor) -> Result<()> {
    let (planes, _, _) = plane.planes()?;
    if planes != 1 {
        return Err(Error::invalid("save_pgm", format!("expected one plane, got {:?}", plane.shape())));
    }
    mask_image(plane)?
        .save_with_format(path, image::ImageFormat::Pnm)
        .map_err(|e| image_err(path, e))
}

const EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// Stem to path for every supported image file in `dir`.
fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Supported image files directly inside `dir`, sorted by file name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = list_images(dir)?.into_values().collect();
    files.sort();
    Ok(files)
}

/// Luminance of an image file as an `(H, W)` tensor in [0, 1], at its
/// native size.
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let g = open_image(path)?.to_luma8();
    let (w, h) = g.dimensions();
    let data = g.pixels().map(|p| p[0] as f64 / 255.0).collect();
    Tensor::new([h as usize, w as usize], data)
}

/// A mask file thresholded at 0.5, `(H, W)` at native size.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    Ok(load_gray(path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| image_err(path, e))
}

/// Reads one image/mask pair, resizing to `(H, W)`: bilinear for the image,
/// nearest then a 0.5 threshold for the mask.
pub fn load_pair(image_path: &Path, mask_path: &Path, hw: (usize, usize), id: &str) -> Result<Sample> {
    let (h, w) = hw;
    let mut rgb = open_image(image_path)?.to_rgb8();
    if rgb.dimensions() != (w as u32, h as u32) {
        rgb = imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
    }
    let mut gray = open_image(mask_path)?.to_luma8();
    if gray.dimensions() != (w as u32, h as u32) {
        gray = imageops::resize(&gray, w as u32, h as u32, FilterType::Nearest);
    }
    let mut image = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            image[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    let mask = gray.pixels().map(|p| if p[0] as f64 / 255.0 >= 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(Sample {
        image: Tensor::new([3, h, w], image)?,
        mask: Tensor::new([h, w], mask)?,
        id: id.to_string(),
    })
}

/// All pairs under `<dir>/images` and `<dir>/masks`, sorted by stem.
pub fn load_dataset(dir: &Path, hw: (usize, usize)) -> Result<Vec<Sample>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let images = list_images(&dir.join("images"))?;
    let masks = list_images(&dir.join("masks"))?;
    let unpaired: Vec<&str> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .chain(masks.keys().filter(|k| !images.contains_key(*k)))
        .map(|s| s.as_str())
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Data(format!(
            "images and masks do not pair up; unmatched stems: {}",
            unpaired.join(", ")
        )));
    }
    images
        .iter()
        .map(|(stem, ip)| load_pair(ip, &masks[stem], hw, stem))
        .collect()
}

/// One random draw of the desk-scale augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Number of counter-clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
}

impl AugmentDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentDraw {
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4),
        }
    }
}

/// Applies a draw to every `(H, W)` plane of `t`.
fn transform_planes(t: &Tensor, d: AugmentDraw) -> Tensor {
    let s = t.shape();
    let nd = s.len();
    let (h, w) = (s[nd - 2], s[nd - 1]);
    let planes = t.len() / (h * w);
    let turns = d.quarter_turns % 4;
    let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = vec![0.0; t.len()];
    for p in 0..planes {
        let src = &t.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                // Map the output pixel back through the rotation, then the flips.
                let (mut si, mut sj) = match turns {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                if d.flip_h {
                    sj = w - 1 - sj;
                }
                if d.flip_v {
                    si = h - 1 - si;
                }
                dst[i * ow + j] = src[si * w + sj];
            }
        }
    }
    let mut shape = s.to_vec();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Tensor::new(shape, out).expect("same element count")
}

pub fn apply_augment(s: &Sample, d: AugmentDraw) -> Sample {
    Sample {
        image: transform_planes(&s.image, d),
        mask: transform_planes(&s.mask, d),
        id: s.id.clone(),
    }
}

/// Flip-H and flip-V with probability 0.5 each, then a uniform quarter turn.
pub fn augment<R: Rng + ?Sized>(s: &Sample, rng: &mut R) -> Sample {
    apply_augment(s, AugmentDraw::sample(rng))
}

/// Deterministic 80/20 split on a hash of each id: ids whose digest is
/// 0 mod 5 go to validation.
pub fn hash_split(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    samples.into_iter().partition(|s| {
        let d = Sha256::digest(s.id.as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % 5 != 0
    })
}

/// Stacks samples into `(N, 3, H, W)` images and `(N, 1, H, W)` masks.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = first.size();
    let mut x = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut y = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.size() != (h, w) || s.image.shape() != [3, h, w] {
            return Err(Error::Data(format!(
                "sample `{}` is {:?}, batch expects 3x{h}x{w}",
                s.id,
                s.image.shape()
            )));
        }
        x.extend_from_slice(s.image.data());
        y.extend_from_slice(s.mask.data());
    }
    let n = samples.len();
    Ok((Tensor::new([n, 3, h, w], x)?, Tensor::new([n, 1, h, w], y)?))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn feats(s: &Sample) -> crate::masl::MorphFeatures {
        morph_features(&s.mask).unwrap()
    }

    #[test]
    fn blob_hits_requested_size() {
        for seed in 0..10 {
            let s = gen_shape(&ShapeSpec::new(ShapeKind::Blob, 0.2, seed), (64, 64)).unwrap();
            let f = feats(&s);
            assert!((0.15..=0.25).contains(&f.scale), "seed {seed}: {}", f.scale);
        }
    }

    #[test]
    fn tube_is_less_compact_than_blob_of_same_area() {
        let tube = gen_shape(&ShapeSpec::new(ShapeKind::Tube, 0.06, 3), (64, 64)).unwrap();
        let ft = feats(&tube);
        let blob = gen_shape(&ShapeSpec::new(ShapeKind::Blob, ft.scale, 3), (64, 64)).unwrap();
        let fb = feats(&blob);
        assert!((fb.scale - ft.scale).abs() < 0.02);
        assert!(ft.compactness < fb.compactness, "{ft:?} vs {fb:?}");
        assert!(ft.tubularity > 0.0);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        for kind in ShapeKind::ALL {
            let spec = ShapeSpec::new(kind, kind.size_range().0, 11);
            let a = gen_shape(&spec, (48, 64)).unwrap();
            assert_eq!(a, gen_shape(&spec, (48, 64)).unwrap());
            assert_eq!(a.image.shape(), &[3, 48, 64]);
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(a.mask.sum() > 0.0);
        }
    }

    #[test]
    fn infeasible_specs_error() {
        for (kind, s) in [(ShapeKind::Blob, 0.95), (ShapeKind::Tube, 0.5), (ShapeKind::Blob, 0.0), (ShapeKind::Irregular, 1.0)] {
            let r = gen_shape(&ShapeSpec::new(kind, s, 0), (64, 64));
            assert!(matches!(r, Err(Error::Data(_))), "{kind} {s}");
        }
        assert!(gen_shape(&ShapeSpec::new(ShapeKind::Blob, 0.2, 0), (16, 64)).is_err());
        assert!("ring".parse::<ShapeKind>().is_err());
        assert_eq!("tube".parse::<ShapeKind>().unwrap(), ShapeKind::Tube);
    }

    #[test]
    fn augment_examples() {
        let s = gen_shape(&ShapeSpec::new(ShapeKind::Irregular, 0.15, 5), (64, 64)).unwrap();
        assert_eq!(apply_augment(&s, AugmentDraw::default()), s);
        let flip = AugmentDraw {
            flip_h: true,
            ..Default::default()
        };
        assert_eq!(apply_augment(&apply_augment(&s, flip), flip), s);
        let quarter = AugmentDraw {
            quarter_turns: 1,
            ..Default::default()
        };
        let mut r = s.clone();
        for _ in 0..4 {
            r = apply_augment(&r, quarter);
        }
        assert_eq!(r, s);
        // 2x2 plane [[1, 2], [3, 4]] turned a quarter counter-clockwise.
        let t = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(transform_planes(&t, quarter).data(), &[2.0, 4.0, 1.0, 3.0]);
        let f0 = feats(&s);
        let f1 = feats(&apply_augment(&s, quarter));
        assert!((f0.compactness - f1.compactness).abs() < 0.02);
        assert!((f0.tubularity - f1.tubularity).abs() < 0.02);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn augmentation_preserves_area_and_binarity(seed in 0u64..1000, fh: bool, fv: bool, q in 0u8..4) {
            let s = gen_shape(&ShapeSpec::new(ShapeKind::Multi, 0.1, seed), (32, 32)).unwrap();
            let d = AugmentDraw { flip_h: fh, flip_v: fv, quarter_turns: q };
            let a = apply_augment(&s, d);
            prop_assert_eq!(a.mask.sum(), s.mask.sum());
            prop_assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert!((a.image.sum() - s.image.sum()).abs() < 1e-9);
        }
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = gen_corpus(&[ShapeKind::Blob, ShapeKind::Tube, ShapeKind::Irregular], 3, (64, 64), 7).unwrap();
        write_dataset(dir.path(), &corpus).unwrap();
        let loaded = load_dataset(dir.path(), (64, 64)).unwrap();
        let mut ids: Vec<_> = corpus.iter().map(|(_, s)| s.id.clone()).collect();
        ids.sort();
        assert_eq!(loaded.iter().map(|s| s.id.clone()).collect::<Vec<_>>(), ids);
        for s in &loaded {
            let orig = &corpus.iter().find(|(_, o)| o.id == s.id).unwrap().1;
            assert_eq!(s.mask, orig.mask);
            assert!(s.image.max_abs_diff(&orig.image) <= 0.5 / 255.0 + 1e-12);
        }
        let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest.lines().count(), 4);
        assert!(manifest.starts_with("stem,kind,seed,s,tau,c,iota"));

        let small = load_dataset(dir.path(), (32, 32)).unwrap();
        assert!(small.iter().all(|s| s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0)));
    }

    #[test]
    fn loader_errors_and_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), (32, 32)).unwrap().is_empty());
        let corpus = gen_corpus(&[ShapeKind::Blob], 2, (32, 32), 1).unwrap();
        write_dataset(dir.path(), &corpus).unwrap();
        let victim = &corpus[0].1.id;
        fs::remove_file(dir.path().join("masks").join(format!("{victim}.png"))).unwrap();
        let err = load_dataset(dir.path(), (32, 32)).unwrap_err().to_string();
        assert!(err.contains(victim.as_str()), "{err}");

        fs::write(dir.path().join("masks").join(format!("{victim}.png")), b"not a png").unwrap();
        match load_dataset(dir.path(), (32, 32)) {
            Err(Error::Image { path, .. }) => assert!(path.ends_with(format!("{victim}.png"))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn large_mask_downsamples_to_binary() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = gen_corpus(&[ShapeKind::Irregular], 1, (256, 256), 2).unwrap();
        write_dataset(dir.path(), &corpus).unwrap();
        let s = &load_dataset(dir.path(), (64, 64)).unwrap()[0];
        assert_eq!(s.mask.shape(), &[64, 64]);
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let frac = s.mask.sum() / 4096.0;
        let orig = corpus[0].1.mask.sum() / 65536.0;
        assert!((frac - orig).abs() < 0.02, "{frac} vs {orig}");
    }

    #[test]
    fn hash_split_is_stable_and_roughly_fifth() {
        let corpus: Vec<Sample> = gen_corpus(&[ShapeKind::Blob], 100, (32, 32), 3).unwrap().into_iter().map(|(_, s)| s).collect();
        let (tr, va) = hash_split(corpus.clone());
        let (tr2, va2) = hash_split(corpus);
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        assert!((10..=30).contains(&va.len()), "{}", va.len());
        assert_eq!(tr.len() + va.len(), 100);
    }

    #[test]
    fn stack_batch_shapes() {
        let corpus = gen_corpus(&[ShapeKind::Blob], 2, (32, 32), 3).unwrap();
        let refs: Vec<&Sample> = corpus.iter().map(|(_, s)| s).collect();
        let (x, y) = stack_batch(&refs).unwrap();
        assert_eq!(x.shape(), &[2, 3, 32, 32]);
        assert_eq!(y.shape(), &[2, 1, 32, 32]);
        assert_eq!(&y.data()[1024..], corpus[1].1.mask.data());
        assert!(stack_batch(&[]).is_err());
    }
}
