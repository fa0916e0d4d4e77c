//! Deterministic synthetic datasets: random ellipses and rectangles painted
//! in class colors over a noisy background.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_png, LabelMap, ManifestEntry, MaskEncoding, SampleManifest, Split};
use crate::error::{Error, Result};

/// Mean RGB of each class; background is pale, carcinoma dark purple.
const ORCA3_COLORS: [[u8; 3]; 3] = [[238, 236, 240], [222, 150, 188], [112, 52, 140]];
const BINARY_COLORS: [[u8; 3]; 2] = [[226, 178, 208], [112, 52, 140]];
const NOISE: i32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// 3 for the three-class encoding, 1 or 2 for binary.
    pub classes: usize,
    pub seed: u64,
    /// Trailing fraction of samples assigned to the test split.
    pub test_fraction: f64,
}

impl SynthSpec {
    pub fn new(count: usize, size: usize, classes: usize, seed: u64) -> Self {
        Self {
            count,
            height: size,
            width: size,
            classes,
            seed,
            test_fraction: 0.0,
        }
    }
}

enum Shape {
    Ellipse { ci: f64, cj: f64, ri: f64, rj: f64 },
    Rect { i0: f64, j0: f64, i1: f64, j1: f64 },
}

impl Shape {
    fn random(rng: &mut impl Rng, h: usize, w: usize, min: f64, max: f64) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let ci = rng.random_range(0.0..hf);
        let cj = rng.random_range(0.0..wf);
        let ri = rng.random_range(min..max) * hf;
        let rj = rng.random_range(min..max) * wf;
        if rng.random_bool(0.5) {
            Shape::Ellipse { ci, cj, ri, rj }
        } else {
            Shape::Rect {
                i0: ci - ri,
                j0: cj - rj,
                i1: ci + ri,
                j1: cj + rj,
            }
        }
    }

    fn contains(&self, i: usize, j: usize) -> bool {
        let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
        match *self {
            Shape::Ellipse { ci, cj, ri, rj } => {
                let (dy, dx) = ((y - ci) / ri, (x - cj) / rj);
                dy * dy + dx * dx <= 1.0
            }
            Shape::Rect { i0, j0, i1, j1 } => y >= i0 && y < i1 && x >= j0 && x < j1,
        }
    }
}

fn paint(labels: &mut [u8], h: usize, w: usize, shape: &Shape, class: u8) {
    for i in 0..h {
        for j in 0..w {
            if shape.contains(i, j) {
                labels[i * w + j] = class;
            }
        }
    }
}

fn generate(rng: &mut ChaCha8Rng, spec: &SynthSpec, encoding: MaskEncoding) -> (RgbImage, LabelMap) {
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![0u8; h * w];
    let fg = (encoding.num_classes() - 1) as u8;
    if encoding == MaskEncoding::Orca3 {
        for _ in 0..rng.random_range(1..=3) {
            let s = Shape::random(rng, h, w, 0.2, 0.4);
            paint(&mut labels, h, w, &s, 1);
        }
    }
    for _ in 0..rng.random_range(1..=3) {
        let s = Shape::random(rng, h, w, 0.08, 0.2);
        paint(&mut labels, h, w, &s, fg);
    }
    let colors: &[[u8; 3]] = match encoding {
        MaskEncoding::Orca3 => &ORCA3_COLORS,
        MaskEncoding::Binary => &BINARY_COLORS,
    };
    let mut raw = Vec::with_capacity(h * w * 3);
    for &l in &labels {
        for &base in &colors[l as usize] {
            let v = base as i32 + rng.random_range(-NOISE..=NOISE);
            raw.push(v.clamp(0, 255) as u8);
        }
    }
    (
        RgbImage::from_raw(w as u32, h as u32, raw).expect("dims match"),
        LabelMap {
            height: h,
            width: w,
            data: labels,
        },
    )
}

/// Writes `images/`, `masks/` and `manifest.toml` under `dir` and returns the
/// manifest path.
pub fn synth_dataset(dir: &Path, spec: &SynthSpec) -> Result<(SampleManifest, PathBuf)> {
    if spec.count == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one sample"));
    }
    if !spec.height.is_multiple_of(16) || !spec.width.is_multiple_of(16) || spec.height == 0 || spec.width == 0 {
        return Err(Error::invalid(format!(
            "synthetic image size {}×{} must be a positive multiple of 16",
            spec.height, spec.width
        )));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::invalid("test_fraction must lie in [0, 1)"));
    }
    let encoding = MaskEncoding::for_classes(spec.classes)?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let n_test = (spec.count as f64 * spec.test_fraction).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = SampleManifest::new(encoding, [spec.height, spec.width], dir);
    for idx in 0..spec.count {
        let (img, labels) = generate(&mut rng, spec, encoding);
        let image_path = PathBuf::from(format!("images/{idx:04}.png"));
        let mask_path = PathBuf::from(format!("masks/{idx:04}.png"));
        save_png(&img, &dir.join(&image_path))?;
        save_png(&labels.to_mask(encoding), &dir.join(&mask_path))?;
        manifest.entries.push(ManifestEntry {
            image_path,
            mask_path,
            split: if idx >= spec.count - n_test {
                Split::Test
            } else {
                Split::Train
            },
        });
    }
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok((manifest, path))
}
