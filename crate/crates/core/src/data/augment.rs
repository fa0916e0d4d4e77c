use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The augmentations applied to one sample, in the order listed.
///
/// Flips act on image and labels alike; blur and sharpen touch only the image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub hflip: bool,
    pub vflip: bool,
    /// Gaussian blur with this sigma.
    pub blur: Option<f64>,
    /// Unsharp masking `x + amount·(x − blur(x))`.
    pub sharpen: Option<f64>,
}

impl AugmentationSpec {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

/// Per-epoch sampling of augmentations: each op is applied independently
/// with its probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub hflip: f64,
    pub vflip: f64,
    pub blur: f64,
    pub sharpen: f64,
    pub blur_sigma: f64,
    pub sharpen_amount: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            blur: 0.25,
            sharpen: 0.25,
            blur_sigma: 1.0,
            sharpen_amount: 1.0,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            hflip: 0.0,
            vflip: 0.0,
            blur: 0.0,
            sharpen: 0.0,
            ..Self::default()
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> AugmentationSpec {
        let mut hit = |p: f64| p > 0.0 && rng.random::<f64>() < p;
        AugmentationSpec {
            hflip: hit(self.hflip),
            vflip: hit(self.vflip),
            blur: hit(self.blur).then_some(self.blur_sigma),
            sharpen: hit(self.sharpen).then_some(self.sharpen_amount),
        }
    }
}

/// Normalized 1-D Gaussian taps, radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable Gaussian blur of an `[H, W, C]` image; borders replicate the
/// edge pixel.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let k = gaussian_kernel(sigma)?;
    let (h, w, c) = match image.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::shape("gaussian_blur", s, &[0, 0, 3])),
    };
    let r = (k.len() / 2) as isize;
    let src = image.data();
    let mut tmp = vec![0f32; src.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0f64;
                for (t, &kv) in k.iter().enumerate() {
                    let jj = (j as isize + t as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[(i * w + jj) * c + ch] as f64;
                }
                tmp[(i * w + j) * c + ch] = acc as f32;
            }
        }
    }
    let mut out = vec![0f32; src.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0f64;
                for (t, &kv) in k.iter().enumerate() {
                    let ii = (i as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(ii * w + j) * c + ch] as f64;
                }
                out[(i * w + j) * c + ch] = acc as f32;
            }
        }
    }
    Tensor::new(image.shape(), out)
}

fn flip(sample: &Sample, horizontal: bool) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let src = sample.image.data();
    let mut img = Vec::with_capacity(src.len());
    let mut lab = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = if horizontal { (i, w - 1 - j) } else { (h - 1 - i, j) };
            let p = (si * w + sj) * 3;
            img.extend_from_slice(&src[p..p + 3]);
            lab.push(sample.labels.data[si * w + sj]);
        }
    }
    Sample {
        image: Tensor::new(&[h, w, 3], img).expect("dims match"),
        labels: LabelMap {
            height: h,
            width: w,
            data: lab,
        },
    }
}

pub fn augment(sample: &Sample, spec: &AugmentationSpec) -> Result<Sample> {
    let mut out = sample.clone();
    if spec.hflip {
        out = flip(&out, true);
    }
    if spec.vflip {
        out = flip(&out, false);
    }
    if let Some(sigma) = spec.blur {
        out.image = gaussian_blur(&out.image, sigma)?;
    }
    if let Some(amount) = spec.sharpen {
        if !(amount >= 0.0 && amount.is_finite()) {
            return Err(Error::invalid(format!("sharpen amount must be nonnegative, got {amount}")));
        }
        let blurred = gaussian_blur(&out.image, 1.0)?;
        let a = amount as f32;
        let data = out
            .image
            .data()
            .iter()
            .zip(blurred.data())
            .map(|(&x, &b)| (x + a * (x - b)).clamp(0.0, 1.0))
            .collect();
        out.image = Tensor::new(out.image.shape(), data)?;
    }
    Ok(out)
}
