//! Image/mask ingestion, patching, augmentation and synthetic datasets.

mod augment;
mod manifest;
mod synth;

use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

pub use augment::{augment, gaussian_blur, gaussian_kernel, AugmentPolicy, AugmentationSpec};
pub use manifest::{load_manifest, ManifestEntry, SampleManifest, Split};
pub use synth::{synth_dataset, SynthSpec};

use crate::error::{Error, Result};
use crate::loss::ClassWeights;
use crate::tensor::{Scalar, Tensor};

/// Intensities further than this from every class code are rejected.
pub const MASK_TOLERANCE: u8 = 40;

/// How class labels are stored as single-channel mask intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskEncoding {
    /// 0 non-tissue, 128 non-carcinoma tissue, 255 carcinoma.
    Orca3,
    /// 0 background, 255 carcinoma.
    Binary,
}

impl MaskEncoding {
    pub fn codes(self) -> &'static [u8] {
        match self {
            MaskEncoding::Orca3 => &[0, 128, 255],
            MaskEncoding::Binary => &[0, 255],
        }
    }

    pub fn num_classes(self) -> usize {
        self.codes().len()
    }

    /// Encoding for a model head with `num_classes` outputs.
    pub fn for_classes(num_classes: usize) -> Result<Self> {
        match num_classes {
            1 | 2 => Ok(MaskEncoding::Binary),
            3 => Ok(MaskEncoding::Orca3),
            k => Err(Error::invalid(format!(
                "no mask encoding for {k} classes (supported: 1 or 2 binary, 3)"
            ))),
        }
    }

    pub fn encode(self, label: u8) -> u8 {
        self.codes()[label as usize]
    }

    /// Nearest code within [`MASK_TOLERANCE`].
    pub fn decode(self, value: u8) -> Option<u8> {
        let (label, dist) = self
            .codes()
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as u8, value.abs_diff(c)))
            .min_by_key(|&(_, d)| d)?;
        (dist <= MASK_TOLERANCE).then_some(label)
    }
}

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("label map", &[height, width], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    pub fn to_mask(&self, encoding: MaskEncoding) -> GrayImage {
        let raw = self.data.iter().map(|&l| encoding.encode(l)).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("dims match")
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.height, self.width],
            self.data.iter().map(|&l| T::from_f64(l as f64)).collect(),
        )
        .expect("dims match")
    }
}

/// An RGB image in `[0, 1]` (`[H, W, 3]`) with its aligned label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor<f32>, labels: LabelMap) -> Result<Self> {
        let want = [labels.height, labels.width, 3];
        if image.shape() != want {
            return Err(Error::shape("sample", image.shape(), &want));
        }
        Ok(Self { image, labels })
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data).expect("dims match")
}

/// Inverse of [`rgb_to_tensor`]; values are clamped and rounded.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    match t.shape() {
        &[h, w, 3] => {
            let raw = t.data().iter().map(|&v| quantize(v)).collect();
            Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("dims match"))
        }
        s => Err(Error::shape("rgb image", s, &[0, 0, 3])),
    }
}

/// `[0, 1]` → `round(255·v)`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_luma8())
}

pub fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn decode_mask(mask: &GrayImage, encoding: MaskEncoding, path: &Path) -> Result<LabelMap> {
    let (w, h) = mask.dimensions();
    let mut data = Vec::with_capacity(mask.len());
    for (idx, &v) in mask.as_raw().iter().enumerate() {
        match encoding.decode(v) {
            Some(l) => data.push(l),
            None => {
                let (i, j) = (idx / w as usize, idx % w as usize);
                return Err(Error::data(
                    path,
                    format!("mask value {v} at ({i}, {j}) is not a {encoding:?} class code"),
                ));
            }
        }
    }
    LabelMap::new(h as usize, w as usize, data)
}

/// Reads one image/mask pair of a manifest.
pub fn load_sample(manifest: &SampleManifest, entry: &ManifestEntry) -> Result<Sample> {
    let image_path = manifest.resolve(&entry.image_path);
    let mask_path = manifest.resolve(&entry.mask_path);
    let image = read_rgb(&image_path)?;
    let mask = read_gray(&mask_path)?;
    if image.dimensions() != mask.dimensions() {
        let (iw, ih) = image.dimensions();
        let (mw, mh) = mask.dimensions();
        return Err(Error::data(
            mask_path,
            format!("mask is {mw}×{mh} but image is {iw}×{ih}"),
        ));
    }
    let labels = decode_mask(&mask, manifest.encoding, &mask_path)?;
    Sample::new(rgb_to_tensor(&image), labels)
}

/// `(rows, cols)` of the tile grid [`extract_patches`] cuts from an
/// `h × w` image.
pub fn patch_grid(
    (h, w): (usize, usize),
    (ph, pw): (usize, usize),
    (sh, sw): (usize, usize),
) -> Result<(usize, usize)> {
    if ph == 0 || pw == 0 || sh == 0 || sw == 0 {
        return Err(Error::invalid("patch and stride must be positive"));
    }
    if ph > h || pw > w {
        return Err(Error::invalid(format!(
            "patch {ph}×{pw} is larger than image {h}×{w}"
        )));
    }
    Ok(((h - ph) / sh + 1, (w - pw) / sw + 1))
}

/// Grid tiles of `patch` size taken every `stride` pixels; tiles that would
/// cross the border are dropped.
pub fn extract_patches(
    sample: &Sample,
    patch: (usize, usize),
    stride: (usize, usize),
) -> Result<Vec<Sample>> {
    let w = sample.width();
    let (ph, pw) = patch;
    let (sh, sw) = stride;
    let (rows, cols) = patch_grid((sample.height(), w), patch, stride)?;
    let src = sample.image.data();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (i0, j0) = (r * sh, c * sw);
            let mut img = Vec::with_capacity(ph * pw * 3);
            let mut lab = Vec::with_capacity(ph * pw);
            for i in i0..i0 + ph {
                let row = (i * w + j0) * 3;
                img.extend_from_slice(&src[row..row + pw * 3]);
                lab.extend_from_slice(&sample.labels.data[i * w + j0..i * w + j0 + pw]);
            }
            out.push(Sample {
                image: Tensor::new(&[ph, pw, 3], img)?,
                labels: LabelMap::new(ph, pw, lab)?,
            });
        }
    }
    Ok(out)
}

/// Resizes a sample: bilinear for the image, nearest for the labels.
pub fn resize_sample(sample: &Sample, height: usize, width: usize) -> Result<Sample> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    if (sample.height(), sample.width()) == (height, width) {
        return Ok(sample.clone());
    }
    let rgb = tensor_to_rgb(&sample.image)?;
    let rgb = image::imageops::resize(
        &rgb,
        width as u32,
        height as u32,
        image::imageops::FilterType::Triangle,
    );
    let lab = GrayImage::from_raw(
        sample.width() as u32,
        sample.height() as u32,
        sample.labels.data.clone(),
    )
    .expect("dims match");
    let lab = image::imageops::resize(
        &lab,
        width as u32,
        height as u32,
        image::imageops::FilterType::Nearest,
    );
    Sample::new(
        rgb_to_tensor(&rgb),
        LabelMap::new(height, width, lab.into_raw())?,
    )
}

/// Brings a loaded image to the manifest's patch size: tiles when it is
/// larger, resizes otherwise.
pub fn to_patches(sample: &Sample, patch: [usize; 2]) -> Result<Vec<Sample>> {
    let [ph, pw] = patch;
    if sample.height() >= ph && sample.width() >= pw {
        extract_patches(sample, (ph, pw), (ph, pw))
    } else {
        Ok(vec![resize_sample(sample, ph, pw)?])
    }
}

pub fn count_labels(labels: &LabelMap, num_classes: usize, counts: &mut [u64]) -> Result<()> {
    debug_assert_eq!(counts.len(), num_classes);
    for &l in &labels.data {
        let slot = counts
            .get_mut(l as usize)
            .ok_or_else(|| Error::invalid(format!("label {l} out of range")))?;
        *slot += 1;
    }
    Ok(())
}

/// Per-class pixel fractions over the training split.
pub fn class_frequencies(manifest: &SampleManifest) -> Result<Vec<f64>> {
    let k = manifest.encoding.num_classes();
    let mut counts = vec![0u64; k];
    let mut any = false;
    for entry in manifest.split(Split::Train) {
        let s = load_sample(manifest, entry)?;
        count_labels(&s.labels, k, &mut counts)?;
        any = true;
    }
    if !any {
        return Err(Error::data(&manifest.root, "manifest has no training entries"));
    }
    Ok(frequencies_from_counts(&counts))
}

pub fn frequencies_from_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Inverse-frequency weights normalized to mean 1.
///
/// A class with no pixels would get an infinite weight; it is capped at the
/// largest weight among the classes that do occur.
pub fn derive_class_weights(frequencies: &[f64]) -> Result<ClassWeights> {
    if frequencies.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::invalid(format!("invalid class frequencies {frequencies:?}")));
    }
    let inv: Vec<Option<f64>> = frequencies
        .iter()
        .map(|&f| (f > 0.0).then(|| 1.0 / f))
        .collect();
    let cap = inv
        .iter()
        .flatten()
        .copied()
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or_else(|| Error::invalid("every class frequency is zero"))?;
    let raw: Vec<f64> = inv.iter().map(|w| w.unwrap_or(cap)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    ClassWeights::new(raw.iter().map(|w| w / mean).collect())
}

/// Default batch size for a training resolution: 8 up to 512×512, 4 above.
pub fn default_batch_size(height: usize, width: usize) -> usize {
    if height * width > 512 * 512 {
        4
    } else {
        8
    }
}

/// Stacked network inputs and targets.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, H, W, 3]`
    pub images: Tensor<f32>,
    /// `[B, H, W, channels]`: one-hot for multi-channel heads, the
    /// foreground plane for a single sigmoid channel.
    pub targets: Tensor<f32>,
    /// Flattened label maps, `B·H·W`.
    pub labels: Vec<usize>,
}

pub fn make_batch(samples: &[Sample], channels: usize) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot build an empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let n = samples.len();
    let mut images = Vec::with_capacity(n * h * w * 3);
    let mut targets = Vec::with_capacity(n * h * w * channels);
    let mut labels = Vec::with_capacity(n * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape("batch", &[h, w], &[s.height(), s.width()]));
        }
        images.extend_from_slice(s.image.data());
        for &l in &s.labels.data {
            let l = l as usize;
            if channels == 1 {
                targets.push(if l >= 1 { 1.0 } else { 0.0 });
            } else {
                if l >= channels {
                    return Err(Error::invalid(format!(
                        "label {l} does not fit a {channels}-channel head"
                    )));
                }
                targets.extend((0..channels).map(|c| if c == l { 1.0 } else { 0.0 }));
            }
            labels.push(if channels == 1 { l.min(1) } else { l });
        }
    }
    Ok(Batch {
        images: Tensor::new(&[n, h, w, 3], images)?,
        targets: Tensor::new(&[n, h, w, channels], targets)?,
        labels,
    })
}
