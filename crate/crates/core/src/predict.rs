//! Whole-image inference and raster exports: label masks, per-class
//! heatmaps and carcinoma overlays.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::data::{quantize, rgb_to_tensor, save_png, LabelMap, MaskEncoding};
use crate::error::{Error, Result};
use crate::metrics::{default_class_names, labels_from_probs};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::label_classes;

/// Peak opacity of the overlay layer (reached at probability 1).
pub const OVERLAY_OPACITY: f32 = 0.5;

/// Probabilities and hard labels at the source image's resolution.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `[H, W, K]`, one plane per label class.
    pub probs: Tensor<f32>,
    pub labels: LabelMap,
}

impl Prediction {
    pub fn num_classes(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Probability plane of class `k` as `[H, W]` values.
    pub fn plane(&self, k: usize) -> Vec<f32> {
        let c = self.num_classes();
        self.probs.data().iter().skip(k).step_by(c).copied().collect()
    }
}

fn resize_plane(plane: Vec<f32>, (h, w): (usize, usize), (th, tw): (usize, usize)) -> Vec<f32> {
    if (h, w) == (th, tw) {
        return plane;
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, plane).expect("dims match");
    imageops::resize(&buf, tw as u32, th as u32, FilterType::Triangle).into_raw()
}

/// Runs the model on an RGB image of any size. The image is resized to the
/// model's input size and the probabilities are resized back; labels are
/// the argmax of the returned probabilities.
pub fn predict_image(model: &Model<f32>, img: &RgbImage) -> Result<Prediction> {
    let (w, h) = img.dimensions();
    let (h, w) = (h as usize, w as usize);
    let [mh, mw] = model.config().input_size;
    let input = if (h, w) == (mh, mw) {
        img.clone()
    } else {
        imageops::resize(img, mw as u32, mh as u32, FilterType::Triangle)
    };
    let x = rgb_to_tensor(&input).reshape(&[1, mh, mw, 3])?;
    let out = model.predict(&x)?;
    let channels = model.config().num_classes;
    let k = label_classes(channels);
    let planes: Vec<Vec<f32>> = if channels == 1 {
        let p: Vec<f32> = out.data().to_vec();
        vec![p.iter().map(|v| 1.0 - v).collect(), p]
    } else {
        (0..k)
            .map(|c| out.data().iter().skip(c).step_by(k).copied().collect())
            .collect()
    };
    let planes: Vec<Vec<f32>> = planes
        .into_iter()
        .map(|p| resize_plane(p, (mh, mw), (h, w)))
        .collect();
    let mut data = Vec::with_capacity(h * w * k);
    for i in 0..h * w {
        data.extend(planes.iter().map(|p| p[i]));
    }
    let probs = Tensor::new(&[h, w, k], data)?;
    let labels = labels_from_probs(&probs).into_iter().map(|l| l as u8).collect();
    Ok(Prediction {
        probs,
        labels: LabelMap::new(h, w, labels)?,
    })
}

/// Grayscale heatmap with pixel value `round(255·p)`.
pub fn heatmap(pred: &Prediction, class: usize) -> GrayImage {
    let (h, w) = (pred.labels.height, pred.labels.width);
    let raw = pred.plane(class).into_iter().map(quantize).collect();
    GrayImage::from_raw(w as u32, h as u32, raw).expect("dims match")
}

/// Red (p = 0) to yellow (p = 1).
pub fn ramp(p: f32) -> [f32; 3] {
    [1.0, p.clamp(0.0, 1.0), 0.0]
}

/// Blends the ramp color of `probs` over `src` with opacity
/// `OVERLAY_OPACITY · p`, so confident regions are tinted most.
pub fn overlay(src: &RgbImage, probs: &[f32]) -> Result<RgbImage> {
    let (w, h) = src.dimensions();
    if probs.len() != (w * h) as usize {
        return Err(Error::invalid(format!(
            "{} probabilities for a {w}×{h} image",
            probs.len()
        )));
    }
    let mut out = src.clone();
    for (px, &p) in out.pixels_mut().zip(probs) {
        let a = OVERLAY_OPACITY * p.clamp(0.0, 1.0);
        let color = ramp(p);
        for (v, c) in px.0.iter_mut().zip(color) {
            let base = *v as f32 / 255.0;
            *v = quantize((1.0 - a) * base + a * c);
        }
    }
    Ok(out)
}

/// Files written for one input image.
#[derive(Debug, Clone)]
pub struct PredictionFiles {
    pub mask: PathBuf,
    pub heatmaps: Vec<PathBuf>,
    pub overlay: PathBuf,
}

/// Writes `<stem>_mask.png`, `<stem>_prob_<class>.png` per class and
/// `<stem>_overlay.png` into `dir`. The carcinoma class is the last one.
pub fn export(src: &RgbImage, pred: &Prediction, dir: &Path, stem: &str) -> Result<PredictionFiles> {
    let k = pred.num_classes();
    let encoding = MaskEncoding::for_classes(k)?;
    let mask = dir.join(format!("{stem}_mask.png"));
    save_png(&pred.labels.to_mask(encoding), &mask)?;
    let mut heatmaps = Vec::with_capacity(k);
    for (c, name) in default_class_names(k).iter().enumerate() {
        let path = dir.join(format!("{stem}_prob_{name}.png"));
        save_png(&heatmap(pred, c), &path)?;
        heatmaps.push(path);
    }
    let path = dir.join(format!("{stem}_overlay.png"));
    save_png(&overlay(src, &pred.plane(k - 1))?, &path)?;
    Ok(PredictionFiles {
        mask,
        heatmaps,
        overlay: path,
    })
}
