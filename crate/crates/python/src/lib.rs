//! Python bindings: model construction, checkpoints, inference, metrics,
//! losses, synthetic data, training and the gradient self-check.

use std::path::PathBuf;

use ocunet::cli::{open_manifest, resolve_train_config, TrainArgs};
use ocunet::data::{read_rgb, synth_dataset as synth, SynthSpec};
use ocunet::loss::{self, ClassWeights, HybridLossConfig};
use ocunet::metrics::{confusion, default_class_names, metrics as score};
use ocunet::model::{Model, ModelConfig};
use ocunet::predict::predict_image;
use ocunet::selfcheck::{render, run_suite, SuiteOptions};
use ocunet::train::{
    load_checkpoint, save_checkpoint, train as run_training, Checkpoint, CheckpointMeta, Dataset,
    RunFiles,
};
use ocunet::{Error, Graph, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Model", module = "ocunet")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (num_classes = 3, input_size = 512, base_channels = 32, seed = 0))]
    fn new(num_classes: usize, input_size: usize, base_channels: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::tiny(base_channels, input_size, num_classes);
        cfg.validate().map_err(py_err)?;
        Ok(Self {
            inner: Model::new(&cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(&path)
            .and_then(|c| c.restore(None))
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ckpt = Checkpoint::from_model(&self.inner, None, CheckpointMeta::default());
        save_checkpoint(&path, &ckpt).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config().num_classes
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        let [h, w] = self.inner.config().input_size;
        (h, w)
    }

    fn config_toml(&self) -> String {
        self.inner.config().to_toml()
    }

    /// Structural counts of the built network.
    fn inventory<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let inv = self.inner.net.inventory();
        let d = PyDict::new(py);
        d.set_item("csaf_modules", inv.csaf_modules)?;
        d.set_item("encoder_csaf", inv.encoder_csaf)?;
        d.set_item("decoder_csaf", inv.decoder_csaf)?;
        d.set_item("aspp_modules", inv.aspp_modules)?;
        d.set_item("skip_residual_blocks", inv.skip_residual_blocks.to_vec())?;
        d.set_item("se_blocks", inv.se_blocks)?;
        Ok(d)
    }

    /// Probabilities for a flat NHWC batch at the model's input size.
    /// Returns `(values, shape)`.
    fn predict(&self, py: Python<'_>, images: Vec<f32>, batch: usize) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let [h, w] = self.inner.config().input_size;
        let x = Tensor::new(&[batch, h, w, 3], images).map_err(py_err)?;
        let y = py
            .detach(|| self.inner.predict(&x))
            .map_err(py_err)?;
        Ok((y.data().to_vec(), y.shape().to_vec()))
    }

    /// Per-class probabilities `[H, W, K]` and labels for an image file at
    /// its own resolution. Returns `(probs, shape, labels)`.
    fn predict_file(&self, py: Python<'_>, path: PathBuf) -> PyResult<(Vec<f32>, Vec<usize>, Vec<u8>)> {
        let img = read_rgb(&path).map_err(py_err)?;
        let pred = py
            .detach(|| predict_image(&self.inner, &img))
            .map_err(py_err)?;
        Ok((pred.probs.data().to_vec(), pred.probs.shape().to_vec(), pred.labels.data))
    }
}

/// Writes a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, count = 8, size = 64, classes = 1, seed = 0, test_fraction = 0.0))]
fn synth_dataset(
    out: PathBuf,
    count: usize,
    size: usize,
    classes: usize,
    seed: u64,
    test_fraction: f64,
) -> PyResult<String> {
    let spec = SynthSpec {
        test_fraction,
        ..SynthSpec::new(count, size, classes, seed)
    };
    let (_, path) = synth(&out, &spec).map_err(py_err)?;
    Ok(path.to_string_lossy().into_owned())
}

/// Per-class and summary segmentation metrics for two label arrays.
#[pyfunction]
fn metrics<'py>(
    py: Python<'py>,
    pred: Vec<usize>,
    truth: Vec<usize>,
    num_classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let report = score(&confusion(&pred, &truth, num_classes).map_err(py_err)?);
    let d = PyDict::new(py);
    let rows = PyList::empty(py);
    for ((name, m), s) in default_class_names(num_classes)
        .iter()
        .zip(&report.per_class)
        .zip(&report.support)
    {
        let row = PyDict::new(py);
        row.set_item("class", name)?;
        row.set_item("dice", m.dice)?;
        row.set_item("iou", m.iou)?;
        row.set_item("sensitivity", m.sensitivity)?;
        row.set_item("specificity", m.specificity)?;
        row.set_item("precision", m.precision)?;
        row.set_item("accuracy", m.accuracy)?;
        row.set_item("support", *s)?;
        rows.append(row)?;
    }
    d.set_item("per_class", rows)?;
    d.set_item("macro_dice", report.macro_avg.dice)?;
    d.set_item("miou", report.miou)?;
    d.set_item("pixel_accuracy", report.pixel_accuracy)?;
    d.set_item("table", report.to_table())?;
    Ok(d)
}

fn tensors(pred: Vec<f64>, target: Vec<f64>, shape: &[usize]) -> PyResult<(Tensor<f64>, Tensor<f64>)> {
    Ok((
        Tensor::new(shape, pred).map_err(py_err)?,
        Tensor::new(shape, target).map_err(py_err)?,
    ))
}

/// Mean categorical cross-entropy of probabilities against one-hot targets.
#[pyfunction]
fn cce_loss(pred: Vec<f64>, target: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    let (p, t) = tensors(pred, target, &shape)?;
    let g = Graph::new();
    let y = g.constant(p);
    let l = loss::cce(&g, y, &t).map_err(py_err)?;
    Ok(g.value(l).data()[0])
}

/// `alpha · WBCE + (1 − alpha) · Dice` for sigmoid probabilities.
#[pyfunction]
#[pyo3(signature = (pred, target, shape, alpha = 0.5, weights = None))]
fn hybrid_loss(
    pred: Vec<f64>,
    target: Vec<f64>,
    shape: Vec<usize>,
    alpha: f64,
    weights: Option<Vec<f64>>,
) -> PyResult<f64> {
    let (p, t) = tensors(pred, target, &shape)?;
    let cfg = HybridLossConfig::with_alpha(alpha).map_err(py_err)?;
    let w = match weights {
        Some(w) => ClassWeights::new(w).map_err(py_err)?,
        None => ClassWeights::uniform(),
    };
    let g = Graph::new();
    let y = g.constant(p);
    let l = loss::hybrid_loss(&g, &cfg, y, &t, &w).map_err(py_err)?;
    Ok(g.value(l).data()[0])
}

/// Trains from a manifest like `ocunet train` and returns the epoch log
/// as a list of dicts.
#[pyfunction]
#[pyo3(signature = (manifest, out, epochs = 50, seed = 0, lr = None, batch_size = None,
                    base_channels = None, patch_size = None, config = None))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    out: PathBuf,
    epochs: usize,
    seed: u64,
    lr: Option<f64>,
    batch_size: Option<usize>,
    base_channels: Option<usize>,
    patch_size: Option<usize>,
    config: Option<PathBuf>,
) -> PyResult<Bound<'py, PyList>> {
    let args = TrainArgs {
        manifest,
        config,
        checkpoint: None,
        out,
        seed: Some(seed),
        epochs: Some(epochs),
        batch_size,
        lr,
        alpha: None,
        classes: None,
        patch_size,
        base_channels,
    };
    let history = py
        .detach(|| -> ocunet::Result<_> {
            let mut manifest = open_manifest(&args.manifest)?;
            let cfg = resolve_train_config(&args, &manifest)?;
            manifest.patch_size = cfg.model.input_size;
            let data = Dataset::from_manifest(&manifest, cfg.train.val_fraction, cfg.train.seed)?;
            let files = RunFiles::in_dir(&args.out)?;
            let mut model = Model::new(&cfg.model, cfg.train.seed)?;
            Ok(run_training(&mut model, &data, &cfg.train, Some(&files))?.history)
        })
        .map_err(py_err)?;
    let list = PyList::empty(py);
    for r in history {
        let d = PyDict::new(py);
        d.set_item("epoch", r.epoch)?;
        d.set_item("train_loss", r.train_loss)?;
        d.set_item("val_dice", r.val_dice)?;
        d.set_item("val_miou", r.val_miou)?;
        d.set_item("lr", r.lr)?;
        list.append(d)?;
    }
    Ok(list)
}

/// Runs the finite-difference suite; returns `(all_passed, report)`.
#[pyfunction]
#[pyo3(signature = (probes = 60, seed = 7))]
fn gradcheck(py: Python<'_>, probes: usize, seed: u64) -> (bool, String) {
    let results = py.detach(|| {
        run_suite(&SuiteOptions {
            probes,
            seed,
            fault: None,
        })
    });
    (results.iter().all(|r| r.passed()), render(&results))
}

#[pymodule(name = "ocunet")]
pub fn ocunet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(cce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
