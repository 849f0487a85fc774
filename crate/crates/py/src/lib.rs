//! Python bindings. Clips cross the boundary as a flat row-major list of
//! floats plus a `(frames, height, width, 3)` shape.

use std::path::PathBuf;

use ndarray::Array4;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use svfap::checkpoint::Checkpoint as CoreCheckpoint;
use svfap::complexity::{count_with_head, DEFAULT_HEAD_OUTPUTS};
use svfap::data::{load_dataset, synth_generate, SynthSpec};
use svfap::finetune::Task;
use svfap::masking::make_tube_mask;
use svfap::metrics;
use svfap::model::{predict, pretrain_step};
use svfap::trainer::{epoch_means, evaluate as core_evaluate, init_params, Objective, Trainer};
use svfap::{ArchConfig, Preset, RunConfig, SvfapError, TrainConfig, Variant};

fn err(e: SvfapError) -> PyErr {
    match e {
        SvfapError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn clip_from(values: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Array4<f64>> {
    Array4::from_shape_vec(shape, values).map_err(|e| PyValueError::new_err(format!("clip shape: {e}")))
}

/// Architecture and training settings.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// `TPSBT-S` or `TPSBT-B`, with pretraining defaults.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let p: Preset = name.parse().map_err(err)?;
        Ok(PyConfig {
            inner: RunConfig::new(ArchConfig::preset(p), TrainConfig::pretrain()),
        })
    }

    #[staticmethod]
    fn tiny() -> Self {
        PyConfig {
            inner: RunConfig::new(ArchConfig::tiny(), TrainConfig::pretrain()),
        }
    }

    /// `key = value` lines applied on top of the TPSBT-B defaults.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::from_text(text).map_err(err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(|v| err(v.into()))
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.arch.embed_dim
    }

    #[getter]
    fn masking_ratio(&self) -> f64 {
        self.inner.arch.masking_ratio
    }

    #[getter]
    fn input(&self) -> (usize, usize, usize) {
        let [t, h, w] = self.inner.arch.input;
        (t, h, w)
    }

    /// Token lattice (T, H, W).
    #[getter]
    fn grid(&self) -> (usize, usize, usize) {
        let g = self.inner.arch.grid();
        (g.t, g.h, g.w)
    }

    /// Token counts of the three encoder stages.
    fn stage_lengths(&self) -> (usize, usize, usize) {
        let [a, b, c] = self.inner.arch.stage_lengths();
        (a, b, c)
    }

    fn __repr__(&self) -> String {
        let a = &self.inner.arch;
        format!(
            "Config(embed_dim={}, stage_depths={:?}, variant={}, input={:?}, patch={:?})",
            a.embed_dim, a.stage_depths, a.variant, a.input, a.patch
        )
    }
}

/// Parameter and multiply-add counts of `config` built as `variant`.
#[pyfunction]
#[pyo3(signature = (config, variant=None, head_outputs=DEFAULT_HEAD_OUTPUTS))]
fn count<'py>(py: Python<'py>, config: &PyConfig, variant: Option<&str>, head_outputs: usize) -> PyResult<Bound<'py, PyDict>> {
    let v: Variant = match variant {
        Some(s) => s.parse().map_err(err)?,
        None => config.inner.arch.variant,
    };
    let r = count_with_head(&config.inner.arch, v, head_outputs).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("variant", v.name())?;
    d.set_item("params", r.params_total())?;
    d.set_item("params_decoder", r.params_decoder())?;
    d.set_item("flops", r.flops_finetune())?;
    d.set_item("flops_p", r.flops_pretrain())?;
    let parts = PyDict::new(py);
    for p in &r.parts {
        parts.set_item(p.name, (p.params, p.flops_finetune, p.flops_pretrain))?;
    }
    d.set_item("parts", parts)?;
    Ok(d)
}

/// Tube mask over a (T, H, W) lattice: (visible rows, masked rows).
#[pyfunction]
fn tube_mask(grid: (usize, usize, usize), ratio: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let g = svfap::Grid::new(grid.0, grid.1, grid.2);
    let m = make_tube_mask(g, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
    Ok((m.visible_rows(), m.masked_rows()))
}

#[pyfunction]
fn war(preds: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    metrics::war(&preds, &labels).map_err(err)
}

#[pyfunction]
fn uar(preds: Vec<usize>, labels: Vec<usize>, classes: usize) -> PyResult<f64> {
    metrics::uar(&preds, &labels, classes).map_err(err)
}

#[pyfunction]
fn weighted_f1(preds: Vec<usize>, labels: Vec<usize>, classes: usize) -> PyResult<f64> {
    metrics::weighted_f1(&preds, &labels, classes).map_err(err)
}

#[pyfunction]
fn pcc(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    metrics::pcc(&pred, &truth).map_err(err)
}

#[pyfunction]
fn ccc(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    metrics::ccc(&pred, &truth).map_err(err)
}

#[pyfunction]
fn acc_personality(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    metrics::acc_personality(&pred, &truth).map_err(err)
}

/// Writes a synthetic dataset; returns the number of clips.
#[pyfunction]
#[pyo3(signature = (out, classes=3, per_class=4, seed=0, noise=0.02, frames=16, height=32, width=32))]
#[allow(clippy::too_many_arguments)]
fn synth(out: PathBuf, classes: usize, per_class: usize, seed: u64, noise: f64, frames: usize, height: usize, width: usize) -> PyResult<usize> {
    let spec = SynthSpec {
        num_classes: classes,
        clips_per_class: per_class,
        geometry: [frames, height, width],
        noise_std: noise,
        seed,
    };
    Ok(synth_generate(&spec, &out).map_err(err)?.rows.len())
}

/// A trained model with its optimizer state.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: CoreCheckpoint::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.state.step
    }

    #[getter]
    fn objective(&self) -> String {
        match self.inner.objective {
            Objective::Pretrain => "pretrain".into(),
            Objective::Classify { classes } => format!("classify:{classes}"),
            Objective::Regress { dims } => format!("regress:{dims}"),
        }
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: RunConfig::new(self.inner.arch.clone(), self.inner.train.clone()),
        }
    }

    fn num_params(&self) -> u64 {
        self.inner.state.params.numel()
    }

    /// Raw head outputs for one normalized clip of the model's input size.
    fn predict(&self, values: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Vec<f64>> {
        let clip = clip_from(values, shape)?;
        predict(&self.inner.state.params, &self.inner.arch, clip.view()).map_err(err)
    }

    /// Masked reconstruction loss of one clip under a seeded tube mask.
    fn reconstruction_loss(&self, values: Vec<f64>, shape: (usize, usize, usize, usize), seed: u64) -> PyResult<f64> {
        if self.inner.objective != Objective::Pretrain {
            return Err(PyValueError::new_err("not a pretraining checkpoint"));
        }
        let clip = clip_from(values, shape)?;
        let cfg = &self.inner.arch;
        let mask = make_tube_mask(cfg.grid(), cfg.masking_ratio, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        Ok(pretrain_step(&self.inner.state.params, cfg, clip.view(), &mask).map_err(err)?.0)
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(objective={}, step={})", self.objective(), self.inner.state.step)
    }
}

fn train(
    config: &PyConfig,
    manifest: PathBuf,
    objective: Option<Objective>,
    init: Option<&PyCheckpoint>,
) -> PyResult<(PyCheckpoint, Vec<f64>, usize, usize)> {
    let cfg = &config.inner;
    cfg.validate().map_err(|v| err(v.into()))?;
    let [_, h, w] = cfg.arch.input;
    let (man, clips) = load_dataset(&manifest, Some((h, w))).map_err(err)?;
    let objective = match objective {
        Some(o) => o,
        None => match clips.first().map(|c| &c.label) {
            Some(svfap::data::Label::Class(_)) => Objective::Classify {
                classes: man.num_classes(),
            },
            Some(svfap::data::Label::Scores(v)) => Objective::Regress { dims: v.len() },
            _ => return Err(PyValueError::new_err("fine-tuning needs labeled clips")),
        },
    };
    let tr = Trainer::new(cfg.arch.clone(), cfg.train.clone(), objective, &clips).map_err(err)?;
    let (params, loaded, fresh) = init_params(&cfg.arch, objective, init.map(|c| &c.inner.state.params), cfg.train.seed);
    let mut state = tr.init_state(params);
    let logs = tr.run(&mut state, None, |_| {}).map_err(err)?;
    let losses = epoch_means(&logs).into_iter().map(|(_, l)| l).collect();
    let ck = CoreCheckpoint {
        arch: cfg.arch.clone(),
        train: cfg.train.clone(),
        objective,
        state,
        normalization: Some(man.normalization),
    };
    Ok((PyCheckpoint { inner: ck }, losses, loaded, fresh))
}

/// Pretrains on a manifest; returns the checkpoint and per-epoch mean losses.
#[pyfunction]
fn pretrain(py: Python<'_>, config: PyConfig, manifest: PathBuf) -> PyResult<(PyCheckpoint, Vec<f64>)> {
    let (ck, losses, _, _) = py.detach(|| train(&config, manifest, Some(Objective::Pretrain), None))?;
    Ok((ck, losses))
}

/// Fine-tunes on a labeled manifest, optionally from a checkpoint. Returns
/// the checkpoint, per-epoch losses and the (loaded, fresh) tensor counts.
#[pyfunction]
#[pyo3(signature = (config, manifest, init=None))]
fn finetune(
    py: Python<'_>,
    config: PyConfig,
    manifest: PathBuf,
    init: Option<Py<PyCheckpoint>>,
) -> PyResult<(PyCheckpoint, Vec<f64>, (usize, usize))> {
    let init_ref = init.as_ref().map(|c| c.borrow(py));
    let init_ck = init_ref.as_deref();
    let (ck, losses, loaded, fresh) = train(&config, manifest, None, init_ck)?;
    Ok((ck, losses, (loaded, fresh)))
}

/// Two-clip metrics of a fine-tuned checkpoint on a manifest.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, checkpoint: &PyCheckpoint, manifest: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let ck = &checkpoint.inner;
    let task = ck
        .objective
        .task()
        .ok_or_else(|| PyValueError::new_err("checkpoint has no prediction head"))?;
    let [_, h, w] = ck.arch.input;
    let (_, clips) = load_dataset(&manifest, Some((h, w))).map_err(err)?;
    let outputs = core_evaluate(&ck.state.params, &ck.arch, &clips, task, ck.train.sample_stride).map_err(err)?;
    let table = match (task, ck.objective) {
        (Task::Classification, Objective::Classify { classes }) => {
            let preds: Vec<usize> = outputs.iter().map(|v| svfap::trainer::argmax(v)).collect();
            let labels = clips
                .iter()
                .map(|c| match c.label {
                    svfap::data::Label::Class(k) => Ok(k),
                    _ => Err(PyValueError::new_err(format!("{}: expected a class label", c.source_id))),
                })
                .collect::<PyResult<Vec<_>>>()?;
            metrics::MetricTable::classification(&preds, &labels, classes).map_err(err)?
        }
        _ => {
            let truth = clips
                .iter()
                .map(|c| match &c.label {
                    svfap::data::Label::Scores(v) => Ok(v.clone()),
                    _ => Err(PyValueError::new_err(format!("{}: expected scores", c.source_id))),
                })
                .collect::<PyResult<Vec<_>>>()?;
            metrics::MetricTable::regression(&outputs, &truth).map_err(err)?
        }
    };
    let d = PyDict::new(py);
    for (k, v) in table.0 {
        d.set_item(k, v)?;
    }
    Ok(d)
}

#[pymodule]
#[pyo3(name = "svfap")]
fn svfap_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(count, m)?)?;
    m.add_function(wrap_pyfunction!(tube_mask, m)?)?;
    m.add_function(wrap_pyfunction!(war, m)?)?;
    m.add_function(wrap_pyfunction!(uar, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    m.add_function(wrap_pyfunction!(pcc, m)?)?;
    m.add_function(wrap_pyfunction!(ccc, m)?)?;
    m.add_function(wrap_pyfunction!(acc_personality, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
