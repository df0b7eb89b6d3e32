// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings: models, SVD caches, masks, training and interventions.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dlens::analysis::{sparsity, total_directions};
use dlens::archive::Archive;
use dlens::decomposition::{decompose_all, load_cache, save_factors, ComponentId, Kind, SVDFactors};
use dlens::intervention::{apply_intervention, InterventionSpec};
use dlens::masking::{
    kl_from_logits, load_checkpoint, prepare_examples, save_checkpoint, train, CheckpointMeta, MaskSet, MaskedModel,
    TrainConfig, ACTIVE_THRESHOLD,
};
use dlens::model::{forward, load_model_dir, Weights};
use dlens::tasks::{generate, PromptPair, Task};
use dlens::tokenizer::BpeVocab;
use dlens::toy::task_model;
use dlens::DlensError;

fn py_err(e: DlensError) -> PyErr {
    match e {
        DlensError::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for dlens::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn parse_key(key: &str) -> PyResult<ComponentId> {
    ComponentId::parse_key(key).map_err(|_| PyKeyError::new_err(format!("unknown component key `{key}`")))
}

/// Frozen GPT-2 style model with its tokenizer.
#[pyclass(name = "Model", module = "dlens_py", frozen)]
struct PyModel {
    weights: Weights,
    vocab: BpeVocab,
}

#[pymethods]
impl PyModel {
    /// Seeded toy model over the built-in task vocabulary.
    #[staticmethod]
    fn toy(seed: u64) -> PyResult<Self> {
        let (weights, vocab) = task_model(seed).py()?;
        Ok(PyModel { weights, vocab })
    }

    /// Load a directory with model.safetensors, vocab.json and merges.txt.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            weights: load_model_dir(&dir).py()?,
            vocab: BpeVocab::load_dir(&dir).py()?,
        })
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.weights.config.n_layers
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.weights.config.n_heads
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.weights.config.d_model
    }

    #[getter]
    fn d_head(&self) -> usize {
        self.weights.config.d_head
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.weights.config.vocab_size
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.vocab.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.vocab.decode(&ids).py()
    }

    /// Logits at the final position.
    fn logits(&self, tokens: Vec<u32>) -> PyResult<Vec<f32>> {
        let (logits, _) = forward(&tokens, &self.weights).py()?;
        Ok(logits.row(tokens.len() - 1).to_vec())
    }

    #[pyo3(signature = (kinds=None, rank_tol=dlens::decomposition::DEFAULT_RANK_TOL))]
    fn decompose(&self, kinds: Option<Vec<String>>, rank_tol: f32) -> PyResult<PySvdCache> {
        let kinds = match kinds {
            Some(k) => k
                .iter()
                .map(|s| s.parse::<Kind>())
                .collect::<dlens::Result<Vec<_>>>()
                .py()?,
            None => Kind::ALL.to_vec(),
        };
        let factors = decompose_all(&self.weights, &kinds, rank_tol).py()?;
        Ok(PySvdCache {
            factors: factors.into_iter().map(|f| (f.id, f)).collect(),
        })
    }

    /// Clean/corrupt prompt pairs for `ioi`, `gt` or `gp`.
    fn generate(&self, task: &str, n: usize, seed: u64) -> PyResult<Vec<PyPrompt>> {
        let task: Task = task.parse().py()?;
        Ok(generate(task, n, seed, &self.vocab)
            .py()?
            .into_iter()
            .map(PyPrompt::from)
            .collect())
    }

    fn __repr__(&self) -> String {
        let c = &self.weights.config;
        format!(
            "Model(n_layers={}, n_heads={}, d_model={}, vocab_size={})",
            c.n_layers, c.n_heads, c.d_model, c.vocab_size
        )
    }
}

#[pyclass(name = "Prompt", module = "dlens_py", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyPrompt {
    task: String,
    clean_text: String,
    corrupt_text: String,
    clean_tokens: Vec<u32>,
    corrupt_tokens: Vec<u32>,
    answer_token: u32,
    foil_token: Option<u32>,
    metadata: BTreeMap<String, String>,
}

impl From<PromptPair> for PyPrompt {
    fn from(p: PromptPair) -> Self {
        PyPrompt {
            task: p.task.name().to_string(),
            clean_text: p.clean_text,
            corrupt_text: p.corrupt_text,
            clean_tokens: p.clean_tokens,
            corrupt_tokens: p.corrupt_tokens,
            answer_token: p.answer_token,
            foil_token: p.foil_token,
            metadata: p.metadata,
        }
    }
}

#[pymethods]
impl PyPrompt {
    fn __repr__(&self) -> String {
        format!("Prompt(task={:?}, clean_text={:?})", self.task, self.clean_text)
    }
}

/// Truncated SVD factors keyed by component (e.g. `qk_l0_h1`).
#[pyclass(name = "SvdCache", module = "dlens_py", frozen)]
struct PySvdCache {
    factors: BTreeMap<ComponentId, SVDFactors>,
}

impl PySvdCache {
    fn get(&self, key: &str) -> PyResult<&SVDFactors> {
        let id = parse_key(key)?;
        self.factors
            .get(&id)
            .ok_or_else(|| PyKeyError::new_err(format!("{key} is not in the cache")))
    }
}

#[pymethods]
impl PySvdCache {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PySvdCache {
            factors: load_cache(&dir).py()?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        for f in self.factors.values() {
            save_factors(&dir, f).py()?;
        }
        Ok(())
    }

    fn components(&self) -> Vec<String> {
        self.factors.keys().map(ComponentId::key).collect()
    }

    fn rank(&self, key: &str) -> PyResult<usize> {
        Ok(self.get(key)?.rank())
    }

    fn sigma(&self, key: &str) -> PyResult<Vec<f32>> {
        Ok(self.get(key)?.sigma.clone())
    }

    fn u(&self, key: &str, k: usize) -> PyResult<Vec<f32>> {
        let f = self.get(key)?;
        check_direction(f, k)?;
        Ok(f.u_col(k))
    }

    fn v(&self, key: &str, k: usize) -> PyResult<Vec<f32>> {
        let f = self.get(key)?;
        check_direction(f, k)?;
        Ok(f.v_col(k))
    }

    /// `U · diag(σ) · Vᵀ` as a list of rows.
    fn reconstruct(&self, key: &str) -> PyResult<Vec<Vec<f32>>> {
        let t = self.get(key)?.reconstruct().py()?;
        Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    }

    fn __len__(&self) -> usize {
        self.factors.len()
    }
}

fn check_direction(f: &SVDFactors, k: usize) -> PyResult<()> {
    if k >= f.rank() {
        return Err(PyValueError::new_err(format!(
            "{} has rank {}; direction {k} out of range",
            f.id,
            f.rank()
        )));
    }
    Ok(())
}

/// Per-direction masks, clamped to `[0, 1]` when read.
#[pyclass(name = "Masks", module = "dlens_py", frozen)]
struct PyMasks {
    masks: MaskSet,
    /// Present for masks produced by training.
    meta: Option<CheckpointMeta>,
}

#[pymethods]
impl PyMasks {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        if dir.join("masks.json").is_file() {
            let (masks, meta) = load_checkpoint(&dir).py()?;
            return Ok(PyMasks {
                masks,
                meta: Some(meta),
            });
        }
        let a = Archive::read(&dir.join("masks.safetensors")).py()?;
        Ok(PyMasks {
            masks: MaskSet::from_archive(&a).py()?,
            meta: None,
        })
    }

    /// All masks of `cache` set to `value`.
    #[staticmethod]
    #[pyo3(signature = (cache, value=1.0, kinds=None))]
    fn constant(cache: &PySvdCache, value: f32, kinds: Option<Vec<String>>) -> PyResult<Self> {
        let kinds = match kinds {
            Some(k) => k
                .iter()
                .map(|s| s.parse::<Kind>())
                .collect::<dlens::Result<Vec<_>>>()
                .py()?,
            None => Kind::ALL.to_vec(),
        };
        Ok(PyMasks {
            masks: MaskSet::new(&cache.factors, &kinds, value),
            meta: None,
        })
    }

    /// Write `masks.safetensors`, plus `masks.json` for trained masks.
    fn save(&self, dir: PathBuf) -> PyResult<()> {
        match &self.meta {
            Some(meta) => save_checkpoint(&dir, &self.masks, meta).py(),
            None => {
                std::fs::create_dir_all(&dir).map_err(|e| PyOSError::new_err(e.to_string()))?;
                self.masks.to_archive().write(&dir.join("masks.safetensors")).py()
            }
        }
    }

    /// Task, config, selected epoch and validation KL of trained masks.
    fn meta(&self) -> PyResult<Option<String>> {
        self.meta
            .as_ref()
            .map(|m| serde_json::to_string(m).map_err(|e| PyRuntimeError::new_err(e.to_string())))
            .transpose()
    }

    fn components(&self) -> Vec<String> {
        self.masks.params.keys().map(ComponentId::key).collect()
    }

    fn values(&self, key: &str) -> PyResult<Vec<f32>> {
        self.masks
            .values(&parse_key(key)?)
            .ok_or_else(|| PyKeyError::new_err(format!("{key} has no mask")))
    }

    #[pyo3(signature = (threshold=ACTIVE_THRESHOLD))]
    fn n_active(&self, threshold: f32) -> usize {
        self.masks.n_active(threshold)
    }

    fn n_directions(&self) -> usize {
        self.masks.n_directions()
    }

    /// `s_rel`, `s_full` and `s_full_ov` with the model's direction counts.
    fn sparsity<'py>(&self, py: Python<'py>, model: &PyModel) -> PyResult<Bound<'py, PyDict>> {
        let cfg = &model.weights.config;
        let r = sparsity(
            &self.masks,
            ACTIVE_THRESHOLD,
            total_directions(cfg, &Kind::ALL),
            total_directions(cfg, &[Kind::Ov]),
        );
        let d = PyDict::new(py);
        d.set_item("threshold", r.threshold)?;
        d.set_item("n_active", r.n_active)?;
        d.set_item("n_active_ov", r.n_active_ov)?;
        d.set_item("n_learnable", r.n_learnable)?;
        d.set_item("n_total", r.n_total)?;
        d.set_item("n_total_ov", r.n_total_ov)?;
        d.set_item("s_rel", r.s_rel)?;
        d.set_item("s_full", r.s_full)?;
        d.set_item("s_full_ov", r.s_full_ov)?;
        Ok(d)
    }
}

/// `(epoch, train_kl, val_kl, n_active)`.
type HistoryRow = (usize, f64, f64, usize);

/// Train masks on freshly generated prompts. Returns the selected masks and
/// the per-epoch `(epoch, train_kl, val_kl, n_active)` history.
#[pyfunction]
#[pyo3(signature = (model, cache, task, n_train=64, n_val=16, seed=0, config_json=None))]
fn train_masks(
    model: &PyModel,
    cache: &PySvdCache,
    task: &str,
    n_train: usize,
    n_val: usize,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<(PyMasks, Vec<HistoryRow>)> {
    let task: Task = task.parse().py()?;
    let config: TrainConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
        None => TrainConfig::default(),
    };
    let pairs = generate(task, n_train + n_val, seed, &model.vocab).py()?;
    let tokens: Vec<(Vec<u32>, Vec<u32>)> = pairs.into_iter().map(|p| (p.clean_tokens, p.corrupt_tokens)).collect();
    let mm = MaskedModel::new(&model.weights, &cache.factors).py()?;
    let (tr, va) = tokens.split_at(n_train.min(tokens.len()));
    let train_set = prepare_examples(&mm, tr).py()?;
    let val_set = prepare_examples(&mm, va).py()?;
    let initial = MaskSet::new(&cache.factors, &config.kinds, config.mask_init);
    let out = train(&mm, &train_set, &val_set, initial, &config, |_| {}).py()?;
    let hist = out
        .history
        .iter()
        .map(|r| (r.epoch, r.train_kl, r.val_kl, r.n_active))
        .collect();
    let meta = CheckpointMeta {
        task: task.name().to_string(),
        config,
        epoch: out.best_epoch,
        val_kl: out.best_val_kl,
    };
    Ok((
        PyMasks {
            masks: out.masks,
            meta: Some(meta),
        },
        hist,
    ))
}

/// Apply an intervention spec (JSON) to one prompt. Returns
/// `(baseline_logits, intervened_logits, delta_r)`.
#[pyfunction]
fn intervene(
    model: &PyModel,
    cache: &PySvdCache,
    tokens: Vec<u32>,
    spec_json: &str,
) -> PyResult<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let spec = InterventionSpec::from_json(spec_json).py()?;
    let r = apply_intervention(&tokens, &model.weights, &cache.factors, &spec).py()?;
    Ok((r.baseline_logits, r.intervened_logits, r.delta_r))
}

/// `KL(softmax(p) ‖ softmax(q))` in nats.
#[pyfunction]
fn kl_divergence(p_logits: Vec<f32>, q_logits: Vec<f32>) -> PyResult<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(PyValueError::new_err("logit vectors differ in length"));
    }
    Ok(kl_from_logits(&p_logits, &q_logits).0)
}

#[pymodule]
fn dlens_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyPrompt>()?;
    m.add_class::<PySvdCache>()?;
    m.add_class::<PyMasks>()?;
    m.add_function(wrap_pyfunction!(train_masks, m)?)?;
    m.add_function(wrap_pyfunction!(intervene, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add("ACTIVE_THRESHOLD", ACTIVE_THRESHOLD)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
