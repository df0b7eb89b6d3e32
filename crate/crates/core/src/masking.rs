// SPDX-License-Identifier: MIT OR Apache-2.0

//! Directional mask optimisation over singular directions.
//!
//! Attention scores use only the masked QK reconstruction. OV and both MLP
//! stages split each component into a masked part applied to the clean input
//! and a complement applied to the matching input of a frozen corrupted run.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::{Graph, NodeId};
use crate::decomposition::{ComponentId, Kind, SVDFactors};
use crate::error::{DlensError, Result};
use crate::model::{forward, Weights};
use crate::tensor::{log_softmax64, Tensor};
use crate::tokenizer::TokenId;

/// Threshold above which a mask entry counts as active.
pub const ACTIVE_THRESHOLD: f32 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub l1_weight: f64,
    /// Epochs without a new best validation KL before stopping.
    pub early_stop_patience: usize,
    /// A later epoch replaces the best one when its validation KL is within
    /// this margin of the lowest seen.
    pub early_stop_tolerance: f64,
    pub seed: u64,
    pub mask_init: f32,
    pub kinds: Vec<Kind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_epochs: 15,
            learning_rate: 1e-2,
            weight_decay: 1e-9,
            l1_weight: 1.5e-4,
            early_stop_patience: 5,
            early_stop_tolerance: 1e-3,
            seed: 0,
            mask_init: 0.9,
            kinds: Kind::ALL.to_vec(),
        }
    }
}

impl TrainConfig {
    /// Upper epoch budget for long runs.
    pub const EXTENDED_EPOCHS: usize = 150;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DlensError::Invalid(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.l1_weight >= 0.0) {
            return bad("weight_decay and l1_weight must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.mask_init) {
            return bad(format!("mask_init {} outside [0, 1]", self.mask_init));
        }
        if self.kinds.is_empty() {
            return bad("at least one component kind must be masked".into());
        }
        Ok(())
    }
}

/// Learnable per-direction masks. The model sees each value clamped to
/// `[0, 1]` with a straight-through gradient; training also projects the
/// stored values back into that range after every step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskSet {
    pub params: BTreeMap<ComponentId, Vec<f32>>,
}

impl MaskSet {
    /// One mask per decomposed component of the given kinds, all at `init`.
    pub fn new(factors: &BTreeMap<ComponentId, SVDFactors>, kinds: &[Kind], init: f32) -> Self {
        MaskSet {
            params: factors
                .iter()
                .filter(|(id, _)| kinds.contains(&id.kind))
                .map(|(id, f)| (*id, vec![init; f.rank()]))
                .collect(),
        }
    }

    pub fn values(&self, id: &ComponentId) -> Option<Vec<f32>> {
        self.params
            .get(id)
            .map(|p| p.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn all_values(&self) -> BTreeMap<ComponentId, Vec<f32>> {
        self.params
            .keys()
            .map(|id| (*id, self.values(id).unwrap_or_default()))
            .collect()
    }

    pub fn fill(&mut self, v: f32) {
        for p in self.params.values_mut() {
            p.iter_mut().for_each(|x| *x = v);
        }
    }

    /// Clamp every parameter into `[0, 1]`.
    pub fn project(&mut self) {
        for p in self.params.values_mut() {
            p.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        }
    }

    pub fn n_directions(&self) -> usize {
        self.params.values().map(Vec::len).sum()
    }

    /// Sum of all clamped mask values.
    pub fn l1(&self) -> f64 {
        self.params.values().flatten().map(|v| v.clamp(0.0, 1.0) as f64).sum()
    }

    pub fn n_active(&self, threshold: f32) -> usize {
        self.params
            .values()
            .flatten()
            .filter(|v| v.clamp(0.0, 1.0) > threshold)
            .count()
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (id, p) in &self.params {
            a.insert(id.key(), Tensor::vector(p.iter().map(|v| v.clamp(0.0, 1.0)).collect()));
            a.insert(format!("raw.{}", id.key()), Tensor::vector(p.clone()));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, t) in &a.tensors {
            if name.starts_with("raw.") {
                continue;
            }
            let id = ComponentId::parse_key(name)?;
            let raw = match a.tensors.get(&format!("raw.{name}")) {
                Some(r) if r.len() == t.len() => r.data().to_vec(),
                _ => t.data().to_vec(),
            };
            params.insert(id, raw);
        }
        Ok(MaskSet { params })
    }
}

/// Metadata written next to a mask archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: String,
    pub config: TrainConfig,
    pub epoch: usize,
    pub val_kl: f64,
}

/// Write `masks.safetensors` and `masks.json` into `dir`.
pub fn save_checkpoint(dir: &Path, masks: &MaskSet, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DlensError::io(dir, e))?;
    masks.to_archive().write(&dir.join("masks.safetensors"))?;
    let p = dir.join("masks.json");
    std::fs::write(&p, serde_json::to_string_pretty(meta)?).map_err(|e| DlensError::io(&p, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(MaskSet, CheckpointMeta)> {
    let masks = MaskSet::from_archive(&Archive::read(&dir.join("masks.safetensors"))?)?;
    let p = dir.join("masks.json");
    let raw = std::fs::read_to_string(&p).map_err(|e| DlensError::io(&p, e))?;
    Ok((masks, serde_json::from_str(&raw)?))
}

#[derive(Debug, Clone)]
struct SharedFactors {
    u: Arc<Tensor>,
    v: Arc<Tensor>,
    sigma: Vec<f32>,
}

/// Frozen model plus decompositions of every component, ready for masked
/// evaluation.
#[derive(Debug, Clone)]
pub struct MaskedModel<'w> {
    pub weights: &'w Weights,
    comps: BTreeMap<ComponentId, SharedFactors>,
    unembed: Arc<Tensor>,
}

impl<'w> MaskedModel<'w> {
    /// Requires factors for all four kinds of every layer and head.
    pub fn new(weights: &'w Weights, factors: &BTreeMap<ComponentId, SVDFactors>) -> Result<Self> {
        let cfg = &weights.config;
        let mut comps = BTreeMap::new();
        for id in ComponentId::all(cfg.n_layers, cfg.n_heads, &Kind::ALL) {
            let f = factors.get(&id).ok_or_else(|| {
                DlensError::Invalid(format!("SVD cache has no entry for {id}; decompose all kinds first"))
            })?;
            comps.insert(
                id,
                SharedFactors {
                    u: Arc::new(f.u.clone()),
                    v: Arc::new(f.v.clone()),
                    sigma: f.sigma.clone(),
                },
            );
        }
        Ok(MaskedModel {
            weights,
            comps,
            unembed: Arc::new(weights.unembed().clone()),
        })
    }

    fn comp(&self, id: ComponentId) -> &SharedFactors {
        &self.comps[&id]
    }

    pub fn rank(&self, id: &ComponentId) -> Option<usize> {
        self.comps.get(id).map(|c| c.sigma.len())
    }
}

/// Frozen corrupted-run inputs, already projected onto each component's
/// left singular vectors (`[1, x_corrupt] · U`).
#[derive(Debug, Clone)]
pub struct CorruptCache {
    pub tokens: Vec<TokenId>,
    /// Indexed `layer * n_heads + head`.
    pub ov: Vec<Tensor>,
    pub mlp_in: Vec<Tensor>,
    pub mlp_out: Vec<Tensor>,
}

impl CorruptCache {
    pub fn build(model: &MaskedModel, corrupt_tokens: &[TokenId]) -> Result<Self> {
        let cfg = &model.weights.config;
        let (_, cache) = forward(corrupt_tokens, model.weights)?;
        let mut ov = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
        let mut mlp_in = Vec::with_capacity(cfg.n_layers);
        let mut mlp_out = Vec::with_capacity(cfg.n_layers);
        for (l, lc) in cache.layers.iter().enumerate() {
            for h in 0..cfg.n_heads {
                let nu = lc.value_input(h)?.augment_ones();
                ov.push(nu.matmul(&model.comp(ComponentId::ov(l, h)).u)?);
            }
            mlp_in.push(
                lc.ln2_out
                    .augment_ones()
                    .matmul(&model.comp(ComponentId::mlp_in(l)).u)?,
            );
            mlp_out.push(
                lc.mlp_post
                    .augment_ones()
                    .matmul(&model.comp(ComponentId::mlp_out(l)).u)?,
            );
        }
        Ok(CorruptCache {
            tokens: corrupt_tokens.to_vec(),
            ov,
            mlp_in,
            mlp_out,
        })
    }
}

/// One training prompt: clean tokens, the frozen corrupt cache and the clean
/// model's final-position logits.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub clean_tokens: Vec<TokenId>,
    pub corrupt: CorruptCache,
    pub target_logits: Vec<f32>,
}

impl TrainExample {
    pub fn build(model: &MaskedModel, clean: &[TokenId], corrupt: &[TokenId]) -> Result<Self> {
        if clean.len() != corrupt.len() {
            return Err(DlensError::Invalid(format!(
                "clean ({}) and corrupt ({}) sequences differ in length",
                clean.len(),
                corrupt.len()
            )));
        }
        let (logits, _) = forward(clean, model.weights)?;
        Ok(TrainExample {
            clean_tokens: clean.to_vec(),
            corrupt: CorruptCache::build(model, corrupt)?,
            target_logits: logits.row(clean.len() - 1).to_vec(),
        })
    }

    pub fn target_probs(&self) -> Vec<f64> {
        log_softmax64(&self.target_logits).into_iter().map(f64::exp).collect()
    }
}

/// Build examples for `(clean, corrupt)` token pairs in parallel.
pub fn prepare_examples(model: &MaskedModel, pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<Vec<TrainExample>> {
    pairs
        .par_iter()
        .map(|(c, k)| TrainExample::build(model, c, k))
        .collect()
}

/// Node ids of a traced masked forward pass.
#[derive(Debug, Clone)]
pub struct MaskedTrace {
    /// `[1, vocab]` logits at the final position.
    pub logits: NodeId,
    /// Per-head residual writes, indexed `layer * n_heads + head`.
    pub head_writes: Vec<NodeId>,
    pub mlp_outs: Vec<NodeId>,
    pub final_resid: NodeId,
}

/// Graph nodes holding the (clamped) mask value of each trained component.
pub type MaskNodes = BTreeMap<ComponentId, NodeId>;

/// `σ ⊙ m` as a node; `σ` alone when the component is not masked.
fn scaled_sigma(g: &mut Graph, f: &SharedFactors, mask: Option<NodeId>) -> Result<NodeId> {
    let s = g.constant(Tensor::vector(f.sigma.clone()));
    match mask {
        Some(m) => g.mul(s, m),
        None => Ok(s),
    }
}

/// Masked part on the clean input plus complement on the corrupt input:
/// `((c − c̃) ⊙ σ ⊙ m + c̃ ⊙ σ) · Vᵀ`, with `c = [1, x] U`, `c̃ = [1, x̃] U`.
fn complement_apply(
    g: &mut Graph,
    input_aug: NodeId,
    f: &SharedFactors,
    mask: Option<NodeId>,
    c_corrupt: &Tensor,
) -> Result<NodeId> {
    let n = g.value(input_aug).rows();
    if f.sigma.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[n, f.v.rows()])));
    }
    let c = g.matmul_shared(input_aug, &f.u)?;
    let coef = match mask {
        None => {
            let s = g.constant(Tensor::vector(f.sigma.clone()));
            g.mul_row(c, s)?
        }
        Some(m) => {
            let cc = g.constant(c_corrupt.clone());
            let diff = g.sub(c, cc)?;
            let sm = scaled_sigma(g, f, Some(m))?;
            let masked = g.mul_row(diff, sm)?;
            let base = g.constant(c_corrupt.mul_row_vector(&f.sigma)?);
            g.add(masked, base)?
        }
    };
    g.matmul_nt_shared(coef, &f.v)
}

/// Trace the masked model on `tokens`. Components absent from `masks` run
/// with an all-ones mask.
pub fn masked_forward(
    g: &mut Graph,
    model: &MaskedModel,
    tokens: &[TokenId],
    corrupt: &CorruptCache,
    masks: &MaskNodes,
) -> Result<MaskedTrace> {
    let w = model.weights;
    let cfg = &w.config;
    crate::model::check_tokens(tokens, w)?;
    if corrupt.tokens.len() != tokens.len() {
        return Err(DlensError::Invalid(format!(
            "corrupt cache covers {} positions, clean prompt has {}",
            corrupt.tokens.len(),
            tokens.len()
        )));
    }
    if corrupt.ov.len() != cfg.n_layers * cfg.n_heads || corrupt.mlp_in.len() != cfg.n_layers {
        return Err(DlensError::Invalid("corrupt cache does not match the model".into()));
    }
    let n = tokens.len();
    let scale = 1.0 / (cfg.d_head as f32).sqrt();
    let mut resid = g.constant(crate::model::embed(tokens, w));
    let mut head_writes = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
    let mut mlp_outs = Vec::with_capacity(cfg.n_layers);
    for (l, lw) in w.layers.iter().enumerate() {
        let x = g.layer_norm(resid, &lw.ln1_gamma, &lw.ln1_beta, cfg.ln_eps)?;
        let xa = g.augment_ones(x);
        let mut resid_mid = resid;
        for h in 0..cfg.n_heads {
            let qk_id = ComponentId::qk(l, h);
            let qk = model.comp(qk_id);
            let pattern = if qk.sigma.is_empty() {
                let zeros = g.constant(Tensor::zeros(&[n, n]));
                g.softmax_causal(zeros)
            } else {
                let cq = g.matmul_shared(xa, &qk.u)?;
                let ck = g.matmul_shared(xa, &qk.v)?;
                let sm = scaled_sigma(g, qk, masks.get(&qk_id).copied())?;
                let cqs = g.mul_row(cq, sm)?;
                let scores = g.matmul_nt(cqs, ck)?;
                let scores = g.scale(scores, scale);
                g.softmax_causal(scores)
            };
            let nu = g.matmul(pattern, x)?;
            let nu_a = g.augment_ones(nu);
            let ov_id = ComponentId::ov(l, h);
            let y = complement_apply(
                g,
                nu_a,
                model.comp(ov_id),
                masks.get(&ov_id).copied(),
                &corrupt.ov[l * cfg.n_heads + h],
            )?;
            head_writes.push(y);
            resid_mid = g.add(resid_mid, y)?;
        }
        let x2 = g.layer_norm(resid_mid, &lw.ln2_gamma, &lw.ln2_beta, cfg.ln_eps)?;
        let x2a = g.augment_ones(x2);
        let in_id = ComponentId::mlp_in(l);
        let pre = complement_apply(
            g,
            x2a,
            model.comp(in_id),
            masks.get(&in_id).copied(),
            &corrupt.mlp_in[l],
        )?;
        let post = g.gelu(pre);
        let post_a = g.augment_ones(post);
        let out_id = ComponentId::mlp_out(l);
        let out = complement_apply(
            g,
            post_a,
            model.comp(out_id),
            masks.get(&out_id).copied(),
            &corrupt.mlp_out[l],
        )?;
        mlp_outs.push(out);
        resid = g.add(resid_mid, out)?;
    }
    let last = g.select_row(resid, n - 1)?;
    let normed = g.layer_norm(last, &w.lnf_gamma, &w.lnf_beta, cfg.ln_eps)?;
    let logits = g.matmul_nt_shared(normed, &model.unembed)?;
    let b_u = g.constant(Tensor::matrix(1, w.b_u.len(), w.b_u.clone())?);
    let logits = g.add(logits, b_u)?;
    Ok(MaskedTrace {
        logits,
        head_writes,
        mlp_outs,
        final_resid: resid,
    })
}

fn constant_masks(g: &mut Graph, masks: &MaskSet) -> MaskNodes {
    masks
        .all_values()
        .into_iter()
        .map(|(id, v)| (id, g.constant(Tensor::vector(v))))
        .collect()
}

/// Final-position logits of the masked model (no gradients).
pub fn masked_logits(model: &MaskedModel, example: &TrainExample, masks: &MaskSet) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let nodes = constant_masks(&mut g, masks);
    let t = masked_forward(&mut g, model, &example.clean_tokens, &example.corrupt, &nodes)?;
    Ok(g.value(t.logits).data().to_vec())
}

/// `KL(p ‖ p_M)` in nats between two logit vectors, with the probability
/// floor applied to `p_M`. Returns `(kl, clamped_terms)`.
pub fn kl_from_logits(p_logits: &[f32], q_logits: &[f32]) -> (f64, usize) {
    let lp = log_softmax64(p_logits);
    let lq = log_softmax64(q_logits);
    let floor = crate::autodiff::KL_FLOOR.ln();
    let mut clamps = 0;
    let mut kl = 0.0;
    for (a, b) in lp.iter().zip(&lq) {
        let p = a.exp();
        if p > 0.0 {
            let b = if *b < floor {
                clamps += 1;
                floor
            } else {
                *b
            };
            kl += p * (a - b);
        }
    }
    (kl, clamps)
}

/// `mean KL + λ · Σ masks`.
pub fn loss_value(kls: &[f64], masks: &MaskSet, l1_weight: f64) -> f64 {
    let mean = if kls.is_empty() {
        0.0
    } else {
        kls.iter().sum::<f64>() / kls.len() as f64
    };
    mean + l1_weight * masks.l1()
}

#[derive(Debug, Clone, Default)]
pub struct BatchResult {
    /// Per-example KL.
    pub kls: Vec<f64>,
    pub loss: f64,
    /// Gradient of the loss with respect to each raw mask parameter.
    pub grads: BTreeMap<ComponentId, Vec<f32>>,
    pub kl_clamps: usize,
}

/// Loss and gradients over a batch (mean KL plus L1 term).
pub fn batch_loss_and_grad(
    model: &MaskedModel,
    batch: &[&TrainExample],
    masks: &MaskSet,
    l1_weight: f64,
) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(DlensError::Invalid("empty batch".into()));
    }
    let values = masks.all_values();
    let per: Vec<(f64, usize, BTreeMap<ComponentId, Vec<f32>>)> = batch
        .par_iter()
        .map(|ex| -> Result<_> {
            let mut g = Graph::new();
            let nodes: MaskNodes = values
                .iter()
                .map(|(id, v)| (*id, g.parameter(Tensor::vector(v.clone()))))
                .collect();
            let t = masked_forward(&mut g, model, &ex.clean_tokens, &ex.corrupt, &nodes)?;
            let kl = g.kl_to_logits(t.logits, &ex.target_probs())?;
            let kl_value = g.value(kl).item() as f64;
            let grads = g.backward(kl)?;
            let by_id = nodes.iter().map(|(id, n)| (*id, grads[n].data().to_vec())).collect();
            Ok((kl_value, g.kl_clamps(), by_id))
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut acc: BTreeMap<ComponentId, Vec<f64>> =
        values.iter().map(|(id, v)| (*id, vec![l1_weight; v.len()])).collect();
    let mut kls = Vec::with_capacity(per.len());
    let mut clamps = 0;
    for (kl, c, grads) in per {
        kls.push(kl);
        clamps += c;
        for (id, gv) in grads {
            for (a, g) in acc.get_mut(&id).expect("same ids").iter_mut().zip(gv) {
                *a += inv * g as f64;
            }
        }
    }
    let loss = loss_value(&kls, masks, l1_weight);
    if !loss.is_finite() {
        return Err(DlensError::Divergence(format!("loss became {loss}")));
    }
    Ok(BatchResult {
        kls,
        loss,
        grads: acc
            .into_iter()
            .map(|(id, v)| (id, v.into_iter().map(|x| x as f32).collect()))
            .collect(),
        kl_clamps: clamps,
    })
}

/// Per-example KL between the clean model and the masked model.
pub fn evaluate_kl(model: &MaskedModel, examples: &[TrainExample], masks: &MaskSet) -> Result<Vec<f64>> {
    examples
        .par_iter()
        .map(|ex| Ok(kl_from_logits(&ex.target_logits, &masked_logits(model, ex, masks)?).0))
        .collect()
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<ComponentId, Vec<f64>>,
    v: BTreeMap<ComponentId, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut MaskSet, grads: &BTreeMap<ComponentId, Vec<f32>>) {
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (id, p) in params.params.iter_mut() {
            let Some(g) = grads.get(id) else { continue };
            let m = self.m.entry(*id).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(*id).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let gi = g[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mut x = p[i] as f64;
                x -= self.lr * self.weight_decay * x;
                x -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] = x as f32;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_kl: f64,
    pub val_kl: f64,
    pub l1: f64,
    pub n_active: usize,
    pub n_directions: usize,
    /// Fraction of masked directions at or below the activity threshold.
    pub sparsity: f64,
    pub kl_clamps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Masks from the selected epoch.
    pub masks: MaskSet,
    pub best_epoch: usize,
    pub best_val_kl: f64,
    pub history: Vec<EpochRecord>,
    /// Masks after the last epoch run.
    pub final_masks: MaskSet,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Optimise masks. The validation set drives epoch selection; when it is
/// empty the training set is used.
pub fn train(
    model: &MaskedModel,
    train_set: &[TrainExample],
    val_set: &[TrainExample],
    initial: MaskSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(DlensError::Invalid("training set is empty".into()));
    }
    if initial.params.is_empty() {
        return Err(DlensError::Invalid("no masks to train".into()));
    }
    let val_set = if val_set.is_empty() { train_set } else { val_set };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut masks = initial;
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, MaskSet)> = None;
    let mut lowest = f64::INFINITY;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_kls = Vec::with_capacity(train_set.len());
        let mut clamps = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let r = batch_loss_and_grad(model, &batch, &masks, config.l1_weight).map_err(|e| match e {
                DlensError::Divergence(m) => DlensError::Divergence(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
            train_kls.extend(r.kls);
            clamps += r.kl_clamps;
            opt.step(&mut masks, &r.grads);
            masks.project();
            if masks.params.values().flatten().any(|v| !v.is_finite()) {
                return Err(DlensError::Divergence(format!(
                    "epoch {epoch}, batch {b}: mask parameters became non-finite"
                )));
            }
        }
        let val_kl = mean(&evaluate_kl(model, val_set, &masks)?);
        if !val_kl.is_finite() {
            return Err(DlensError::Divergence(format!(
                "epoch {epoch}: validation KL is {val_kl}"
            )));
        }
        let n_active = masks.n_active(ACTIVE_THRESHOLD);
        let n_dir = masks.n_directions();
        let rec = EpochRecord {
            epoch,
            train_kl: mean(&train_kls),
            val_kl,
            l1: masks.l1(),
            n_active,
            n_directions: n_dir,
            sparsity: 1.0 - n_active as f64 / n_dir.max(1) as f64,
            kl_clamps: clamps,
        };
        on_epoch(&rec);
        history.push(rec);
        lowest = lowest.min(val_kl);
        if val_kl <= lowest + config.early_stop_tolerance {
            best = Some((epoch, val_kl, masks.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_kl, best_masks) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        masks: best_masks,
        best_epoch,
        best_val_kl,
        history,
        final_masks: masks,
    })
}
