// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit receptors, conditional direction statistics and scalar-swap
//! interventions on OV singular directions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{ComponentId, Kind, SVDFactors};
use crate::error::{DlensError, Result};
use crate::model::{final_logits, forward, ActivationCache, Weights};
use crate::tensor::{argmax, dot64, Tensor};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    He,
    She,
}

impl Gender {
    pub fn opposite(self) -> Gender {
        match self {
            Gender::He => Gender::She,
            Gender::She => Gender::He,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::He => "he",
            Gender::She => "she",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = DlensError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "he" | "male" | "masculine" => Ok(Gender::He),
            "she" | "female" | "feminine" => Ok(Gender::She),
            other => Err(DlensError::Invalid(format!("unknown gender label {other:?}"))),
        }
    }
}

fn require_ov(f: &SVDFactors, k: usize) -> Result<()> {
    if f.id.kind != Kind::Ov {
        return Err(DlensError::Invalid(format!("{} is not an OV component", f.id)));
    }
    if k >= f.rank() {
        return Err(DlensError::Index(format!(
            "direction {k} out of range for {} (rank {})",
            f.id,
            f.rank()
        )));
    }
    Ok(())
}

/// Fixed vocabulary-space image `v_kᵀ W_U` of an OV direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitReceptor {
    pub layer: usize,
    pub head: usize,
    pub direction: usize,
    pub sigma: f32,
    pub receptor: Vec<f32>,
    /// Token ids by descending receptor value.
    pub top_tokens: Vec<TokenId>,
}

impl LogitReceptor {
    pub fn top(&self, n: usize) -> &[TokenId] {
        &self.top_tokens[..n.min(self.top_tokens.len())]
    }
}

pub fn logit_receptor(f: &SVDFactors, k: usize, weights: &Weights) -> Result<LogitReceptor> {
    require_ov(f, k)?;
    let v = f.v_col(k);
    let receptor = Tensor::matrix(1, v.len(), v)?.matmul_nt(weights.unembed())?.into_data();
    let mut top_tokens: Vec<TokenId> = (0..receptor.len() as TokenId).collect();
    top_tokens.sort_by(|&a, &b| receptor[b as usize].total_cmp(&receptor[a as usize]).then(a.cmp(&b)));
    Ok(LogitReceptor {
        layer: f.id.layer,
        head: f.id.head.unwrap_or(0),
        direction: k,
        sigma: f.sigma[k],
        receptor,
        top_tokens,
    })
}

/// `ν = [1, Σ_j α_ij x_j]` at the final position for the head of `f`.
pub fn final_nu(cache: &ActivationCache, f: &SVDFactors) -> Result<Vec<f32>> {
    let head =
        f.id.head
            .ok_or_else(|| DlensError::Invalid(format!("{} has no head", f.id)))?;
    let lc = cache
        .layers
        .get(f.id.layer)
        .ok_or_else(|| DlensError::Index(format!("layer {} not in cache", f.id.layer)))?;
    let nu = lc.value_input(head)?;
    let mut out = Vec::with_capacity(nu.cols() + 1);
    out.push(1.0);
    out.extend_from_slice(nu.row(nu.rows() - 1));
    Ok(out)
}

/// Scalar `νᵀu_k` at the final position.
pub fn direction_activation(cache: &ActivationCache, f: &SVDFactors, k: usize) -> Result<f64> {
    require_ov(f, k)?;
    Ok(dot64(&final_nu(cache, f)?, &f.u_col(k)))
}

/// Per-gender mean and (population) standard deviation of a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalStats {
    pub mu_he: f64,
    pub mu_she: f64,
    pub std_he: f64,
    pub std_she: f64,
    pub n_he: usize,
    pub n_she: usize,
}

impl ConditionalStats {
    /// He minus she.
    pub fn diff(&self) -> f64 {
        self.mu_he - self.mu_she
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn conditional_means(samples: &[(f64, Gender)]) -> Result<ConditionalStats> {
    let pick = |g: Gender| samples.iter().filter(|s| s.1 == g).map(|s| s.0).collect::<Vec<_>>();
    let (he, she) = (pick(Gender::He), pick(Gender::She));
    for (xs, g) in [(&he, Gender::He), (&she, Gender::She)] {
        if xs.is_empty() {
            return Err(DlensError::EmptyClass(format!("no {g}-context prompts")));
        }
    }
    let (mu_he, std_he) = mean_std(&he);
    let (mu_she, std_she) = mean_std(&she);
    Ok(ConditionalStats {
        mu_he,
        mu_she,
        std_he,
        std_she,
        n_he: he.len(),
        n_she: she.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub layer: usize,
    pub head: usize,
    pub direction: usize,
    pub mu_he: f64,
    pub mu_she: f64,
}

impl Edit {
    pub fn component(&self) -> ComponentId {
        ComponentId::ov(self.layer, self.head)
    }

    /// Replacement activation for a prompt whose context is `target`.
    pub fn replacement(&self, target: Gender) -> f64 {
        match target {
            Gender::He => self.mu_she,
            Gender::She => self.mu_he,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub edits: Vec<Edit>,
    /// Context gender of the prompts being edited.
    pub target: Gender,
    pub sigma_scale: f64,
}

impl InterventionSpec {
    pub fn validate(&self, factors: &BTreeMap<ComponentId, SVDFactors>) -> Result<()> {
        if !(self.sigma_scale >= 0.0 && self.sigma_scale.is_finite()) {
            return Err(DlensError::Invalid(format!(
                "sigma_scale must be finite and non-negative, got {}",
                self.sigma_scale
            )));
        }
        for e in &self.edits {
            let f = factors
                .get(&e.component())
                .ok_or_else(|| DlensError::Invalid(format!("{} is missing from the SVD cache", e.component())))?;
            require_ov(f, e.direction)?;
            if !(e.mu_he.is_finite() && e.mu_she.is_finite()) {
                return Err(DlensError::Invalid(format!("non-finite mean for {}", e.component())));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionResult {
    pub baseline_logits: Vec<f32>,
    pub intervened_logits: Vec<f32>,
    pub delta_r: Vec<f32>,
}

/// `ΔR = Σ (a' − a)·(σ_scale·σ_k)·v_k` from a cached forward pass.
pub fn delta_r(
    cache: &ActivationCache,
    factors: &BTreeMap<ComponentId, SVDFactors>,
    spec: &InterventionSpec,
) -> Result<Vec<f32>> {
    spec.validate(factors)?;
    let d = cache.final_resid.cols();
    let mut acc = vec![0.0f64; d];
    for e in &spec.edits {
        let f = &factors[&e.component()];
        let a = direction_activation(cache, f, e.direction)?;
        let coef = (e.replacement(spec.target) - a) * spec.sigma_scale * f.sigma[e.direction] as f64;
        if coef == 0.0 {
            continue;
        }
        for (s, v) in acc.iter_mut().zip(f.v_col(e.direction)) {
            *s += coef * v as f64;
        }
    }
    Ok(acc.into_iter().map(|x| x as f32).collect())
}

/// Add `ΔR` to the final-position residual before the last LayerNorm and
/// recompute the logits there. Earlier layers are not re-run.
pub fn apply_intervention(
    tokens: &[TokenId],
    weights: &Weights,
    factors: &BTreeMap<ComponentId, SVDFactors>,
    spec: &InterventionSpec,
) -> Result<InterventionResult> {
    let (_, cache) = forward(tokens, weights)?;
    apply_with_cache(&cache, weights, factors, spec)
}

pub fn apply_with_cache(
    cache: &ActivationCache,
    weights: &Weights,
    factors: &BTreeMap<ComponentId, SVDFactors>,
    spec: &InterventionSpec,
) -> Result<InterventionResult> {
    let dr = delta_r(cache, factors, spec)?;
    let last = cache.final_resid.row_tensor(cache.seq_len() - 1);
    let baseline_logits = final_logits(weights, &last)?.into_data();
    let mut edited = last.clone();
    for (x, d) in edited.data_mut().iter_mut().zip(&dr) {
        *x += d;
    }
    let intervened_logits = final_logits(weights, &edited)?.into_data();
    Ok(InterventionResult {
        baseline_logits,
        intervened_logits,
        delta_r: dr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    He,
    She,
    Other,
}

pub fn classify(logits: &[f32], he: TokenId, she: TokenId) -> Prediction {
    let top = argmax(logits) as TokenId;
    if top == he {
        Prediction::He
    } else if top == she {
        Prediction::She
    } else {
        Prediction::Other
    }
}

/// Baseline and intervened outcome for one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PronounOutcome {
    pub context: Gender,
    /// `logit(correct) − logit(opposite)`.
    pub baseline_delta: f64,
    pub intervened_delta: f64,
    pub baseline_pred: Prediction,
    pub intervened_pred: Prediction,
}

impl PronounOutcome {
    pub fn from_logits(context: Gender, baseline: &[f32], intervened: &[f32], he: TokenId, she: TokenId) -> Self {
        let (c, o) = match context {
            Gender::He => (he as usize, she as usize),
            Gender::She => (she as usize, he as usize),
        };
        PronounOutcome {
            context,
            baseline_delta: baseline[c] as f64 - baseline[o] as f64,
            intervened_delta: intervened[c] as f64 - intervened[o] as f64,
            baseline_pred: classify(baseline, he, she),
            intervened_pred: classify(intervened, he, she),
        }
    }
}

/// One row of the intervention table. Flip rates are percentages over the
/// recoverable baseline predictions and `None` when there are none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub experiment: String,
    pub sigma_scale: f64,
    pub prompt_type: Gender,
    pub n: usize,
    pub baseline_dlogit_mean: f64,
    pub baseline_dlogit_std: f64,
    pub interv_dlogit_mean: f64,
    pub interv_dlogit_std: f64,
    pub flip_to_she_pct: Option<f64>,
    pub flip_to_he_pct: Option<f64>,
    pub delta_dlogit: f64,
}

pub fn flip_metrics(experiment: &str, spec: &InterventionSpec, outcomes: &[PronounOutcome]) -> FlipReport {
    let base: Vec<f64> = outcomes.iter().map(|o| o.baseline_delta).collect();
    let int: Vec<f64> = outcomes.iter().map(|o| o.intervened_delta).collect();
    let (bm, bs) = mean_std(&base);
    let (im, is) = mean_std(&int);
    let rate = |from: Prediction, to: Prediction| {
        let denom = outcomes.iter().filter(|o| o.baseline_pred == from).count();
        let hits = outcomes
            .iter()
            .filter(|o| o.baseline_pred == from && o.intervened_pred == to)
            .count();
        (denom > 0).then(|| 100.0 * hits as f64 / denom as f64)
    };
    FlipReport {
        experiment: experiment.to_string(),
        sigma_scale: spec.sigma_scale,
        prompt_type: spec.target,
        n: outcomes.len(),
        baseline_dlogit_mean: bm,
        baseline_dlogit_std: bs,
        interv_dlogit_mean: im,
        interv_dlogit_std: is,
        flip_to_she_pct: rate(Prediction::He, Prediction::She),
        flip_to_he_pct: rate(Prediction::She, Prediction::He),
        delta_dlogit: im - bm,
    }
}

/// Apply `spec` to every prompt of the spec's context gender.
pub fn run_experiment(
    weights: &Weights,
    factors: &BTreeMap<ComponentId, SVDFactors>,
    prompts: &[Vec<TokenId>],
    spec: &InterventionSpec,
    he: TokenId,
    she: TokenId,
) -> Result<Vec<PronounOutcome>> {
    spec.validate(factors)?;
    prompts
        .par_iter()
        .map(|t| {
            let r = apply_intervention(t, weights, factors, spec)?;
            Ok(PronounOutcome::from_logits(
                spec.target,
                &r.baseline_logits,
                &r.intervened_logits,
                he,
                she,
            ))
        })
        .collect()
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "experiment",
    "sigma_scale",
    "prompt_type",
    "n",
    "baseline_dlogit_mean",
    "baseline_dlogit_std",
    "interv_dlogit_mean",
    "interv_dlogit_std",
    "flip_to_she_pct",
    "flip_to_he_pct",
    "delta_dlogit",
];

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with one row per report; undefined flip rates are written as `undefined`.
pub fn reports_to_csv(reports: &[FlipReport]) -> String {
    let opt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.1}"));
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        let row = [
            csv_field(&r.experiment),
            format!("{}", r.sigma_scale),
            r.prompt_type.to_string(),
            r.n.to_string(),
            format!("{:.4}", r.baseline_dlogit_mean),
            format!("{:.4}", r.baseline_dlogit_std),
            format!("{:.4}", r.interv_dlogit_mean),
            format!("{:.4}", r.interv_dlogit_std),
            opt(r.flip_to_she_pct),
            opt(r.flip_to_he_pct),
            format!("{:.4}", r.delta_dlogit),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Which pronoun an OV direction's receptor favours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionGroup {
    Masculine,
    Feminine,
}

/// A gender-discriminative direction with its statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderDirection {
    pub edit: Edit,
    pub group: DirectionGroup,
    pub mask: f32,
    pub stats: ConditionalStats,
}

/// Thresholds and pronoun tokens for [`select_gender_directions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenderSelection {
    pub he: TokenId,
    pub she: TokenId,
    pub min_mask: f32,
    pub min_diff: f64,
}

/// `(component, direction)`.
pub type DirectionKey = (ComponentId, usize);

/// OV directions whose mask is at least `min_mask` and whose conditional
/// means differ by at least `min_diff`. Each is grouped by the sign of
/// `receptor[he] − receptor[she]`.
pub fn select_gender_directions(
    weights: &Weights,
    factors: &BTreeMap<ComponentId, SVDFactors>,
    masks: &BTreeMap<ComponentId, Vec<f32>>,
    stats: &BTreeMap<DirectionKey, ConditionalStats>,
    sel: &GenderSelection,
) -> Result<Vec<GenderDirection>> {
    let GenderSelection {
        he,
        she,
        min_mask,
        min_diff,
    } = *sel;
    let mut out = Vec::new();
    for ((id, k), s) in stats {
        let m = masks.get(id).and_then(|v| v.get(*k)).copied().unwrap_or(0.0);
        if m < min_mask || s.diff().abs() < min_diff {
            continue;
        }
        let f = factors
            .get(id)
            .ok_or_else(|| DlensError::Invalid(format!("{id} missing from the SVD cache")))?;
        let r = logit_receptor(f, *k, weights)?;
        let group = if r.receptor[he as usize] >= r.receptor[she as usize] {
            DirectionGroup::Masculine
        } else {
            DirectionGroup::Feminine
        };
        out.push(GenderDirection {
            edit: Edit {
                layer: id.layer,
                head: id.head.unwrap_or(0),
                direction: *k,
                mu_he: s.mu_he,
                mu_she: s.mu_she,
            },
            group,
            mask: m,
            stats: *s,
        });
    }
    Ok(out)
}

/// Activation of every direction of every OV component at the final
/// position, keyed by `(component, direction)`.
pub fn all_ov_activations(
    cache: &ActivationCache,
    factors: &BTreeMap<ComponentId, SVDFactors>,
) -> Result<BTreeMap<DirectionKey, f64>> {
    let mut out = BTreeMap::new();
    for (id, f) in factors.iter().filter(|(id, _)| id.kind == Kind::Ov) {
        let nu = final_nu(cache, f)?;
        for k in 0..f.rank() {
            out.insert((*id, k), dot64(&nu, &f.u_col(k)));
        }
    }
    Ok(out)
}

/// Conditional statistics of every OV direction over labelled prompts.
pub fn ov_conditional_stats(
    weights: &Weights,
    factors: &BTreeMap<ComponentId, SVDFactors>,
    prompts: &[(Vec<TokenId>, Gender)],
) -> Result<BTreeMap<DirectionKey, ConditionalStats>> {
    let per: Vec<(BTreeMap<DirectionKey, f64>, Gender)> = prompts
        .par_iter()
        .map(|(t, g)| {
            let (_, cache) = forward(t, weights)?;
            Ok((all_ov_activations(&cache, factors)?, *g))
        })
        .collect::<Result<_>>()?;
    let mut samples: BTreeMap<DirectionKey, Vec<(f64, Gender)>> = BTreeMap::new();
    for (acts, g) in per {
        for (key, a) in acts {
            samples.entry(key).or_default().push((a, g));
        }
    }
    samples
        .into_iter()
        .map(|(k, s)| Ok((k, conditional_means(&s)?)))
        .collect()
}
