// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bias-folded augmented matrices, their singular value decompositions and
//! the reconstructions used by masking and analysis.

mod svd;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{DlensError, Result};
use crate::model::Weights;
use crate::tensor::Tensor;

use svd::{svd64, svd64_factored, ColMat, Svd64};

/// Default relative rank tolerance.
pub const DEFAULT_RANK_TOL: f32 = 1e-6;

pub const SIGN_CONVENTION: &str = "max_abs_u_positive";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Qk,
    Ov,
    MlpIn,
    MlpOut,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Qk, Kind::Ov, Kind::MlpIn, Kind::MlpOut];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Qk => "qk",
            Kind::Ov => "ov",
            Kind::MlpIn => "mlp_in",
            Kind::MlpOut => "mlp_out",
        }
    }

    pub fn per_head(self) -> bool {
        matches!(self, Kind::Qk | Kind::Ov)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Kind {
    type Err = DlensError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qk" => Ok(Kind::Qk),
            "ov" => Ok(Kind::Ov),
            "mlp_in" | "mlp-in" | "in" => Ok(Kind::MlpIn),
            "mlp_out" | "mlp-out" | "out" => Ok(Kind::MlpOut),
            other => Err(DlensError::Invalid(format!(
                "unknown component kind `{other}` (expected qk, ov, mlp_in or mlp_out)"
            ))),
        }
    }
}

/// One decomposed component: `(layer, kind, head)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId {
    pub layer: usize,
    pub kind: Kind,
    pub head: Option<usize>,
}

impl ComponentId {
    pub fn new(kind: Kind, layer: usize, head: Option<usize>) -> Result<Self> {
        match (kind.per_head(), head) {
            (true, None) => Err(DlensError::Invalid(format!("{kind} component requires a head index"))),
            (false, Some(_)) => Err(DlensError::Invalid(format!("{kind} component takes no head index"))),
            _ => Ok(ComponentId { layer, kind, head }),
        }
    }

    pub fn qk(layer: usize, head: usize) -> Self {
        ComponentId {
            layer,
            kind: Kind::Qk,
            head: Some(head),
        }
    }

    pub fn ov(layer: usize, head: usize) -> Self {
        ComponentId {
            layer,
            kind: Kind::Ov,
            head: Some(head),
        }
    }

    pub fn mlp_in(layer: usize) -> Self {
        ComponentId {
            layer,
            kind: Kind::MlpIn,
            head: None,
        }
    }

    pub fn mlp_out(layer: usize) -> Self {
        ComponentId {
            layer,
            kind: Kind::MlpOut,
            head: None,
        }
    }

    /// File-system and archive key, e.g. `qk_l9_h6` or `mlp_in_l3`.
    pub fn key(&self) -> String {
        match self.head {
            Some(h) => format!("{}_l{}_h{}", self.kind, self.layer, h),
            None => format!("{}_l{}", self.kind, self.layer),
        }
    }

    pub fn parse_key(key: &str) -> Result<Self> {
        let bad = || DlensError::Format(format!("malformed component key `{key}`"));
        let (kind_part, rest) = key.split_once("_l").ok_or_else(bad)?;
        let kind: Kind = kind_part.parse().map_err(|_| bad())?;
        let (layer, head) = match rest.split_once("_h") {
            Some((l, h)) => (l.parse().map_err(|_| bad())?, Some(h.parse().map_err(|_| bad())?)),
            None => (rest.parse().map_err(|_| bad())?, None),
        };
        ComponentId::new(kind, layer, head).map_err(|_| bad())
    }

    /// Every component of a model for the given kinds, in canonical order.
    pub fn all(n_layers: usize, n_heads: usize, kinds: &[Kind]) -> Vec<ComponentId> {
        let mut out = Vec::new();
        for layer in 0..n_layers {
            for &kind in &Kind::ALL {
                if !kinds.contains(&kind) {
                    continue;
                }
                if kind.per_head() {
                    out.extend((0..n_heads).map(|h| ComponentId {
                        layer,
                        kind,
                        head: Some(h),
                    }));
                } else {
                    out.push(ComponentId {
                        layer,
                        kind,
                        head: None,
                    });
                }
            }
        }
        out
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.head {
            Some(h) => write!(f, "L{}.H{}.{}", self.layer, h, self.kind.as_str().to_uppercase()),
            None => write!(f, "L{}.{}", self.layer, self.kind.as_str().to_uppercase()),
        }
    }
}

/// Bias-folded matrix acting on one-augmented row vectors `[1, x]`.
#[derive(Debug, Clone)]
pub struct AugmentedMatrix {
    pub id: ComponentId,
    pub matrix: Tensor,
    /// Thin factors `(L, R)` with `matrix = L · Rᵀ`, when the matrix is a
    /// low-rank product.
    pub factors: Option<(Tensor, Tensor)>,
}

fn check_indices(weights: &Weights, id: &ComponentId) -> Result<()> {
    let cfg = &weights.config;
    if id.layer >= cfg.n_layers {
        return Err(DlensError::Index(format!(
            "layer {} out of range (n_layers {})",
            id.layer, cfg.n_layers
        )));
    }
    if let Some(h) = id.head {
        if h >= cfg.n_heads {
            return Err(DlensError::Index(format!(
                "head {h} out of range (n_heads {})",
                cfg.n_heads
            )));
        }
    }
    Ok(())
}

/// Prepend a bias row to a weight matrix.
fn bias_row(bias: &[f32], w: &Tensor) -> Result<Tensor> {
    Tensor::vstack(&[&Tensor::matrix(1, bias.len(), bias.to_vec())?, w])
}

pub fn build_augmented(weights: &Weights, kind: Kind, layer: usize, head: Option<usize>) -> Result<AugmentedMatrix> {
    let id = ComponentId::new(kind, layer, head)?;
    check_indices(weights, &id)?;
    let lw = &weights.layers[layer];
    let n_heads = weights.config.n_heads as f32;
    match kind {
        Kind::Qk => {
            let h = head.unwrap_or_default();
            let a = bias_row(&lw.attn.b_q[h], &lw.attn.w_q[h])?;
            let b = bias_row(&lw.attn.b_k[h], &lw.attn.w_k[h])?;
            Ok(AugmentedMatrix {
                id,
                matrix: a.matmul_nt(&b)?,
                factors: Some((a, b)),
            })
        }
        Kind::Ov => {
            let h = head.unwrap_or_default();
            let (d, dh) = (weights.config.d_model, weights.config.d_head);
            // C = [[b_V, 1], [W_V, 0]], D = [[W_O], [b_O / H]]; OV = C · D.
            let mut c = Tensor::zeros(&[1 + d, dh + 1]);
            c.row_mut(0)[..dh].copy_from_slice(&lw.attn.b_v[h]);
            c.row_mut(0)[dh] = 1.0;
            for i in 0..d {
                c.row_mut(i + 1)[..dh].copy_from_slice(lw.attn.w_v[h].row(i));
            }
            let share: Vec<f32> = lw.attn.b_o.iter().map(|b| b / n_heads).collect();
            let dmat = Tensor::vstack(&[&lw.attn.w_o[h], &Tensor::matrix(1, d, share)?])?;
            Ok(AugmentedMatrix {
                id,
                matrix: c.matmul(&dmat)?,
                factors: Some((c, dmat.transpose())),
            })
        }
        Kind::MlpIn => Ok(AugmentedMatrix {
            id,
            matrix: bias_row(&lw.b_in, &lw.w_in)?,
            factors: None,
        }),
        Kind::MlpOut => Ok(AugmentedMatrix {
            id,
            matrix: bias_row(&lw.b_out, &lw.w_out)?,
            factors: None,
        }),
    }
}

/// Truncated thin SVD `U · diag(σ) · Vᵀ` of an augmented matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SVDFactors {
    pub id: ComponentId,
    /// `[m, r]`.
    pub u: Tensor,
    /// `[r]`, non-increasing.
    pub sigma: Vec<f32>,
    /// `[n, r]`.
    pub v: Tensor,
    pub rank_tol: f32,
    /// `min(m, n)` of the source matrix, before truncation.
    pub full_dim: usize,
}

impl SVDFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn u_col(&self, k: usize) -> Vec<f32> {
        self.u.column(k)
    }

    pub fn v_col(&self, k: usize) -> Vec<f32> {
        self.v.column(k)
    }

    pub fn reconstruct(&self) -> Result<Tensor> {
        self.u.mul_row_vector(&self.sigma)?.matmul_nt(&self.v)
    }

    fn check_direction(&self, k: usize) -> Result<()> {
        if k >= self.rank() {
            return Err(DlensError::Index(format!(
                "direction {k} out of range for {} (rank {})",
                self.id,
                self.rank()
            )));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &[f32]) -> Result<()> {
        if mask.len() != self.rank() {
            return Err(DlensError::Shape(format!(
                "mask length {} != rank {} of {}",
                mask.len(),
                self.rank(),
                self.id
            )));
        }
        if let Some(m) = mask.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(DlensError::Invalid(format!("mask value {m} outside [0, 1]")));
        }
        Ok(())
    }
}

fn to_tensor(c: &ColMat) -> Tensor {
    let (m, r) = (c.rows, c.ncols());
    let mut data = vec![0.0f32; m * r];
    for (j, col) in c.cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * r + j] = v as f32;
        }
    }
    Tensor::new(vec![m, r], data).expect("dimensions agree")
}

fn col_mat(t: &Tensor) -> ColMat {
    ColMat::from_row_major(t.rows(), t.cols(), t.data())
}

/// Flip each `(u_k, v_k)` pair so the largest-magnitude entry of `u_k` is
/// positive (first index wins ties).
fn apply_sign_convention(s: &mut Svd64) {
    for k in 0..s.sigma.len() {
        let col = &s.u.cols[k];
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            s.u.cols[k].iter_mut().for_each(|v| *v = -*v);
            s.v.cols[k].iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// Thin SVD of a row-major matrix in 64-bit arithmetic, truncated at
/// `σ_k < rank_tol · σ_1`. Returns `(U, σ, V)`.
pub fn svd_matrix(m: &Tensor, rank_tol: f32) -> Result<(Tensor, Vec<f32>, Tensor)> {
    let mut s = svd64(&col_mat(m), rank_tol as f64)?;
    apply_sign_convention(&mut s);
    Ok((
        to_tensor(&s.u),
        s.sigma.iter().map(|&v| v as f32).collect(),
        to_tensor(&s.v),
    ))
}

pub fn svd(aug: &AugmentedMatrix, rank_tol: f32) -> Result<SVDFactors> {
    if !(0.0..1.0).contains(&rank_tol) {
        return Err(DlensError::Invalid(format!("rank_tol {rank_tol} outside [0, 1)")));
    }
    aug.matrix.ensure_finite(&format!("augmented matrix {}", aug.id))?;
    let mut s = match &aug.factors {
        Some((l, r)) => svd64_factored(&col_mat(l), &col_mat(r), rank_tol as f64)?,
        None => svd64(&col_mat(&aug.matrix), rank_tol as f64)?,
    };
    apply_sign_convention(&mut s);
    Ok(SVDFactors {
        id: aug.id,
        u: to_tensor(&s.u),
        sigma: s.sigma.iter().map(|&v| v as f32).collect(),
        v: to_tensor(&s.v),
        rank_tol,
        full_dim: aug.matrix.rows().min(aug.matrix.cols()),
    })
}

/// `U · diag(σ ⊙ weights) · Vᵀ`.
fn weighted_reconstruct(f: &SVDFactors, w: &[f32]) -> Result<Tensor> {
    let s: Vec<f32> = f.sigma.iter().zip(w).map(|(s, m)| s * m).collect();
    f.u.mul_row_vector(&s)?.matmul_nt(&f.v)
}

pub fn masked_reconstruct(f: &SVDFactors, mask: &[f32]) -> Result<Tensor> {
    f.check_mask(mask)?;
    weighted_reconstruct(f, mask)
}

pub fn complement_reconstruct(f: &SVDFactors, mask: &[f32]) -> Result<Tensor> {
    f.check_mask(mask)?;
    let comp: Vec<f32> = mask.iter().map(|m| 1.0 - m).collect();
    weighted_reconstruct(f, &comp)
}

/// Score of one QK direction between a query and a key residual vector:
/// `[1, x_i] · σ_k u_k v_kᵀ · [1, x_j]ᵀ`.
pub fn direction_attention_score(f: &SVDFactors, k: usize, x_i: &[f32], x_j: &[f32]) -> Result<f32> {
    if f.id.kind != Kind::Qk {
        return Err(DlensError::Invalid(format!("{} is not a QK component", f.id)));
    }
    f.check_direction(k)?;
    let d = f.u.rows() - 1;
    if x_i.len() != d || x_j.len() != d {
        return Err(DlensError::Shape(format!(
            "residual vectors must have length {d}, got {} and {}",
            x_i.len(),
            x_j.len()
        )));
    }
    let proj = |m: &Tensor, x: &[f32]| -> f64 {
        m.at(0, k) as f64
            + x.iter()
                .enumerate()
                .map(|(i, &v)| v as f64 * m.at(i + 1, k) as f64)
                .sum::<f64>()
    };
    Ok((proj(&f.u, x_i) * f.sigma[k] as f64 * proj(&f.v, x_j)) as f32)
}

/// Scores of direction `k` from one query against every row of `keys`.
pub fn direction_scores(f: &SVDFactors, k: usize, x_i: &[f32], keys: &Tensor) -> Result<Vec<f32>> {
    (0..keys.rows())
        .map(|j| direction_attention_score(f, k, x_i, keys.row(j)))
        .collect()
}

/// Decompose every requested component, in parallel.
pub fn decompose_all(weights: &Weights, kinds: &[Kind], rank_tol: f32) -> Result<Vec<SVDFactors>> {
    let ids = ComponentId::all(weights.config.n_layers, weights.config.n_heads, kinds);
    ids.par_iter()
        .map(|id| svd(&build_augmented(weights, id.kind, id.layer, id.head)?, rank_tol))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    kind: Kind,
    layer: usize,
    head: Option<usize>,
    rank_tol: f32,
    sign_convention: String,
    rank: usize,
    full_dim: usize,
}

/// On-disk SVD cache: one archive (`U`, `sigma`, `V`) plus one JSON sidecar
/// per component.
pub fn save_factors(dir: &Path, f: &SVDFactors) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DlensError::io(dir, e))?;
    let mut a = Archive::new();
    a.insert("U", f.u.clone());
    a.insert("sigma", Tensor::vector(f.sigma.clone()));
    a.insert("V", f.v.clone());
    a.write(&dir.join(format!("{}.safetensors", f.id.key())))?;
    let side = Sidecar {
        kind: f.id.kind,
        layer: f.id.layer,
        head: f.id.head,
        rank_tol: f.rank_tol,
        sign_convention: SIGN_CONVENTION.into(),
        rank: f.rank(),
        full_dim: f.full_dim,
    };
    let p = dir.join(format!("{}.json", f.id.key()));
    std::fs::write(&p, serde_json::to_string_pretty(&side)?).map_err(|e| DlensError::io(&p, e))
}

pub fn load_factors(dir: &Path, id: &ComponentId) -> Result<SVDFactors> {
    let sp = dir.join(format!("{}.json", id.key()));
    let raw = std::fs::read_to_string(&sp).map_err(|e| DlensError::io(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&raw)?;
    if (side.kind, side.layer, side.head) != (id.kind, id.layer, id.head) {
        return Err(DlensError::Format(format!(
            "sidecar {} describes a different component",
            sp.display()
        )));
    }
    let mut a = Archive::read(&dir.join(format!("{}.safetensors", id.key())))?;
    let f = SVDFactors {
        id: *id,
        u: a.take("U")?,
        sigma: a.take("sigma")?.into_data(),
        v: a.take("V")?,
        rank_tol: side.rank_tol,
        full_dim: side.full_dim,
    };
    if f.u.cols() != f.rank() || f.v.cols() != f.rank() || f.rank() != side.rank {
        return Err(DlensError::Shape(format!("inconsistent factor shapes for {id}")));
    }
    Ok(f)
}

/// Every component found in a cache directory, keyed by id.
pub fn load_cache(dir: &Path) -> Result<BTreeMap<ComponentId, SVDFactors>> {
    let entries = std::fs::read_dir(dir).map_err(|e| DlensError::io(dir, e))?;
    let mut out = BTreeMap::new();
    for e in entries {
        let path = e.map_err(|e| DlensError::io(dir, e))?.path();
        if path.extension().and_then(|s| s.to_str()) != Some("json") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Ok(id) = ComponentId::parse_key(stem) else { continue };
        out.insert(id, load_factors(dir, &id)?);
    }
    Ok(out)
}
