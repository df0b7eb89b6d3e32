// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{DlensError, Result};
use crate::tensor::{gelu, layer_norm, softmax_rows, Tensor};
use crate::tokenizer::TokenId;

use super::Weights;

/// Activations of one transformer block.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub resid_pre: Tensor,
    /// Post-LayerNorm attention input `x`.
    pub ln1_out: Tensor,
    /// Attention pattern `α` per head, `[seq, seq]`, lower-triangular.
    pub patterns: Vec<Tensor>,
    /// Per-head residual write `y`, including the `b_O / n_heads` share.
    pub head_outputs: Vec<Tensor>,
    pub resid_mid: Tensor,
    pub ln2_out: Tensor,
    pub mlp_pre: Tensor,
    pub mlp_post: Tensor,
    pub mlp_out: Tensor,
    pub resid_post: Tensor,
}

impl LayerCache {
    /// Attention-weighted value input `Σ_j α_ij x_j` for every query row.
    pub fn value_input(&self, head: usize) -> Result<Tensor> {
        self.patterns[head].matmul(&self.ln1_out)
    }
}

#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub tokens: Vec<TokenId>,
    /// Token plus position embedding.
    pub embedding: Tensor,
    pub layers: Vec<LayerCache>,
    /// Residual stream before the final LayerNorm.
    pub final_resid: Tensor,
    pub logits: Tensor,
}

impl ActivationCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Logits at the last position.
    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.seq_len() - 1)
    }
}

pub(crate) fn check_tokens(tokens: &[TokenId], weights: &Weights) -> Result<()> {
    let cfg = &weights.config;
    if tokens.is_empty() {
        return Err(DlensError::Invalid("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_positions {
        return Err(DlensError::Invalid(format!(
            "sequence length {} exceeds max_positions {}",
            tokens.len(),
            cfg.max_positions
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(DlensError::Index(format!(
            "token id {t} outside vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub(crate) fn embed(tokens: &[TokenId], weights: &Weights) -> Tensor {
    let d = weights.config.d_model;
    let mut x = Tensor::zeros(&[tokens.len(), d]);
    for (i, &t) in tokens.iter().enumerate() {
        let te = weights.token_embedding.row(t as usize);
        let pe = weights.position_embedding.row(i);
        for ((o, a), b) in x.row_mut(i).iter_mut().zip(te).zip(pe) {
            *o = a + b;
        }
    }
    x
}

/// Final LayerNorm and unembedding applied to each row of `resid`.
pub fn final_logits(weights: &Weights, resid: &Tensor) -> Result<Tensor> {
    let normed = layer_norm(resid, &weights.lnf_gamma, &weights.lnf_beta, weights.config.ln_eps)?;
    normed.matmul_nt(weights.unembed())?.add_row_vector(&weights.b_u)
}

/// Plain forward pass over one sequence.
pub fn forward(tokens: &[TokenId], weights: &Weights) -> Result<(Tensor, ActivationCache)> {
    check_tokens(tokens, weights)?;
    let cfg = &weights.config;
    let scale = 1.0 / (cfg.d_head as f32).sqrt();
    let b_o_share = 1.0 / cfg.n_heads as f32;
    let embedding = embed(tokens, weights);
    let mut resid = embedding.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lw in &weights.layers {
        let resid_pre = resid;
        let ln1_out = layer_norm(&resid_pre, &lw.ln1_gamma, &lw.ln1_beta, cfg.ln_eps)?;
        let b_o_head: Vec<f32> = lw.attn.b_o.iter().map(|b| b * b_o_share).collect();
        let mut patterns = Vec::with_capacity(cfg.n_heads);
        let mut head_outputs = Vec::with_capacity(cfg.n_heads);
        let mut resid_mid = resid_pre.clone();
        for h in 0..cfg.n_heads {
            let q = ln1_out.matmul(&lw.attn.w_q[h])?.add_row_vector(&lw.attn.b_q[h])?;
            let k = ln1_out.matmul(&lw.attn.w_k[h])?.add_row_vector(&lw.attn.b_k[h])?;
            let v = ln1_out.matmul(&lw.attn.w_v[h])?.add_row_vector(&lw.attn.b_v[h])?;
            let pattern = softmax_rows(&q.matmul_nt(&k)?.scale(scale), true);
            let y = pattern.matmul(&v)?.matmul(&lw.attn.w_o[h])?.add_row_vector(&b_o_head)?;
            resid_mid.add_assign(&y)?;
            patterns.push(pattern);
            head_outputs.push(y);
        }
        let ln2_out = layer_norm(&resid_mid, &lw.ln2_gamma, &lw.ln2_beta, cfg.ln_eps)?;
        let mlp_pre = ln2_out.matmul(&lw.w_in)?.add_row_vector(&lw.b_in)?;
        let mlp_post = gelu(&mlp_pre);
        let mlp_out = mlp_post.matmul(&lw.w_out)?.add_row_vector(&lw.b_out)?;
        let resid_post = resid_mid.add(&mlp_out)?;
        resid_post.ensure_finite("residual stream")?;
        resid = resid_post.clone();
        layers.push(LayerCache {
            resid_pre,
            ln1_out,
            patterns,
            head_outputs,
            resid_mid,
            ln2_out,
            mlp_pre,
            mlp_post,
            mlp_out,
            resid_post,
        });
    }
    let logits = final_logits(weights, &resid)?;
    let cache = ActivationCache {
        tokens: tokens.to_vec(),
        embedding,
        layers,
        final_resid: resid,
        logits: logits.clone(),
    };
    Ok((logits, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{seeded_model, ToyConfig};

    /// Straight-line 64-bit reference using the fused GPT-2 layout directly.
    fn reference_logits(tokens: &[TokenId], w: &Weights) -> Vec<Vec<f64>> {
        let cfg = &w.config;
        let (d, dh, nh) = (cfg.d_model, cfg.d_head, cfg.n_heads);
        let n = tokens.len();
        let ln = |x: &[f64], g: &[f32], b: &[f32]| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
            let s = (var + cfg.ln_eps as f64).sqrt();
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / s * g[i] as f64 + b[i] as f64)
                .collect()
        };
        let affine = |x: &[f64], m: &Tensor, b: &[f32]| -> Vec<f64> {
            (0..m.cols())
                .map(|j| b[j] as f64 + (0..x.len()).map(|i| x[i] * m.at(i, j) as f64).sum::<f64>())
                .collect()
        };
        let mut resid: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..d)
                    .map(|c| w.token_embedding.at(tokens[i] as usize, c) as f64 + w.position_embedding.at(i, c) as f64)
                    .collect()
            })
            .collect();
        for lw in &w.layers {
            let xs: Vec<Vec<f64>> = resid.iter().map(|r| ln(r, &lw.ln1_gamma, &lw.ln1_beta)).collect();
            let mut attn_out = vec![vec![0.0f64; d]; n];
            for h in 0..nh {
                let q: Vec<_> = xs.iter().map(|x| affine(x, &lw.attn.w_q[h], &lw.attn.b_q[h])).collect();
                let k: Vec<_> = xs.iter().map(|x| affine(x, &lw.attn.w_k[h], &lw.attn.b_k[h])).collect();
                let v: Vec<_> = xs.iter().map(|x| affine(x, &lw.attn.w_v[h], &lw.attn.b_v[h])).collect();
                for i in 0..n {
                    let s: Vec<f64> = (0..=i)
                        .map(|j| (0..dh).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = s.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let mut z_head = vec![0.0; dh];
                    for j in 0..=i {
                        for c in 0..dh {
                            z_head[c] += e[j] / z * v[j][c];
                        }
                    }
                    let zero = vec![0.0f32; d];
                    let o = affine(&z_head, &lw.attn.w_o[h], &zero);
                    for c in 0..d {
                        attn_out[i][c] += o[c];
                    }
                }
            }
            for i in 0..n {
                for c in 0..d {
                    resid[i][c] += attn_out[i][c] + lw.attn.b_o[c] as f64;
                }
                let x2 = ln(&resid[i], &lw.ln2_gamma, &lw.ln2_beta);
                let hdn: Vec<f64> = affine(&x2, &lw.w_in, &lw.b_in)
                    .into_iter()
                    .map(|x| {
                        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
                    })
                    .collect();
                let out = affine(&hdn, &lw.w_out, &lw.b_out);
                for c in 0..d {
                    resid[i][c] += out[c];
                }
            }
        }
        resid
            .iter()
            .map(|r| {
                let x = ln(r, &w.lnf_gamma, &w.lnf_beta);
                (0..cfg.vocab_size)
                    .map(|t| w.b_u[t] as f64 + (0..d).map(|c| x[c] * w.unembed().at(t, c) as f64).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn toy() -> Weights {
        seeded_model(&ToyConfig::default(), 7)
    }

    #[test]
    fn matches_reference() {
        let w = toy();
        let tokens = [3, 17, 5, 9, 0, 22];
        let (logits, _) = forward(&tokens, &w).unwrap();
        let reference = reference_logits(&tokens, &w);
        for (i, row) in reference.iter().enumerate() {
            for (j, r) in row.iter().enumerate() {
                assert!((logits.at(i, j) as f64 - r).abs() <= 1e-4, "({i},{j})");
            }
        }
    }

    #[test]
    fn single_token() {
        let w = toy();
        let (logits, cache) = forward(&[4], &w).unwrap();
        assert_eq!(logits.shape(), &[1, w.config.vocab_size]);
        for l in &cache.layers {
            for p in &l.patterns {
                assert_eq!(p.data(), &[1.0]);
            }
        }
    }

    #[test]
    fn causal_and_normalized() {
        let w = toy();
        let a = [1, 2, 3, 4, 5, 6, 7];
        let mut b = a;
        b[4] = 30;
        let (la, ca) = forward(&a, &w).unwrap();
        let (lb, _) = forward(&b, &w).unwrap();
        for i in 0..4 {
            assert_eq!(la.row(i), lb.row(i));
        }
        assert!((4..7).any(|i| la.row(i) != lb.row(i)));
        for l in &ca.layers {
            for p in &l.patterns {
                for i in 0..a.len() {
                    let s: f32 = p.row(i).iter().sum();
                    assert!((s - 1.0).abs() <= 1e-5);
                    assert!(p.row(i)[i + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn residual_bookkeeping() {
        let w = toy();
        let (_, cache) = forward(&[8, 1, 12, 3], &w).unwrap();
        let mut total = cache.embedding.clone();
        for l in &cache.layers {
            let mut expect = l.resid_pre.clone();
            for y in &l.head_outputs {
                expect.add_assign(y).unwrap();
                total.add_assign(y).unwrap();
            }
            expect.add_assign(&l.mlp_out).unwrap();
            total.add_assign(&l.mlp_out).unwrap();
            assert!(expect.max_abs_diff(&l.resid_post) <= 1e-4);
        }
        assert!(total.max_abs_diff(&cache.final_resid) <= 1e-4);
    }

    #[test]
    fn deterministic() {
        let w = toy();
        let t = [2, 4, 6, 8];
        assert_eq!(forward(&t, &w).unwrap().0, forward(&t, &w).unwrap().0);
    }

    #[test]
    fn input_errors() {
        let w = toy();
        assert!(matches!(forward(&[], &w), Err(DlensError::Invalid(_))));
        let long = vec![0; w.config.max_positions + 1];
        assert!(matches!(forward(&long, &w), Err(DlensError::Invalid(_))));
        assert!(matches!(
            forward(&[w.config.vocab_size as u32], &w),
            Err(DlensError::Index(_))
        ));
    }
}
