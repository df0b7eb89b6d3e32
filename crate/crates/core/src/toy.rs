// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small seeded models and vocabularies used as in-repo fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{AttentionWeights, LayerWeights, ModelConfig, Weights};
use crate::tensor::Tensor;
use crate::tokenizer::BpeVocab;

#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for ToyConfig {
    /// 2 layers, 2 heads, `d_model = 16`.
    fn default() -> Self {
        ToyConfig {
            n_layers: 2,
            n_heads: 2,
            d_head: 8,
            d_mlp: 32,
            vocab_size: 48,
            max_positions: 64,
        }
    }
}

impl ToyConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.n_heads * self.d_head,
            d_head: self.d_head,
            d_mlp: self.d_mlp,
            vocab_size: self.vocab_size,
            max_positions: self.max_positions,
            ln_eps: 1e-5,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    // Uniform on [-a, a] has standard deviation a / √3.
    let a = std * 3f32.sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

fn vec_around(rng: &mut ChaCha8Rng, n: usize, center: f32, std: f32) -> Vec<f32> {
    uniform(rng, &[n], std)
        .into_data()
        .into_iter()
        .map(|v| v + center)
        .collect()
}

/// Randomly initialised model with non-trivial biases and LayerNorm affines.
pub fn seeded_model(cfg: &ToyConfig, seed: u64) -> Weights {
    let mc = cfg.model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, dh, dm, v) = (mc.d_model, mc.d_head, mc.d_mlp, mc.vocab_size);
    let wstd = 1.0 / (d as f32).sqrt();
    let token_embedding = uniform(&mut rng, &[v, d], 1.0);
    let position_embedding = uniform(&mut rng, &[mc.max_positions, d], 0.3);
    let layers = (0..mc.n_layers)
        .map(|_| {
            let mut attn = AttentionWeights {
                w_q: vec![],
                w_k: vec![],
                w_v: vec![],
                b_q: vec![],
                b_k: vec![],
                b_v: vec![],
                w_o: vec![],
                b_o: vec_around(&mut rng, d, 0.0, 0.1),
            };
            for _ in 0..mc.n_heads {
                attn.w_q.push(uniform(&mut rng, &[d, dh], 2.0 * wstd));
                attn.w_k.push(uniform(&mut rng, &[d, dh], 2.0 * wstd));
                attn.w_v.push(uniform(&mut rng, &[d, dh], wstd));
                attn.b_q.push(vec_around(&mut rng, dh, 0.0, 0.2));
                attn.b_k.push(vec_around(&mut rng, dh, 0.0, 0.2));
                attn.b_v.push(vec_around(&mut rng, dh, 0.0, 0.1));
                attn.w_o.push(uniform(&mut rng, &[dh, d], 1.0 / (dh as f32).sqrt()));
            }
            LayerWeights {
                ln1_gamma: vec_around(&mut rng, d, 1.0, 0.1),
                ln1_beta: vec_around(&mut rng, d, 0.0, 0.1),
                attn,
                ln2_gamma: vec_around(&mut rng, d, 1.0, 0.1),
                ln2_beta: vec_around(&mut rng, d, 0.0, 0.1),
                w_in: uniform(&mut rng, &[d, dm], wstd),
                b_in: vec_around(&mut rng, dm, 0.0, 0.1),
                w_out: uniform(&mut rng, &[dm, d], 1.0 / (dm as f32).sqrt()),
                b_out: vec_around(&mut rng, d, 0.0, 0.1),
            }
        })
        .collect();
    Weights {
        config: mc,
        token_embedding,
        position_embedding,
        layers,
        lnf_gamma: vec_around(&mut rng, d, 1.0, 0.1),
        lnf_beta: vec_around(&mut rng, d, 0.0, 0.1),
        unembed_rows: None,
        b_u: vec![0.0; v],
    }
}

/// BPE vocabulary in which every name, pronoun, noun and number used by the
/// task generators is a single token.
pub fn task_vocab() -> Result<BpeVocab> {
    BpeVocab::with_word_chains(&crate::tasks::vocabulary_words())
}

/// Seeded toy model sized to [`task_vocab`].
pub fn task_model(seed: u64) -> Result<(Weights, BpeVocab)> {
    let vocab = task_vocab()?;
    let cfg = ToyConfig {
        vocab_size: vocab.vocab_size(),
        ..ToyConfig::default()
    };
    Ok((seeded_model(&cfg, seed), vocab))
}

/// Copy of `weights` with every query and key projection zeroed, so all
/// heads attend uniformly over the causal prefix.
pub fn with_uniform_attention(weights: &Weights) -> Weights {
    let mut w = weights.clone();
    for l in &mut w.layers {
        for t in l.attn.w_q.iter_mut().chain(l.attn.w_k.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for b in l.attn.b_q.iter_mut().chain(l.attn.b_k.iter_mut()) {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    w
}

/// Unit-norm, zero-mean row `i` (1..16) of the 16×16 Sylvester Hadamard matrix.
fn hadamard_row(i: usize) -> Vec<f32> {
    (0..16)
        .map(|j| {
            if (i & j).count_ones().is_multiple_of(2) {
                0.25
            } else {
                -0.25
            }
        })
        .collect()
}

/// One-layer model with a single label-carrying OV direction.
///
/// Head 0 attends uniformly. Its OV matrix is `σ_s·u_s·v_sᵀ + σ_d·u_d·v_dᵀ`:
/// the signal direction reads the label feature and writes the answer axis,
/// the distractor reads a filler feature and writes an axis the unembedding
/// ignores. Head 1 has a random QK circuit over filler features and no OV
/// write; the MLP is zero.
#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub weights: Weights,
    /// Label tokens `[A, B]`.
    pub labels: [u32; 2],
    /// Answer for label A and for label B.
    pub answers: [u32; 2],
    pub fillers: Vec<u32>,
    pub query: u32,
    /// Residual-space read and write vectors of the two planted directions.
    pub signal_read: Vec<f32>,
    pub signal_write: Vec<f32>,
    pub distractor_read: Vec<f32>,
    pub distractor_write: Vec<f32>,
}

/// A planted clean prompt, its label-flipped corruption and the answer.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedPrompt {
    pub clean: Vec<u32>,
    pub corrupt: Vec<u32>,
    pub answer: u32,
    pub foil: u32,
}

impl PlantedTask {
    pub const SEQ_LEN: usize = 6;

    pub fn new(seed: u64) -> Self {
        let cfg = ToyConfig {
            n_layers: 1,
            ..ToyConfig::default()
        };
        let mc = cfg.model_config();
        let (d, dh, dm, v) = (mc.d_model, mc.d_head, mc.d_mlp, mc.vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h: Vec<Vec<f32>> = (0..16).map(hadamard_row).collect();
        let axpy = |acc: &mut [f32], a: f32, x: &[f32]| {
            acc.iter_mut().zip(x).for_each(|(s, xi)| *s += a * xi);
        };
        let (labels, answers, query) = ([1u32, 2], [3u32, 4], 5u32);
        let fillers: Vec<u32> = (10..20).collect();

        let mut emb = Tensor::zeros(&[v, d]);
        for (k, &t) in labels.iter().enumerate() {
            let row = emb.row_mut(t as usize);
            axpy(row, 1.0, &h[6]);
            axpy(row, if k == 0 { 1.0 } else { -1.0 }, &h[1]);
        }
        for &t in &fillers {
            let row = emb.row_mut(t as usize);
            axpy(row, rng.random_range(0.5..1.5), &h[3]);
            for &j in &[7, 8, 9, 10] {
                axpy(row, rng.random_range(-1.0..1.0), &h[j]);
            }
        }
        axpy(emb.row_mut(query as usize), 1.0, &h[11]);
        axpy(emb.row_mut(query as usize), 1.0, &h[12]);
        for t in 0..v as u32 {
            if !labels.contains(&t) && !fillers.contains(&t) && t != query {
                for &j in &[13, 14, 15] {
                    axpy(emb.row_mut(t as usize), rng.random_range(-1.0..1.0), &h[j]);
                }
            }
        }

        let (sigma_s, sigma_d) = (6.0f32, 4.0f32);
        let mut w_v0 = Tensor::zeros(&[d, dh]);
        let mut w_o0 = Tensor::zeros(&[dh, d]);
        for i in 0..d {
            w_v0.row_mut(i)[0] = h[1][i];
            w_v0.row_mut(i)[1] = h[3][i];
        }
        axpy(w_o0.row_mut(0), sigma_s, &h[2]);
        axpy(w_o0.row_mut(1), sigma_d, &h[4]);

        let mut w_q1 = Tensor::zeros(&[d, dh]);
        let mut w_k1 = Tensor::zeros(&[d, dh]);
        for c in 0..dh {
            let (a, b) = (rng.random_range(-1.0..1.0f32), rng.random_range(-1.0..1.0f32));
            for (j, &f) in [3usize, 7, 8].iter().enumerate() {
                let s = (j as f32 + 1.0) / 3.0;
                for i in 0..d {
                    w_q1.row_mut(i)[c] += a * s * h[f][i];
                    w_k1.row_mut(i)[c] += b * s * h[f][i];
                }
            }
        }

        let zeros_dh = || vec![0.0f32; dh];
        let attn = AttentionWeights {
            w_q: vec![Tensor::zeros(&[d, dh]), w_q1],
            w_k: vec![Tensor::zeros(&[d, dh]), w_k1],
            w_v: vec![w_v0, Tensor::zeros(&[d, dh])],
            b_q: vec![zeros_dh(), zeros_dh()],
            b_k: vec![zeros_dh(), zeros_dh()],
            b_v: vec![zeros_dh(), zeros_dh()],
            w_o: vec![w_o0, Tensor::zeros(&[dh, d])],
            b_o: vec![0.0; d],
        };
        let layer = LayerWeights {
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            attn,
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
            w_in: Tensor::zeros(&[d, dm]),
            b_in: vec![0.0; dm],
            w_out: Tensor::zeros(&[dm, d]),
            b_out: vec![0.0; d],
        };
        let mut unembed = Tensor::zeros(&[v, d]);
        axpy(unembed.row_mut(answers[0] as usize), 1.0, &h[2]);
        axpy(unembed.row_mut(answers[1] as usize), -1.0, &h[2]);
        let weights = Weights {
            config: mc.clone(),
            token_embedding: emb,
            position_embedding: Tensor::zeros(&[mc.max_positions, d]),
            layers: vec![layer],
            lnf_gamma: vec![1.0; d],
            lnf_beta: vec![0.0; d],
            unembed_rows: Some(unembed),
            b_u: vec![0.0; v],
        };
        PlantedTask {
            weights,
            labels,
            answers,
            fillers,
            query,
            signal_read: h[1].clone(),
            signal_write: h[2].clone(),
            distractor_read: h[3].clone(),
            distractor_write: h[4].clone(),
        }
    }

    /// `n` prompts of fillers with one label token and a trailing query
    /// token; the corruption swaps the label.
    pub fn prompts(&self, n: usize, seed: u64) -> Vec<PlantedPrompt> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let k = rng.random_range(0..2usize);
                let pos = rng.random_range(0..Self::SEQ_LEN - 1);
                let mut clean: Vec<u32> = (0..Self::SEQ_LEN - 1)
                    .map(|_| self.fillers[rng.random_range(0..self.fillers.len())])
                    .collect();
                clean.push(self.query);
                let mut corrupt = clean.clone();
                clean[pos] = self.labels[k];
                corrupt[pos] = self.labels[1 - k];
                PlantedPrompt {
                    clean,
                    corrupt,
                    answer: self.answers[k],
                    foil: self.answers[1 - k],
                }
            })
            .collect()
    }
}
