// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2-class decoder: configuration, frozen weights and the plain forward
//! pass with a full activation cache.

mod forward;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{sha256_hex, tensor_checksum, Archive};
use crate::error::{DlensError, Result};
use crate::tensor::Tensor;

pub(crate) use forward::{check_tokens, embed};
pub use forward::{final_logits, forward, ActivationCache, LayerCache};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub ln_eps: f32,
}

impl ModelConfig {
    /// GPT-2 Small (124M).
    pub fn gpt2_small() -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_head: 64,
            d_mlp: 3072,
            vocab_size: 50257,
            max_positions: 1024,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.n_layers == 0 || self.d_model == 0 {
            return Err(DlensError::Invalid("model dimensions must be positive".into()));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(DlensError::Invalid(format!(
                "d_model {} != n_heads {} × d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        Ok(())
    }

    /// Parse a Hugging Face style GPT-2 `config.json`.
    pub fn from_hf_json(raw: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Hf {
            n_layer: usize,
            n_head: usize,
            n_embd: usize,
            n_positions: usize,
            vocab_size: usize,
            #[serde(default)]
            n_inner: Option<usize>,
            #[serde(default = "default_eps")]
            layer_norm_epsilon: f32,
        }
        fn default_eps() -> f32 {
            1e-5
        }
        let hf: Hf = serde_json::from_str(raw)?;
        if hf.n_head == 0 || !hf.n_embd.is_multiple_of(hf.n_head) {
            return Err(DlensError::Invalid(format!(
                "n_embd {} not divisible by n_head {}",
                hf.n_embd, hf.n_head
            )));
        }
        let cfg = ModelConfig {
            n_layers: hf.n_layer,
            n_heads: hf.n_head,
            d_model: hf.n_embd,
            d_head: hf.n_embd / hf.n_head,
            d_mlp: hf.n_inner.unwrap_or(4 * hf.n_embd),
            vocab_size: hf.vocab_size,
            max_positions: hf.n_positions,
            ln_eps: hf.layer_norm_epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_hf_json(&self) -> String {
        serde_json::json!({
            "model_type": "gpt2",
            "n_layer": self.n_layers,
            "n_head": self.n_heads,
            "n_embd": self.d_model,
            "n_inner": self.d_mlp,
            "n_positions": self.max_positions,
            "vocab_size": self.vocab_size,
            "layer_norm_epsilon": self.ln_eps,
        })
        .to_string()
    }
}

/// Per-head attention weights, oriented for row-vector inputs
/// (`q = x·W_Q + b_Q`).
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    /// `[d_model, d_head]` per head.
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    /// `[d_head]` per head.
    pub b_q: Vec<Vec<f32>>,
    pub b_k: Vec<Vec<f32>>,
    pub b_v: Vec<Vec<f32>>,
    /// `[d_head, d_model]` per head.
    pub w_o: Vec<Tensor>,
    /// `[d_model]`, shared by all heads.
    pub b_o: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gamma: Vec<f32>,
    pub ln1_beta: Vec<f32>,
    pub attn: AttentionWeights,
    pub ln2_gamma: Vec<f32>,
    pub ln2_beta: Vec<f32>,
    /// `[d_model, d_mlp]`.
    pub w_in: Tensor,
    pub b_in: Vec<f32>,
    /// `[d_mlp, d_model]`.
    pub w_out: Tensor,
    pub b_out: Vec<f32>,
}

/// Frozen model parameters.
#[derive(Debug, Clone)]
pub struct Weights {
    pub config: ModelConfig,
    /// `[vocab, d_model]`.
    pub token_embedding: Tensor,
    /// `[max_positions, d_model]`.
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_gamma: Vec<f32>,
    pub lnf_beta: Vec<f32>,
    /// Unembedding as `[vocab, d_model]` rows; `None` ties it to the token
    /// embedding.
    pub unembed_rows: Option<Tensor>,
    /// `[vocab]`; all zeros for stock GPT-2.
    pub b_u: Vec<f32>,
}

/// Names of every tensor the loader requires, in GPT-2 checkpoint naming.
pub fn required_tensor_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = vec!["wte.weight".to_string(), "wpe.weight".to_string()];
    for l in 0..cfg.n_layers {
        for suffix in [
            "ln_1.weight",
            "ln_1.bias",
            "attn.c_attn.weight",
            "attn.c_attn.bias",
            "attn.c_proj.weight",
            "attn.c_proj.bias",
            "ln_2.weight",
            "ln_2.bias",
            "mlp.c_fc.weight",
            "mlp.c_fc.bias",
            "mlp.c_proj.weight",
            "mlp.c_proj.bias",
        ] {
            names.push(format!("h.{l}.{suffix}"));
        }
    }
    names.push("ln_f.weight".into());
    names.push("ln_f.bias".into());
    names
}

fn expect_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(DlensError::Shape(format!(
            "tensor `{name}` has shape {:?}, expected {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(())
}

impl Weights {
    /// Word-unembedding matrix as `[vocab, d_model]` rows.
    pub fn unembed(&self) -> &Tensor {
        self.unembed_rows.as_ref().unwrap_or(&self.token_embedding)
    }

    /// Unpack a GPT-2 checkpoint archive. A `transformer.` name prefix is
    /// accepted; fused `c_attn` projections are split into per-head slices.
    pub fn from_archive(archive: &Archive, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let prefixed =
            !archive.tensors.contains_key("wte.weight") && archive.tensors.contains_key("transformer.wte.weight");
        let get = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let full = if prefixed {
                format!("transformer.{name}")
            } else {
                name.to_string()
            };
            let t = archive
                .tensors
                .get(&full)
                .ok_or_else(|| DlensError::MissingTensor(name.to_string()))?;
            expect_shape(name, t, shape)?;
            Ok(t.clone())
        };
        let (d, dh, nh, dm, v) = (
            config.d_model,
            config.d_head,
            config.n_heads,
            config.d_mlp,
            config.vocab_size,
        );

        let token_embedding = get("wte.weight", &[v, d])?;
        let position_embedding = get("wpe.weight", &[config.max_positions, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("h.{l}.{s}");
            let c_attn = get(&p("attn.c_attn.weight"), &[d, 3 * d])?;
            let c_attn_b = get(&p("attn.c_attn.bias"), &[3 * d])?;
            let c_proj = get(&p("attn.c_proj.weight"), &[d, d])?;
            let head_cols = |block: usize, h: usize| {
                let start = block * d + h * dh;
                (
                    c_attn.column_slice(start, start + dh),
                    c_attn_b.data()[start..start + dh].to_vec(),
                )
            };
            let mut attn = AttentionWeights {
                w_q: vec![],
                w_k: vec![],
                w_v: vec![],
                b_q: vec![],
                b_k: vec![],
                b_v: vec![],
                w_o: vec![],
                b_o: get(&p("attn.c_proj.bias"), &[d])?.into_data(),
            };
            for h in 0..nh {
                let (w, b) = head_cols(0, h);
                attn.w_q.push(w);
                attn.b_q.push(b);
                let (w, b) = head_cols(1, h);
                attn.w_k.push(w);
                attn.b_k.push(b);
                let (w, b) = head_cols(2, h);
                attn.w_v.push(w);
                attn.b_v.push(b);
                attn.w_o.push(c_proj.row_slice(h * dh, (h + 1) * dh));
            }
            layers.push(LayerWeights {
                ln1_gamma: get(&p("ln_1.weight"), &[d])?.into_data(),
                ln1_beta: get(&p("ln_1.bias"), &[d])?.into_data(),
                attn,
                ln2_gamma: get(&p("ln_2.weight"), &[d])?.into_data(),
                ln2_beta: get(&p("ln_2.bias"), &[d])?.into_data(),
                w_in: get(&p("mlp.c_fc.weight"), &[d, dm])?,
                b_in: get(&p("mlp.c_fc.bias"), &[dm])?.into_data(),
                w_out: get(&p("mlp.c_proj.weight"), &[dm, d])?,
                b_out: get(&p("mlp.c_proj.bias"), &[d])?.into_data(),
            });
        }
        let unembed_rows = match archive.tensors.get("lm_head.weight") {
            Some(t) => {
                expect_shape("lm_head.weight", t, &[v, d])?;
                Some(t.clone())
            }
            None => None,
        };
        let b_u = match archive.tensors.get("lm_head.bias") {
            Some(t) => {
                expect_shape("lm_head.bias", t, &[v])?;
                t.data().to_vec()
            }
            None => vec![0.0; v],
        };
        let w = Weights {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            lnf_gamma: get("ln_f.weight", &[d])?.into_data(),
            lnf_beta: get("ln_f.bias", &[d])?.into_data(),
            unembed_rows,
            b_u,
        };
        Ok(w)
    }

    /// Pack into GPT-2 checkpoint layout (fused `c_attn`).
    pub fn to_archive(&self) -> Result<Archive> {
        let cfg = &self.config;
        let (d, dh) = (cfg.d_model, cfg.d_head);
        let mut a = Archive::new();
        a.insert("wte.weight", self.token_embedding.clone());
        a.insert("wpe.weight", self.position_embedding.clone());
        for (l, lw) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("h.{l}.{s}");
            let mut c_attn = Tensor::zeros(&[d, 3 * d]);
            let mut c_attn_b = vec![0.0f32; 3 * d];
            for h in 0..cfg.n_heads {
                for (block, (w, b)) in [
                    (&lw.attn.w_q[h], &lw.attn.b_q[h]),
                    (&lw.attn.w_k[h], &lw.attn.b_k[h]),
                    (&lw.attn.w_v[h], &lw.attn.b_v[h]),
                ]
                .into_iter()
                .enumerate()
                {
                    let start = block * d + h * dh;
                    for i in 0..d {
                        c_attn.row_mut(i)[start..start + dh].copy_from_slice(w.row(i));
                    }
                    c_attn_b[start..start + dh].copy_from_slice(b);
                }
            }
            let refs: Vec<&Tensor> = lw.attn.w_o.iter().collect();
            a.insert(p("ln_1.weight"), Tensor::vector(lw.ln1_gamma.clone()));
            a.insert(p("ln_1.bias"), Tensor::vector(lw.ln1_beta.clone()));
            a.insert(p("attn.c_attn.weight"), c_attn);
            a.insert(p("attn.c_attn.bias"), Tensor::vector(c_attn_b));
            a.insert(p("attn.c_proj.weight"), Tensor::vstack(&refs)?);
            a.insert(p("attn.c_proj.bias"), Tensor::vector(lw.attn.b_o.clone()));
            a.insert(p("ln_2.weight"), Tensor::vector(lw.ln2_gamma.clone()));
            a.insert(p("ln_2.bias"), Tensor::vector(lw.ln2_beta.clone()));
            a.insert(p("mlp.c_fc.weight"), lw.w_in.clone());
            a.insert(p("mlp.c_fc.bias"), Tensor::vector(lw.b_in.clone()));
            a.insert(p("mlp.c_proj.weight"), lw.w_out.clone());
            a.insert(p("mlp.c_proj.bias"), Tensor::vector(lw.b_out.clone()));
        }
        a.insert("ln_f.weight", Tensor::vector(self.lnf_gamma.clone()));
        a.insert("ln_f.bias", Tensor::vector(self.lnf_beta.clone()));
        if let Some(u) = &self.unembed_rows {
            a.insert("lm_head.weight", u.clone());
        }
        if self.b_u.iter().any(|&b| b != 0.0) {
            a.insert("lm_head.bias", Tensor::vector(self.b_u.clone()));
        }
        Ok(a)
    }

    /// Load an archive file.
    pub fn load(archive_path: &Path, config: &ModelConfig) -> Result<Self> {
        Self::from_archive(&Archive::read(archive_path)?, config)
    }
}

/// Checksum manifest written alongside an exported archive.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExportManifest {
    #[serde(default)]
    pub source: BTreeMap<String, String>,
    pub tensors: Vec<ManifestEntry>,
    /// File name → SHA-256 hex of tokenizer files.
    #[serde(default)]
    pub tokenizer: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub checksum: String,
}

impl ExportManifest {
    /// Manifest describing every tensor of an archive.
    pub fn describe(archive: &Archive) -> Self {
        ExportManifest {
            source: BTreeMap::new(),
            tensors: archive
                .tensors
                .iter()
                .map(|(name, t)| ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "F32".into(),
                    checksum: tensor_checksum(t),
                })
                .collect(),
            tokenizer: BTreeMap::new(),
        }
    }

    /// Check that the manifest covers `required` and that every listed tensor
    /// matches the archive's shape and checksum.
    pub fn verify(&self, archive: &Archive, required: &[String]) -> Result<()> {
        let strip = |n: &str| n.strip_prefix("transformer.").unwrap_or(n).to_string();
        let listed: std::collections::HashSet<String> = self.tensors.iter().map(|e| strip(&e.name)).collect();
        if let Some(missing) = required.iter().find(|r| !listed.contains(*r)) {
            return Err(DlensError::MissingTensor(format!("{missing} (absent from manifest)")));
        }
        for e in &self.tensors {
            let t = archive.get(&e.name)?;
            if t.shape() != e.shape.as_slice() {
                return Err(DlensError::Shape(format!(
                    "`{}`: manifest shape {:?}, archive {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            let actual = tensor_checksum(t);
            if actual != e.checksum {
                return Err(DlensError::Checksum {
                    name: e.name.clone(),
                    expected: e.checksum.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }

    /// Verify tokenizer file hashes listed in the manifest against `dir`.
    pub fn verify_tokenizer(&self, dir: &Path) -> Result<()> {
        for (file, expected) in &self.tokenizer {
            let p = dir.join(file);
            let bytes = std::fs::read(&p).map_err(|e| DlensError::io(&p, e))?;
            let actual = sha256_hex(&bytes);
            if &actual != expected {
                return Err(DlensError::Checksum {
                    name: file.clone(),
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// Model directory layout: `model.safetensors`, optional `config.json`
/// (Hugging Face keys; GPT-2 Small assumed when absent), optional
/// `manifest.json` (verified when present), `vocab.json`, `merges.txt`.
pub fn load_model_dir(dir: &Path) -> Result<Weights> {
    let cfg_path = dir.join("config.json");
    let config = if cfg_path.exists() {
        let raw = std::fs::read_to_string(&cfg_path).map_err(|e| DlensError::io(&cfg_path, e))?;
        ModelConfig::from_hf_json(&raw)?
    } else {
        ModelConfig::gpt2_small()
    };
    let archive = Archive::read(&dir.join("model.safetensors"))?;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let raw = std::fs::read_to_string(&manifest_path).map_err(|e| DlensError::io(&manifest_path, e))?;
        let manifest: ExportManifest = serde_json::from_str(&raw)?;
        manifest.verify(&archive, &required_tensor_names(&config))?;
        manifest.verify_tokenizer(dir)?;
    }
    Weights::from_archive(&archive, &config)
}

/// Write a model directory (archive, config, manifest). Tokenizer files are
/// written by the caller.
pub fn save_model_dir(weights: &Weights, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DlensError::io(dir, e))?;
    let archive = weights.to_archive()?;
    archive.write(&dir.join("model.safetensors"))?;
    let p = dir.join("config.json");
    std::fs::write(&p, weights.config.to_hf_json()).map_err(|e| DlensError::io(&p, e))?;
    let manifest = ExportManifest::describe(&archive);
    let p = dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| DlensError::io(&p, e))
}
