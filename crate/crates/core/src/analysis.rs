// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparsity metrics, mask summaries, per-direction attention statistics and
//! report emission (CSV, JSON, SVG).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{direction_scores, ComponentId, Kind, SVDFactors};
use crate::error::{DlensError, Result};
use crate::intervention::{reports_to_csv, FlipReport};
use crate::masking::{MaskSet, ACTIVE_THRESHOLD};
use crate::model::{forward, ModelConfig, Weights};
use crate::tensor::Tensor;
use crate::tokenizer::{BpeVocab, TokenId};

pub const REPORT_VERSION: u32 = 1;

/// `S_rel` measures sparsity within the learnable directions, `S_full`
/// against every direction before rank truncation. `_ov` variants count OV
/// matrices only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub threshold: f32,
    pub n_active: usize,
    /// Active OV directions, the numerator of `s_full_ov`.
    pub n_active_ov: usize,
    pub n_learnable: usize,
    pub n_total: usize,
    pub n_total_ov: usize,
    pub s_rel: f64,
    pub s_full: f64,
    pub s_full_ov: f64,
}

fn frac_inactive(active: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        1.0 - active as f64 / total as f64
    }
}

pub fn sparsity(masks: &MaskSet, threshold: f32, n_total: usize, n_total_ov: usize) -> SparsityReport {
    let n_active = masks.n_active(threshold);
    let n_active_ov = masks
        .params
        .iter()
        .filter(|(id, _)| id.kind == Kind::Ov)
        .flat_map(|(_, v)| v.iter())
        .filter(|&&x| x.clamp(0.0, 1.0) > threshold)
        .count();
    let n_learnable = masks.n_directions();
    SparsityReport {
        threshold,
        n_active,
        n_active_ov,
        n_learnable,
        n_total,
        n_total_ov,
        s_rel: frac_inactive(n_active, n_learnable),
        s_full: frac_inactive(n_active, n_total),
        s_full_ov: frac_inactive(n_active_ov, n_total_ov),
    }
}

/// Sum of `min(m, n)` over the augmented matrices of `kinds`, before any
/// rank truncation.
pub fn total_directions(cfg: &ModelConfig, kinds: &[Kind]) -> usize {
    let (d, dm) = (cfg.d_model, cfg.d_mlp);
    kinds
        .iter()
        .map(|k| match k {
            Kind::Qk => cfg.n_heads * (1 + d),
            Kind::Ov => cfg.n_heads * d,
            Kind::MlpIn => (1 + d).min(dm),
            Kind::MlpOut => (1 + dm).min(d),
        })
        .sum::<usize>()
        * cfg.n_layers
}

/// Mean mask value of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMaskRow {
    pub component: String,
    pub layer: usize,
    pub head: Option<usize>,
    pub mean: f64,
    pub n: usize,
}

/// Rows ordered by `(layer, head)`; components of rank zero are omitted.
pub fn head_mask_summary(masks: &MaskSet, kind: Kind) -> Vec<HeadMaskRow> {
    masks
        .all_values()
        .into_iter()
        .filter(|(id, v)| id.kind == kind && !v.is_empty())
        .map(|(id, v)| HeadMaskRow {
            component: id.to_string(),
            layer: id.layer,
            head: id.head,
            mean: v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64,
            n: v.len(),
        })
        .collect()
}

/// Rows by descending mean; ties keep `(layer, head)` order.
pub fn rank_heads(rows: &[HeadMaskRow]) -> Vec<HeadMaskRow> {
    let mut out = rows.to_vec();
    out.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    out
}

/// Heads of the indirect-object circuit of GPT-2 small, by functional group.
pub const IOI_CIRCUIT_GROUPS: &[(&str, &[(usize, usize)])] = &[
    ("name_mover", &[(9, 6), (9, 9), (10, 0)]),
    (
        "backup_name_mover",
        &[(9, 0), (9, 7), (10, 1), (10, 2), (10, 6), (10, 10), (11, 2), (11, 9)],
    ),
    ("negative_name_mover", &[(10, 7), (11, 10)]),
    ("s_inhibition", &[(7, 3), (7, 9), (8, 6), (8, 10)]),
    ("induction", &[(5, 5), (5, 8), (5, 9), (6, 9)]),
    ("duplicate_token", &[(0, 1), (0, 10), (3, 0)]),
    ("previous_token", &[(2, 2), (4, 11)]),
];

pub fn ioi_circuit_heads() -> BTreeSet<(usize, usize)> {
    IOI_CIRCUIT_GROUPS.iter().flat_map(|(_, h)| h.iter().copied()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub group: String,
    /// `None` when none of the group's heads are present.
    pub mean: Option<f64>,
    pub n_heads: usize,
}

/// Unweighted mean over the per-head means of the listed heads that appear
/// in `rows`.
pub fn group_mean(rows: &[HeadMaskRow], group: &str, heads: &BTreeSet<(usize, usize)>) -> GroupMean {
    let sel: Vec<f64> = rows
        .iter()
        .filter(|r| r.head.is_some_and(|h| heads.contains(&(r.layer, h))))
        .map(|r| r.mean)
        .collect();
    GroupMean {
        group: group.to_string(),
        mean: (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64),
        n_heads: sel.len(),
    }
}

/// Group means for every circuit group plus the heads outside the circuit.
pub fn ioi_group_means(rows: &[HeadMaskRow]) -> Vec<GroupMean> {
    let mut out: Vec<GroupMean> = IOI_CIRCUIT_GROUPS
        .iter()
        .map(|(g, h)| group_mean(rows, g, &h.iter().copied().collect()))
        .collect();
    let circuit = ioi_circuit_heads();
    let others: BTreeSet<(usize, usize)> = rows
        .iter()
        .filter_map(|r| r.head.map(|h| (r.layer, h)))
        .filter(|lh| !circuit.contains(lh))
        .collect();
    out.push(group_mean(rows, "non_circuit", &others));
    out
}

/// Rule table mapping token text to a class. The first matching rule wins;
/// unmatched tokens fall into `other`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenClassifier {
    pub rules: Vec<(String, Vec<String>)>,
}

impl Default for TokenClassifier {
    fn default() -> Self {
        use crate::tasks::{FEMALE_NAMES, GP_NOUNS, GT_NOUNS, IOI_NAMES, MALE_NAMES, OBJECTS, PLACES};
        let list = |xs: &[&[&str]]| -> Vec<String> {
            let mut v: Vec<String> = xs.iter().flat_map(|l| l.iter().map(|s| s.to_string())).collect();
            v.sort();
            v.dedup();
            v
        };
        let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        TokenClassifier {
            rules: vec![
                ("name".into(), list(&[IOI_NAMES, MALE_NAMES, FEMALE_NAMES])),
                ("noun".into(), list(&[PLACES, OBJECTS, GP_NOUNS, GT_NOUNS])),
                (
                    "action".into(),
                    words("went gave were working found decided lasted is was has had got took brought"),
                ),
                (
                    "connective".into(),
                    words("and when after while then so but because or"),
                ),
                (
                    "function".into(),
                    words("the a an to of at in on from it for with by year The A It"),
                ),
            ],
        }
    }
}

impl TokenClassifier {
    pub fn classify(&self, text: &str) -> String {
        let t = text.trim();
        for (class, members) in &self.rules {
            if members.iter().any(|m| m == t) {
                return class.clone();
            }
        }
        if !t.is_empty() && t.chars().all(|c| c.is_ascii_digit()) {
            return "number".into();
        }
        if !t.is_empty() && t.chars().all(|c| c.is_ascii_punctuation()) {
            return "punct".into();
        }
        "other".into()
    }

    pub fn classes(&self) -> Vec<String> {
        let mut v: Vec<String> = self.rules.iter().map(|r| r.0.clone()).collect();
        v.extend(["number", "punct", "other", TARGET_CLASS].map(String::from));
        v
    }
}

/// Class given to the designated target position of each prompt.
pub const TARGET_CLASS: &str = "target";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Order-independent two-pass mean and population std.
pub fn stable_mean_std(values: &mut [f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// One prompt prepared for direction statistics: tokens, the target key
/// position and the layer's post-LayerNorm attention input.
#[derive(Debug, Clone)]
pub struct DirectionPrompt {
    pub tokens: Vec<TokenId>,
    pub target: usize,
    pub x: Tensor,
}

/// Run the model over `(tokens, target)` pairs and keep the attention input
/// of `layer`.
pub fn layer_inputs(weights: &Weights, layer: usize, corpus: &[(Vec<TokenId>, usize)]) -> Result<Vec<DirectionPrompt>> {
    if layer >= weights.config.n_layers {
        return Err(DlensError::Index(format!("layer {layer} out of range")));
    }
    corpus
        .par_iter()
        .map(|(t, target)| {
            if *target >= t.len() {
                return Err(DlensError::Index(format!(
                    "target {target} outside prompt of length {}",
                    t.len()
                )));
            }
            let (_, cache) = forward(t, weights)?;
            Ok(DirectionPrompt {
                tokens: t.clone(),
                target: *target,
                x: cache.layers[layer].ln1_out.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub component: String,
    pub direction: usize,
    pub mask: Option<f32>,
    pub sigma: f32,
    pub classes: BTreeMap<String, ClassStat>,
    /// Percentage of prompts whose target position receives the highest
    /// score (lowest index wins ties).
    pub highest_attention_pct: f64,
    pub n_prompts: usize,
    pub notes: Vec<String>,
}

/// Raw direction scores from the final query position to every key.
pub fn final_query_scores(f: &SVDFactors, k: usize, x: &Tensor) -> Result<Vec<f32>> {
    let n = x.rows();
    direction_scores(f, k, x.row(n - 1), x)
}

pub fn direction_token_stats(
    f: &SVDFactors,
    k: usize,
    corpus: &[DirectionPrompt],
    vocab: &BpeVocab,
    classifier: &TokenClassifier,
    mask: Option<f32>,
) -> Result<DirectionStats> {
    let per: Vec<(Vec<(String, f64)>, bool)> = corpus
        .par_iter()
        .map(|p| {
            let scores = final_query_scores(f, k, &p.x)?;
            let best = crate::tensor::argmax(&scores);
            let labelled = scores
                .iter()
                .enumerate()
                .map(|(j, &s)| {
                    let class = if j == p.target {
                        TARGET_CLASS.to_string()
                    } else {
                        classifier.classify(&vocab.decode(&[p.tokens[j]])?)
                    };
                    Ok((class, s as f64))
                })
                .collect::<Result<_>>()?;
            Ok((labelled, best == p.target))
        })
        .collect::<Result<_>>()?;
    let mut by_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut hits = 0usize;
    for (labelled, hit) in per {
        hits += hit as usize;
        for (c, s) in labelled {
            by_class.entry(c).or_default().push(s);
        }
    }
    let notes = classifier
        .classes()
        .into_iter()
        .filter(|c| !by_class.contains_key(c))
        .map(|c| format!("class {c} has no tokens; skipped"))
        .collect();
    let classes = by_class
        .into_iter()
        .map(|(c, mut v)| {
            let (mean, std) = stable_mean_std(&mut v);
            (c, ClassStat { mean, std, n: v.len() })
        })
        .collect();
    Ok(DirectionStats {
        component: f.id.to_string(),
        direction: k,
        mask,
        sigma: f.sigma[k],
        classes,
        highest_attention_pct: if corpus.is_empty() {
            0.0
        } else {
            100.0 * hits as f64 / corpus.len() as f64
        },
        n_prompts: corpus.len(),
        notes,
    })
}

/// Task-level fidelity and sparsity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetricsRow {
    pub task: String,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub s_rel: f64,
    pub s_full: f64,
    pub s_full_ov: f64,
    pub pruned_accuracy: Option<f64>,
    pub exact_match: f64,
    pub n: usize,
}

/// One gender-related OV direction with receptor tokens and statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderDirectionRow {
    pub direction: String,
    pub group: String,
    pub mask: f32,
    pub sigma: f32,
    pub top_tokens: Vec<String>,
    pub mu_he: f64,
    pub std_he: f64,
    pub mu_she: f64,
    pub std_she: f64,
    pub diff: f64,
}

pub fn direction_label(id: &ComponentId, k: usize) -> String {
    format!("{id}.SV{k}")
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub task: Option<String>,
    pub sparsity: Option<SparsityReport>,
    pub metrics: Option<TaskMetricsRow>,
    pub head_summaries: BTreeMap<String, Vec<HeadMaskRow>>,
    pub group_means: Vec<GroupMean>,
    pub directions: Vec<DirectionStats>,
    pub gender_directions: Vec<GenderDirectionRow>,
    pub interventions: Vec<FlipReport>,
}

impl Report {
    pub fn new(task: Option<String>) -> Self {
        Report {
            report_version: REPORT_VERSION,
            task,
            ..Report::default()
        }
    }

    /// Fill sparsity and per-kind summaries from `masks`.
    pub fn with_masks(mut self, masks: &MaskSet, cfg: &ModelConfig) -> Self {
        self.sparsity = Some(sparsity(
            masks,
            ACTIVE_THRESHOLD,
            total_directions(cfg, &Kind::ALL),
            total_directions(cfg, &[Kind::Ov]),
        ));
        for kind in Kind::ALL {
            self.head_summaries
                .insert(kind.as_str().to_string(), head_mask_summary(masks, kind));
        }
        if let Some(qk) = self.head_summaries.get(Kind::Qk.as_str()) {
            if !qk.is_empty() {
                self.group_means = ioi_group_means(qk);
            }
        }
        self
    }
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

pub const SPARSITY_COLUMNS: &str =
    "threshold,n_active,n_active_ov,n_learnable,n_total,n_total_ov,s_rel,s_full,s_full_ov";

pub fn sparsity_csv(s: Option<&SparsityReport>) -> String {
    let mut out = format!("{SPARSITY_COLUMNS}\n");
    if let Some(s) = s {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.threshold,
            s.n_active,
            s.n_active_ov,
            s.n_learnable,
            s.n_total,
            s.n_total_ov,
            s.s_rel,
            s.s_full,
            s.s_full_ov
        );
    }
    out
}

pub fn metrics_csv(m: Option<&TaskMetricsRow>) -> String {
    let mut out = String::from("task,kl_mean,kl_std,s_rel,s_full,s_full_ov,pruned_accuracy,exact_match,n\n");
    if let Some(m) = m {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            csv_text(&m.task),
            m.kl_mean,
            m.kl_std,
            m.s_rel,
            m.s_full,
            m.s_full_ov,
            opt(m.pruned_accuracy),
            m.exact_match,
            m.n
        );
    }
    out
}

pub fn head_summary_csv(rows: &[HeadMaskRow]) -> String {
    let mut out = String::from("component,layer,head,mean,n\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.component, r.layer, opt(r.head), r.mean, r.n);
    }
    out
}

pub fn direction_stats_csv(stats: &[DirectionStats]) -> String {
    let mut out = String::from("component,direction,mask,sigma,class,mean,std,n,highest_attention_pct\n");
    for s in stats {
        for (c, cs) in &s.classes {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.component,
                s.direction,
                opt(s.mask),
                s.sigma,
                csv_text(c),
                cs.mean,
                cs.std,
                cs.n,
                s.highest_attention_pct
            );
        }
    }
    out
}

pub fn gender_directions_csv(rows: &[GenderDirectionRow]) -> String {
    let mut out = String::from("direction,group,mask,sigma,top_tokens,mu_he,std_he,mu_she,std_she,diff\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.direction,
            r.group,
            r.mask,
            r.sigma,
            csv_text(&r.top_tokens.join("|")),
            r.mu_he,
            r.std_he,
            r.mu_she,
            r.std_she,
            r.diff
        );
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// White to dark blue for `v` in `[0, 1]`.
fn mask_colour(v: f32) -> String {
    let v = v.clamp(0.0, 1.0);
    let ch = |lo: f32| (255.0 - v * (255.0 - lo)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", ch(8.0), ch(48.0), ch(107.0))
}

/// Blue (negative) through white to red (positive), scaled by `max_abs`.
fn diverging_colour(v: f64, max_abs: f64) -> String {
    let t = if max_abs > 0.0 {
        (v / max_abs).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    if t >= 0.0 {
        format!("#ff{:02x}{:02x}", fade(t), fade(t))
    } else {
        format!("#{:02x}{:02x}ff", fade(t), fade(t))
    }
}

/// Layer × head grid; each cell shows the component's mask vector as thin
/// vertical bars. MLP kinds use one cell per layer.
pub fn mask_heatmap_svg(masks: &MaskSet, kind: Kind) -> String {
    let vals: Vec<(ComponentId, Vec<f32>)> = masks
        .all_values()
        .into_iter()
        .filter(|(id, _)| id.kind == kind)
        .collect();
    let n_layers = vals.iter().map(|(id, _)| id.layer + 1).max().unwrap_or(0);
    let n_cols = if kind.per_head() {
        vals.iter().map(|(id, _)| id.head.unwrap_or(0) + 1).max().unwrap_or(0)
    } else {
        n_layers.min(1)
    };
    let (cw, ch, left, top) = (60.0f64, 20.0f64, 40.0f64, 30.0f64);
    let width = left + cw * n_cols.max(1) as f64 + 10.0;
    let height = top + ch * n_layers.max(1) as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="16" font-family="monospace" font-size="12">{} masks</text>"#,
        kind.as_str()
    );
    if vals.is_empty() {
        let _ = writeln!(
            s,
            r#"<text x="4" y="34" font-family="monospace" font-size="10">no masks</text>"#
        );
    }
    for l in 0..n_layers {
        let y = top + ch * l as f64;
        let _ = writeln!(
            s,
            r#"<text x="4" y="{:.1}" font-family="monospace" font-size="10">L{l}</text>"#,
            y + ch * 0.7
        );
    }
    for (id, v) in &vals {
        let col = if kind.per_head() { id.head.unwrap_or(0) } else { 0 };
        let (x0, y0) = (left + cw * col as f64, top + ch * id.layer as f64);
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="#ffffff" stroke="#999999" stroke-width="0.5"/>"##,
            cw - 2.0,
            ch - 2.0
        );
        let bw = (cw - 2.0) / v.len().max(1) as f64;
        for (k, &m) in v.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{y0:.2}" width="{bw:.3}" height="{:.2}" fill="{}"/>"#,
                x0 + bw * k as f64,
                ch - 2.0,
                mask_colour(m)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Heat map of `values[row][col]` with text labels, e.g. per-direction
/// scores over key positions.
pub fn score_heatmap_svg(title: &str, row_labels: &[String], col_labels: &[String], values: &[Vec<f64>]) -> String {
    let max_abs = values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let (cw, ch, left, top) = (48.0f64, 18.0f64, 90.0f64, 44.0f64);
    let width = left + cw * col_labels.len().max(1) as f64 + 10.0;
    let height = top + ch * row_labels.len().max(1) as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="14" font-family="monospace" font-size="12">{}</text>"#,
        xml_escape(title)
    );
    for (j, c) in col_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="9">{}</text>"#,
            left + cw * j as f64 + 2.0,
            top - 6.0,
            xml_escape(c)
        );
    }
    for (i, r) in row_labels.iter().enumerate() {
        let y = top + ch * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="4" y="{:.1}" font-family="monospace" font-size="10">{}</text>"#,
            y + ch * 0.7,
            xml_escape(r)
        );
        for (j, &v) in values.get(i).map(|r| r.as_slice()).unwrap_or(&[]).iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{v:.3}</title></rect>"#,
                left + cw * j as f64,
                cw - 1.0,
                ch - 1.0,
                diverging_colour(v, max_abs)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn write(dir: &Path, name: &str, body: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, body).map_err(|e| DlensError::io(&p, e))?;
    out.push(p);
    Ok(())
}

/// Write every table, `report.json` and one mask heat map per kind.
pub fn export_report(report: &Report, masks: &MaskSet, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| DlensError::io(out_dir, e))?;
    let mut out = Vec::new();
    write(
        out_dir,
        "sparsity.csv",
        &sparsity_csv(report.sparsity.as_ref()),
        &mut out,
    )?;
    write(
        out_dir,
        "task_metrics.csv",
        &metrics_csv(report.metrics.as_ref()),
        &mut out,
    )?;
    write(
        out_dir,
        "gender_directions.csv",
        &gender_directions_csv(&report.gender_directions),
        &mut out,
    )?;
    write(
        out_dir,
        "interventions.csv",
        &reports_to_csv(&report.interventions),
        &mut out,
    )?;
    write(
        out_dir,
        "direction_stats.csv",
        &direction_stats_csv(&report.directions),
        &mut out,
    )?;
    for kind in Kind::ALL {
        let rows = report
            .head_summaries
            .get(kind.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let name = kind.as_str().to_ascii_lowercase();
        write(
            out_dir,
            &format!("head_masks_{name}.csv"),
            &head_summary_csv(rows),
            &mut out,
        )?;
        write(
            out_dir,
            &format!("masks_{name}.svg"),
            &mask_heatmap_svg(masks, kind),
            &mut out,
        )?;
    }
    let json = serde_json::to_string_pretty(report)?;
    write(out_dir, "report.json", &json, &mut out)?;
    Ok(out)
}
