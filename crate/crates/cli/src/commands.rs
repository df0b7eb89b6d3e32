// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use dlens::analysis::{
    direction_label, direction_token_stats, export_report, final_query_scores, layer_inputs, score_heatmap_svg,
    sparsity, total_directions, DirectionPrompt, GenderDirectionRow, Report, TaskMetricsRow, TokenClassifier,
};
use dlens::archive::Archive;
use dlens::decomposition::{decompose_all, load_cache, save_factors, ComponentId, Kind, SVDFactors};
use dlens::intervention::{
    flip_metrics, logit_receptor, mean_std, ov_conditional_stats, reports_to_csv, run_experiment,
    select_gender_directions, DirectionGroup, Edit, FlipReport, Gender, GenderSelection, InterventionSpec,
};
use dlens::masking::{
    kl_from_logits, masked_logits, prepare_examples, save_checkpoint, train, CheckpointMeta, MaskSet, MaskedModel,
    TrainConfig, TrainExample, ACTIVE_THRESHOLD,
};
use dlens::model::{load_model_dir, ModelConfig, Weights};
use dlens::tasks::{
    make_splits, read_jsonl, target_position, task_metric, write_jsonl, PromptPair, SplitSpec, Splits, Task,
};
use dlens::tokenizer::BpeVocab;
use dlens::toy::task_model;

use crate::manifest::ManifestBuilder;
use crate::{
    usage, AnalyzeArgs, CacheArgs, Command, DataArgs, DecomposeArgs, GenDataArgs, InterveneArgs, ReportArgs, TrainArgs,
};

pub const CACHE_ENV: &str = "DLENS_CACHE_DIR";
const DEFAULT_CACHE_ROOT: &str = ".dlens-cache";
const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];
const TOP_RECEPTOR_TOKENS: usize = 5;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Decompose(a) => decompose(a),
        Command::TrainMasks(a) => train_masks(a),
        Command::Intervene(a) => intervene(a),
        Command::Analyze(a) => analyze(a),
        Command::Report(a) => report(a),
        Command::GenData(a) => gen_data(a),
    }
}

struct LoadedModel {
    weights: Weights,
    vocab: BpeVocab,
    id: String,
}

/// `toy:<seed>` or a directory with model.safetensors, vocab.json and merges.txt.
fn load_model(spec: &str, m: &mut ManifestBuilder) -> Result<LoadedModel> {
    if let Some(seed) = spec.strip_prefix("toy:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| usage(format!("toy model seed `{seed}` is not an integer")))?;
        let (weights, vocab) = task_model(seed)?;
        m.input_named(spec, "builtin");
        return Ok(LoadedModel {
            weights,
            vocab,
            id: format!("toy-{seed}"),
        });
    }
    let dir = Path::new(spec);
    if !dir.is_dir() {
        return Err(usage(format!("model directory {} does not exist", dir.display())));
    }
    let missing: Vec<&str> = ["model.safetensors", "vocab.json", "merges.txt"]
        .into_iter()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(usage(format!("{} is missing {}", dir.display(), missing.join(", "))));
    }
    m.input(dir)?;
    let digest = &m.inputs[&dir.display().to_string()];
    let id = format!("model-{}", &digest[..16]);
    let weights = load_model_dir(dir).with_context(|| format!("loading {}", dir.display()))?;
    let vocab = BpeVocab::load_dir(dir)?;
    Ok(LoadedModel { weights, vocab, id })
}

fn cache_root() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_ROOT))
}

fn default_svd_dir(model: &LoadedModel) -> PathBuf {
    cache_root().join(&model.id).join("svd")
}

fn load_svd(
    cache: &CacheArgs,
    model: &LoadedModel,
    m: &mut ManifestBuilder,
) -> Result<BTreeMap<ComponentId, SVDFactors>> {
    let dir = cache.svd_cache.clone().unwrap_or_else(|| default_svd_dir(model));
    if !dir.is_dir() {
        return Err(usage(format!(
            "SVD cache {} not found; run `dlens decompose` first",
            dir.display()
        )));
    }
    let factors = load_cache(&dir)?;
    if factors.is_empty() {
        return Err(usage(format!("SVD cache {} holds no components", dir.display())));
    }
    m.input(&dir)?;
    Ok(factors)
}

fn parse_task(s: &str) -> Result<Task> {
    Ok(s.parse::<Task>()?)
}

fn parse_kinds(names: &[String]) -> Result<Vec<Kind>> {
    let mut kinds = Vec::new();
    for n in names {
        let k: Kind = n.trim().parse()?;
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    if kinds.is_empty() {
        return Err(usage("no component kinds given"));
    }
    kinds.sort();
    Ok(kinds)
}

fn load_splits(task: Task, args: &DataArgs, vocab: &BpeVocab, m: &mut ManifestBuilder) -> Result<Splits> {
    if args.split_scale == 0 {
        return Err(usage("--split-scale must be at least 1"));
    }
    let Some(dir) = &args.data else {
        let spec = SplitSpec::default_for(task).scaled_down(args.split_scale);
        return Ok(make_splits(task, spec, args.data_seed, vocab)?);
    };
    if !dir.is_dir() {
        return Err(usage(format!("data directory {} does not exist", dir.display())));
    }
    let mut read = |name: &str| -> Result<Vec<PromptPair>> {
        let p = dir.join(format!("{name}.jsonl"));
        if !p.is_file() {
            return Ok(Vec::new());
        }
        m.input(&p)?;
        let pairs = read_jsonl(&p)?;
        if let Some(bad) = pairs.iter().find(|x| x.task != task) {
            return Err(usage(format!(
                "{} holds {} prompts, expected {}",
                p.display(),
                bad.task.name(),
                task.name()
            )));
        }
        Ok(pairs)
    };
    let splits = Splits {
        train: read("train")?,
        val: read("val")?,
        test: read("test")?,
    };
    if splits.train.is_empty() && splits.val.is_empty() && splits.test.is_empty() {
        return Err(usage(format!("no prompts found under {}", dir.display())));
    }
    Ok(splits)
}

fn pick_split(splits: Splits, name: &str) -> Result<Vec<PromptPair>> {
    let pairs = match name {
        "train" => splits.train,
        "val" => splits.val,
        "test" => splits.test,
        other => return Err(usage(format!("unknown split `{other}` (expected train, val or test)"))),
    };
    if pairs.is_empty() {
        return Err(usage(format!("split `{name}` is empty")));
    }
    Ok(pairs)
}

fn truncate<T>(mut v: Vec<T>, max: Option<usize>) -> Vec<T> {
    if let Some(n) = max {
        v.truncate(n);
    }
    v
}

fn token_pairs(pairs: &[PromptPair]) -> Vec<(Vec<u32>, Vec<u32>)> {
    pairs
        .iter()
        .map(|p| (p.clean_tokens.clone(), p.corrupt_tokens.clone()))
        .collect()
}

fn write_file(path: &Path, contents: &str, m: &mut ManifestBuilder) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    m.output(path);
    Ok(())
}

fn write_model_config(dir: &Path, cfg: &ModelConfig, m: &mut ManifestBuilder) -> Result<()> {
    write_file(&dir.join(MODEL_CONFIG_FILE), &cfg.to_hf_json(), m)
}

const MODEL_CONFIG_FILE: &str = "model_config.json";
const MASKS_FILE: &str = "masks.safetensors";
const MASKS_META_FILE: &str = "masks.json";
const ANALYSIS_FILE: &str = "analysis.json";
const INTERVENTIONS_FILE: &str = "interventions.json";

fn load_masks(dir: &Path) -> Result<MaskSet> {
    let p = dir.join(MASKS_FILE);
    if !p.is_file() {
        return Err(usage(format!("mask checkpoint {} not found", p.display())));
    }
    Ok(MaskSet::from_archive(&Archive::read(&p)?)?)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("gen-data");
    let task = parse_task(&a.task)?;
    if a.split_scale == 0 {
        return Err(usage("--split-scale must be at least 1"));
    }
    let model = load_model(&a.model.model, &mut m)?;
    let mut spec = SplitSpec::default_for(task).scaled_down(a.split_scale);
    spec.train = a.train.unwrap_or(spec.train);
    spec.val = a.val.unwrap_or(spec.val);
    spec.test = a.test.unwrap_or(spec.test);
    m.config = json!({ "task": task, "splits": spec, "split_scale": a.split_scale, "model": a.model.model });
    m.seed = Some(a.seed);
    let splits = make_splits(task, spec, a.seed, &model.vocab)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, pairs) in SPLIT_NAMES.iter().zip([&splits.train, &splits.val, &splits.test]) {
        let p = a.out.join(format!("{name}.jsonl"));
        write_jsonl(&p, pairs)?;
        m.output(&p);
        println!("{name}: {} prompts", pairs.len());
    }
    m.finish(&a.out)?;
    Ok(())
}

fn decompose(a: DecomposeArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("decompose");
    let kinds = parse_kinds(&a.kinds)?;
    if !(a.rank_tol > 0.0 && a.rank_tol < 1.0) {
        return Err(usage(format!("--rank-tol {} must lie in (0, 1)", a.rank_tol)));
    }
    let model = load_model(&a.model.model, &mut m)?;
    let out = a.out.clone().unwrap_or_else(|| default_svd_dir(&model));
    m.config = json!({ "model": a.model.model, "kinds": kinds, "rank_tol": a.rank_tol, "out": out });
    let factors = decompose_all(&model.weights, &kinds, a.rank_tol)?;
    for f in &factors {
        save_factors(&out, f)?;
        m.output(&out.join(format!("{}.safetensors", f.id.key())));
        m.output(&out.join(format!("{}.json", f.id.key())));
    }
    println!(
        "{:<8} {:>10} {:>9} {:>9} {:>9}",
        "kind", "components", "min_rank", "max_rank", "full_dim"
    );
    for kind in &kinds {
        let of: Vec<&SVDFactors> = factors.iter().filter(|f| f.id.kind == *kind).collect();
        let min = of.iter().map(|f| f.rank()).min().unwrap_or(0);
        let max = of.iter().map(|f| f.rank()).max().unwrap_or(0);
        let full = of.iter().map(|f| f.full_dim).max().unwrap_or(0);
        println!(
            "{:<8} {:>10} {:>9} {:>9} {:>9}",
            kind.as_str(),
            of.len(),
            min,
            max,
            full
        );
    }
    println!("cache: {}", out.display());
    m.finish(&out)?;
    Ok(())
}

fn train_config(a: &TrainArgs, m: &mut ManifestBuilder) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            if !p.is_file() {
                return Err(usage(format!("config file {} not found", p.display())));
            }
            m.input(p)?;
            let raw = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<TrainConfig>(&raw).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = a.l1_weight {
        cfg.l1_weight = v;
    }
    if let Some(v) = a.patience {
        cfg.early_stop_patience = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(k) = &a.kinds {
        cfg.kinds = parse_kinds(k)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

const HISTORY_COLUMNS: &str = "epoch,train_kl,val_kl,l1,n_active,n_directions,sparsity,kl_clamps";

fn train_masks(a: TrainArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("train-masks");
    let task = parse_task(&a.task)?;
    let cfg = train_config(&a, &mut m)?;
    m.config = json!({
        "task": task,
        "train": cfg,
        "model": a.model.model,
        "data": a.data.data,
        "data_seed": a.data.data_seed,
        "split_scale": a.data.split_scale,
        "max_train": a.max_train,
        "max_val": a.max_val,
    });
    m.seed = Some(cfg.seed);
    let model = load_model(&a.model.model, &mut m)?;
    let factors = load_svd(&a.cache, &model, &mut m)?;
    let splits = load_splits(task, &a.data, &model.vocab, &mut m)?;
    let train_pairs = truncate(splits.train, a.max_train);
    let val_pairs = truncate(splits.val, a.max_val);
    if train_pairs.is_empty() {
        return Err(usage("training split is empty"));
    }
    let mm = MaskedModel::new(&model.weights, &factors)?;
    let train_set = prepare_examples(&mm, &token_pairs(&train_pairs))?;
    let val_set = prepare_examples(&mm, &token_pairs(&val_pairs))?;
    let initial = MaskSet::new(&factors, &cfg.kinds, cfg.mask_init);
    eprintln!(
        "training {} masks over {} directions on {} train / {} val prompts",
        task.name(),
        initial.n_directions(),
        train_set.len(),
        val_set.len()
    );
    let outcome = train(&mm, &train_set, &val_set, initial, &cfg, |r| {
        eprintln!(
            "epoch {:>3}  train_kl {:.6}  val_kl {:.6}  active {}/{}",
            r.epoch, r.train_kl, r.val_kl, r.n_active, r.n_directions
        );
    })?;
    let meta = CheckpointMeta {
        task: task.name().to_string(),
        config: cfg.clone(),
        epoch: outcome.best_epoch,
        val_kl: outcome.best_val_kl,
    };
    save_checkpoint(&a.out, &outcome.masks, &meta)?;
    m.output(&a.out.join(MASKS_FILE));
    m.output(&a.out.join(MASKS_META_FILE));
    let mut hist = String::from(HISTORY_COLUMNS);
    hist.push('\n');
    for r in &outcome.history {
        hist.push_str(&format!(
            "{},{:.8},{:.8},{:.6},{},{},{:.6},{}\n",
            r.epoch, r.train_kl, r.val_kl, r.l1, r.n_active, r.n_directions, r.sparsity, r.kl_clamps
        ));
    }
    write_file(&a.out.join("history.csv"), &hist, &mut m)?;
    write_model_config(&a.out, &model.weights.config, &mut m)?;
    let s = sparsity(
        &outcome.masks,
        ACTIVE_THRESHOLD,
        total_directions(&model.weights.config, &Kind::ALL),
        total_directions(&model.weights.config, &[Kind::Ov]),
    );
    println!(
        "best epoch {} val_kl {:.6}  S_rel {:.4}  S_full {:.4}  active {}/{}",
        outcome.best_epoch, outcome.best_val_kl, s.s_rel, s.s_full, s.n_active, s.n_learnable
    );
    m.finish(&a.out)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct InterventionsFile {
    spec: InterventionSpec,
    reports: Vec<FlipReport>,
}

fn gender_of(p: &PromptPair) -> Result<Gender> {
    let g = p
        .metadata
        .get("gender")
        .ok_or_else(|| usage("prompt lacks a gender label; intervention needs gp prompts"))?;
    Ok(g.parse()?)
}

fn intervene(a: InterveneArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("intervene");
    if !a.spec.is_file() {
        return Err(usage(format!("intervention spec {} not found", a.spec.display())));
    }
    m.input(&a.spec)?;
    let raw = std::fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let spec = InterventionSpec::from_json(&raw).with_context(|| format!("invalid spec {}", a.spec.display()))?;
    let scales = a.sigma_scales.clone().unwrap_or_else(|| vec![spec.sigma_scale]);
    m.config = json!({
        "spec": spec,
        "sigma_scales": scales,
        "split": a.split,
        "experiment": a.experiment,
        "model": a.model.model,
        "data": a.data.data,
        "data_seed": a.data.data_seed,
        "split_scale": a.data.split_scale,
        "max_prompts": a.max_prompts,
    });
    m.seed = Some(a.data.data_seed);
    let model = load_model(&a.model.model, &mut m)?;
    let factors = load_svd(&a.cache, &model, &mut m)?;
    spec.validate(&factors).context("invalid intervention spec")?;
    let splits = load_splits(Task::Gp, &a.data, &model.vocab, &mut m)?;
    let pairs = pick_split(splits, &a.split)?;
    let mut prompts = Vec::new();
    for p in &pairs {
        if gender_of(p)? == spec.target {
            prompts.push(p.clean_tokens.clone());
        }
    }
    let prompts = truncate(prompts, a.max_prompts);
    if prompts.is_empty() {
        return Err(usage(format!(
            "no {}-context prompts in split `{}`",
            spec.target, a.split
        )));
    }
    let he = model.vocab.single_token(" he")?;
    let she = model.vocab.single_token(" she")?;
    let mut reports = Vec::new();
    for &scale in &scales {
        let s = InterventionSpec {
            sigma_scale: scale,
            ..spec.clone()
        };
        s.validate(&factors)?;
        let outcomes = run_experiment(&model.weights, &factors, &prompts, &s, he, she)?;
        reports.push(flip_metrics(&a.experiment, &s, &outcomes));
    }
    let csv = reports_to_csv(&reports);
    write_file(&a.out.join("interventions.csv"), &csv, &mut m)?;
    let file = InterventionsFile { spec, reports };
    write_file(
        &a.out.join(INTERVENTIONS_FILE),
        &serde_json::to_string_pretty(&file)?,
        &mut m,
    )?;
    print!("{csv}");
    m.finish(&a.out)?;
    Ok(())
}

fn parse_direction(s: &str) -> Result<(ComponentId, usize)> {
    let (key, k) = s
        .rsplit_once(':')
        .ok_or_else(|| usage(format!("direction `{s}` must look like qk_l9_h6:7")))?;
    let id = ComponentId::parse_key(key.trim())?;
    if id.kind != Kind::Qk {
        return Err(usage(format!("direction `{s}` is not a QK direction")));
    }
    let k = k
        .trim()
        .parse()
        .map_err(|_| usage(format!("direction index in `{s}` is not an integer")))?;
    Ok((id, k))
}

struct TaskEval {
    kls: Vec<f64>,
    accuracy: Option<f64>,
    exact_match: f64,
}

fn evaluate_task(
    task: Task,
    mm: &MaskedModel,
    pairs: &[PromptPair],
    examples: &[TrainExample],
    masks: &MaskSet,
) -> Result<TaskEval> {
    let per: Vec<(f64, Option<f64>, f64)> = pairs
        .par_iter()
        .zip(examples)
        .map(|(p, ex)| {
            let logits = masked_logits(mm, ex, masks)?;
            let (kl, _) = kl_from_logits(&ex.target_logits, &logits);
            let r = task_metric(task, &logits, p);
            Ok((kl, r.accuracy, r.exact_match))
        })
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    let accs: Vec<f64> = per.iter().filter_map(|x| x.1).collect();
    Ok(TaskEval {
        kls: per.iter().map(|x| x.0).collect(),
        accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
        exact_match: per.iter().map(|x| x.2).sum::<f64>() / n,
    })
}

fn gender_analysis(
    a: &AnalyzeArgs,
    model: &LoadedModel,
    factors: &BTreeMap<ComponentId, SVDFactors>,
    masks: &MaskSet,
    train_pairs: &[PromptPair],
    report: &mut Report,
    m: &mut ManifestBuilder,
) -> Result<()> {
    let labelled = train_pairs
        .iter()
        .map(|p| Ok((p.clean_tokens.clone(), gender_of(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let ov: BTreeMap<ComponentId, SVDFactors> = factors
        .iter()
        .filter(|(id, _)| id.kind == Kind::Ov)
        .map(|(id, f)| (*id, f.clone()))
        .collect();
    let stats = ov_conditional_stats(&model.weights, &ov, &labelled)?;
    let sel = GenderSelection {
        he: model.vocab.single_token(" he")?,
        she: model.vocab.single_token(" she")?,
        min_mask: a.min_mask,
        min_diff: a.min_diff,
    };
    let dirs = select_gender_directions(&model.weights, &ov, &masks.all_values(), &stats, &sel)?;
    for d in &dirs {
        let id = d.edit.component();
        let f = &ov[&id];
        let r = logit_receptor(f, d.edit.direction, &model.weights)?;
        let top_tokens = r
            .top(TOP_RECEPTOR_TOKENS)
            .iter()
            .map(|&t| model.vocab.decode(&[t]))
            .collect::<dlens::Result<Vec<_>>>()?;
        report.gender_directions.push(GenderDirectionRow {
            direction: direction_label(&id, d.edit.direction),
            group: match d.group {
                DirectionGroup::Masculine => "masculine",
                DirectionGroup::Feminine => "feminine",
            }
            .to_string(),
            mask: d.mask,
            sigma: f.sigma[d.edit.direction],
            top_tokens,
            mu_he: d.stats.mu_he,
            std_he: d.stats.std_he,
            mu_she: d.stats.mu_she,
            std_she: d.stats.std_she,
            diff: d.stats.diff(),
        });
    }
    let edits = |g: Option<DirectionGroup>| -> Vec<Edit> {
        dirs.iter()
            .filter(|d| g.is_none_or(|g| d.group == g))
            .map(|d| d.edit.clone())
            .collect()
    };
    let experiments = [
        ("e1_swap_all_he", edits(None), Gender::He),
        ("e2_swap_all_she", edits(None), Gender::She),
        ("e3_swap_masc_he", edits(Some(DirectionGroup::Masculine)), Gender::He),
        ("e4_swap_fem_she", edits(Some(DirectionGroup::Feminine)), Gender::She),
    ];
    for (name, edits, target) in experiments {
        let spec = InterventionSpec {
            edits,
            target,
            sigma_scale: a.sigma_scale,
        };
        let p = a.out.join("specs").join(format!("{name}.json"));
        write_file(&p, &serde_json::to_string_pretty(&spec)?, m)?;
    }
    println!(
        "gender directions: {} ({} masculine, {} feminine)",
        dirs.len(),
        dirs.iter().filter(|d| d.group == DirectionGroup::Masculine).count(),
        dirs.iter().filter(|d| d.group == DirectionGroup::Feminine).count()
    );
    Ok(())
}

fn direction_analysis(
    a: &AnalyzeArgs,
    model: &LoadedModel,
    factors: &BTreeMap<ComponentId, SVDFactors>,
    masks: &MaskSet,
    pairs: &[PromptPair],
    report: &mut Report,
    m: &mut ManifestBuilder,
) -> Result<()> {
    let wanted = a
        .directions
        .iter()
        .map(|s| parse_direction(s))
        .collect::<Result<Vec<_>>>()?;
    let corpus: Vec<(Vec<u32>, usize)> = pairs
        .iter()
        .filter_map(|p| target_position(p, &model.vocab).map(|t| (p.clean_tokens.clone(), t)))
        .collect();
    if corpus.is_empty() {
        return Err(usage("no prompt in the split has a locatable target token"));
    }
    let classifier = TokenClassifier::default();
    let mut inputs: BTreeMap<usize, Vec<DirectionPrompt>> = BTreeMap::new();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (id, k) in wanted {
        let f = factors
            .get(&id)
            .ok_or_else(|| usage(format!("{id} is missing from the SVD cache")))?;
        if k >= f.rank() {
            return Err(usage(format!("{id} has rank {}, direction {k} out of range", f.rank())));
        }
        if let std::collections::btree_map::Entry::Vacant(e) = inputs.entry(id.layer) {
            e.insert(layer_inputs(&model.weights, id.layer, &corpus)?);
        }
        let prompts = &inputs[&id.layer];
        let mask = masks.values(&id).and_then(|v| v.get(k).copied());
        report
            .directions
            .push(direction_token_stats(f, k, prompts, &model.vocab, &classifier, mask)?);
        labels.push(direction_label(&id, k));
        rows.push(
            final_query_scores(f, k, &prompts[0].x)?
                .into_iter()
                .map(f64::from)
                .collect::<Vec<_>>(),
        );
    }
    let cols = corpus[0]
        .0
        .iter()
        .map(|&t| model.vocab.decode(&[t]))
        .collect::<dlens::Result<Vec<_>>>()?;
    let svg = score_heatmap_svg("direction scores from the final token", &labels, &cols, &rows);
    write_file(&a.out.join("direction_scores.svg"), &svg, m)?;
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("analyze");
    let task = parse_task(&a.task)?;
    m.config = json!({
        "task": task,
        "model": a.model.model,
        "masks": a.masks,
        "split": a.split,
        "max_prompts": a.max_prompts,
        "directions": a.directions,
        "min_mask": a.min_mask,
        "min_diff": a.min_diff,
        "sigma_scale": a.sigma_scale,
        "data": a.data.data,
        "data_seed": a.data.data_seed,
        "split_scale": a.data.split_scale,
    });
    m.seed = Some(a.data.data_seed);
    let masks = load_masks(&a.masks)?;
    m.input(&a.masks.join(MASKS_FILE))?;
    let model = load_model(&a.model.model, &mut m)?;
    let factors = load_svd(&a.cache, &model, &mut m)?;
    let splits = load_splits(task, &a.data, &model.vocab, &mut m)?;
    let train_pairs = splits.train.clone();
    let pairs = truncate(pick_split(splits, &a.split)?, a.max_prompts);

    let mm = MaskedModel::new(&model.weights, &factors)?;
    let examples = prepare_examples(&mm, &token_pairs(&pairs))?;
    let eval = evaluate_task(task, &mm, &pairs, &examples, &masks)?;
    let (kl_mean, kl_std) = mean_std(&eval.kls);

    let mut report = Report::new(Some(task.name().to_string())).with_masks(&masks, &model.weights.config);
    let s = report.sparsity.clone().expect("sparsity is filled from masks");
    report.metrics = Some(TaskMetricsRow {
        task: task.name().to_string(),
        kl_mean,
        kl_std,
        s_rel: s.s_rel,
        s_full: s.s_full,
        s_full_ov: s.s_full_ov,
        pruned_accuracy: eval.accuracy,
        exact_match: eval.exact_match,
        n: pairs.len(),
    });
    println!(
        "{}: KL {:.4} ± {:.4}  S_rel {:.4}  S_full {:.4}  S_full(OV) {:.4}  n {}",
        task.name(),
        kl_mean,
        kl_std,
        s.s_rel,
        s.s_full,
        s.s_full_ov,
        pairs.len()
    );
    if task == Task::Gp {
        if train_pairs.is_empty() {
            return Err(usage("gender statistics need a non-empty train split"));
        }
        gender_analysis(&a, &model, &factors, &masks, &train_pairs, &mut report, &mut m)?;
    }
    if !a.directions.is_empty() {
        direction_analysis(&a, &model, &factors, &masks, &pairs, &mut report, &mut m)?;
    }

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let dst = a.out.join(MASKS_FILE);
    if dst != a.masks.join(MASKS_FILE) {
        std::fs::copy(a.masks.join(MASKS_FILE), &dst).with_context(|| format!("writing {}", dst.display()))?;
        m.output(&dst);
    }
    write_model_config(&a.out, &model.weights.config, &mut m)?;
    write_file(
        &a.out.join(ANALYSIS_FILE),
        &serde_json::to_string_pretty(&report)?,
        &mut m,
    )?;
    m.finish(&a.out)?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("report");
    let masks_dir = a.masks.clone().unwrap_or_else(|| a.run_dir.clone());
    let out = a.out.clone().unwrap_or_else(|| a.run_dir.join("report"));
    m.config = json!({ "run_dir": a.run_dir, "masks": masks_dir, "out": out });
    let analysis = a.run_dir.join(ANALYSIS_FILE);
    let cfg_path = a.run_dir.join(MODEL_CONFIG_FILE);
    let masks_path = masks_dir.join(MASKS_FILE);
    let mut missing = Vec::new();
    if !masks_path.is_file() {
        missing.push(masks_path.display().to_string());
    }
    if !analysis.is_file() && !cfg_path.is_file() {
        missing.push(format!("{} or {}", analysis.display(), cfg_path.display()));
    }
    if !missing.is_empty() {
        return Err(usage(format!("missing inputs: {}", missing.join("; "))));
    }
    m.input(&masks_path)?;
    let masks = load_masks(&masks_dir)?;
    let mut rep = if analysis.is_file() {
        m.input(&analysis)?;
        let raw = std::fs::read_to_string(&analysis).with_context(|| format!("reading {}", analysis.display()))?;
        serde_json::from_str::<Report>(&raw).with_context(|| format!("parsing {}", analysis.display()))?
    } else {
        m.input(&cfg_path)?;
        let raw = std::fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
        let cfg = ModelConfig::from_hf_json(&raw)?;
        let meta_path = masks_dir.join(MASKS_META_FILE);
        let task = if meta_path.is_file() {
            m.input(&meta_path)?;
            let raw = std::fs::read_to_string(&meta_path)?;
            Some(serde_json::from_str::<CheckpointMeta>(&raw)?.task)
        } else {
            None
        };
        Report::new(task).with_masks(&masks, &cfg)
    };
    let iv = a.run_dir.join(INTERVENTIONS_FILE);
    if iv.is_file() && rep.interventions.is_empty() {
        m.input(&iv)?;
        let raw = std::fs::read_to_string(&iv)?;
        rep.interventions = serde_json::from_str::<InterventionsFile>(&raw)?.reports;
    }
    let written = export_report(&rep, &masks, &out)?;
    m.outputs(&written);
    for p in &written {
        println!("{}", p.display());
    }
    m.finish(&out)?;
    Ok(())
}
