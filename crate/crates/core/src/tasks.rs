// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt generators for the indirect-object (IOI), greater-than (GT) and
//! gender-pronoun (GP) tasks, with aligned clean/corrupt pairs.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DlensError, Result};
use crate::tensor::argmax;
use crate::tokenizer::{BpeVocab, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ioi,
    Gt,
    Gp,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ioi => "ioi",
            Task::Gt => "gt",
            Task::Gp => "gp",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = DlensError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ioi" => Ok(Task::Ioi),
            "gt" => Ok(Task::Gt),
            "gp" => Ok(Task::Gp),
            other => Err(DlensError::Invalid(format!(
                "unknown task `{other}` (expected ioi, gt or gp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub task: Task,
    pub clean_text: String,
    pub corrupt_text: String,
    pub clean_tokens: Vec<TokenId>,
    pub corrupt_tokens: Vec<TokenId>,
    pub answer_token: TokenId,
    /// IOI: subject name. GP: opposite pronoun.
    pub foil_token: Option<TokenId>,
    /// GT only: every two-digit completion greater than the start year.
    #[serde(default)]
    pub valid_answers: Vec<TokenId>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSpec {
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Ioi => SplitSpec {
                train: 1000,
                val: 200,
                test: 1000,
            },
            Task::Gt => SplitSpec {
                train: 2000,
                val: 500,
                test: 2000,
            },
            Task::Gp => SplitSpec {
                train: 1000,
                val: 155,
                test: 307,
            },
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Every count divided by `factor`, rounded up.
    pub fn scaled_down(&self, factor: usize) -> Self {
        let f = factor.max(1);
        SplitSpec {
            train: self.train.div_ceil(f),
            val: self.val.div_ceil(f),
            test: self.test.div_ceil(f),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<PromptPair>,
    pub val: Vec<PromptPair>,
    pub test: Vec<PromptPair>,
}

pub const IOI_NAMES: &[&str] = &[
    "Mary", "John", "Tom", "James", "Ben", "Sarah", "Paul", "Mark", "Anna", "Kevin", "Laura", "Lisa", "Emily",
    "Jessica", "Rachel", "Amy", "Kate", "Michael", "David", "Daniel", "Ryan", "Jason", "Brian", "Eric", "Adam",
    "Steve", "Peter", "Sam", "Chris", "Andrew", "Jack", "Helen", "Jane", "Grace", "Alex", "Joe", "George", "Frank",
    "Linda", "Susan",
];

pub const MALE_NAMES: &[&str] = &[
    "David", "John", "Michael", "James", "Robert", "Mark", "Paul", "Peter", "Tom", "Jack", "George", "Steve", "Kevin",
    "Brian", "Eric", "Daniel", "Ryan", "Jason", "Adam", "Frank",
];

pub const FEMALE_NAMES: &[&str] = &[
    "Mary", "Sarah", "Anna", "Laura", "Lisa", "Emily", "Jessica", "Rachel", "Amy", "Kate", "Helen", "Jane", "Grace",
    "Linda", "Susan", "Karen", "Nancy", "Emma", "Alice", "Julia",
];

const IOI_TEMPLATES: &[&str] = &[
    "When {A} and {B} went to the {PLACE}, {S} gave a {OBJECT} to",
    "After {A} and {B} went to the {PLACE}, {S} gave a {OBJECT} to",
    "While {A} and {B} were working at the {PLACE}, {S} gave a {OBJECT} to",
    "Then, {A} and {B} went to the {PLACE}. {S} gave a {OBJECT} to",
    "Friends {A} and {B} found a {OBJECT} at the {PLACE}. {S} gave it to",
];

pub const PLACES: &[&str] = &[
    "store",
    "garden",
    "restaurant",
    "school",
    "hospital",
    "office",
    "station",
    "house",
    "park",
    "market",
];

pub const OBJECTS: &[&str] = &[
    "drink", "book", "ring", "gift", "computer", "snack", "necklace", "bottle", "letter", "basket",
];

const GP_ADVERBS: &[&str] = &["really", "very"];
const GP_ADJECTIVES: &[&str] = &["great", "good", "nice", "kind", "smart", "funny"];
pub const GP_NOUNS: &[&str] = &[
    "friend", "athlete", "person", "student", "teacher", "doctor", "neighbor", "writer", "cook", "player",
];

/// Event nouns for the greater-than template.
pub const GT_NOUNS: &[&str] = &[
    "war",
    "treaty",
    "expedition",
    "siege",
    "reign",
    "dynasty",
    "famine",
    "plague",
    "journey",
    "voyage",
    "crusade",
    "rebellion",
    "revolt",
    "uprising",
    "campaign",
    "occupation",
    "alliance",
    "truce",
    "ceasefire",
    "blockade",
    "embargo",
    "invasion",
    "conquest",
    "settlement",
    "colony",
    "mission",
    "pilgrimage",
    "migration",
    "exile",
    "drought",
    "flood",
    "epidemic",
    "pandemic",
    "depression",
    "recession",
    "boom",
    "renaissance",
    "reformation",
    "revolution",
    "regime",
    "administration",
    "government",
    "parliament",
    "council",
    "assembly",
    "congress",
    "tribunal",
    "trial",
    "inquiry",
    "investigation",
    "survey",
    "census",
    "project",
    "construction",
    "excavation",
    "restoration",
    "renovation",
    "partnership",
    "marriage",
    "friendship",
    "rivalry",
    "feud",
    "dispute",
    "conflict",
    "struggle",
    "battle",
    "raid",
    "pursuit",
    "hunt",
    "search",
    "quest",
    "tour",
    "trip",
    "visit",
    "stay",
    "residence",
    "tenure",
    "term",
    "presidency",
    "leadership",
    "apprenticeship",
    "career",
    "contract",
    "lease",
    "loan",
    "agreement",
    "pact",
    "accord",
    "union",
    "league",
    "federation",
    "empire",
    "kingdom",
    "republic",
    "monarchy",
    "regency",
    "protectorate",
    "mandate",
    "ministry",
    "papacy",
    "bishopric",
    "abbacy",
    "lordship",
    "governorship",
    "captivity",
    "imprisonment",
    "sentence",
    "ban",
    "boycott",
    "strike",
    "protest",
    "movement",
    "festival",
    "fair",
    "exhibition",
    "tournament",
    "season",
    "period",
    "era",
    "age",
];

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in slots {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Every word that a prompt generator may emit, in the form it appears after
/// pre-tokenisation (leading space where applicable). Used to build toy
/// vocabularies in which prompts are short.
pub fn vocabulary_words() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut push = |w: String| {
        if !words.contains(&w) {
            words.push(w);
        }
    };
    for list in [
        IOI_NAMES,
        MALE_NAMES,
        FEMALE_NAMES,
        PLACES,
        OBJECTS,
        GP_ADVERBS,
        GP_ADJECTIVES,
        GP_NOUNS,
        GT_NOUNS,
    ] {
        for w in list {
            push(format!(" {w}"));
        }
    }
    for t in IOI_TEMPLATES.iter().chain(
        [
            "So {NAME} is a {ADV} {ADJ} {NOUN}, isn't",
            "The {NOUN} lasted from the year",
        ]
        .iter(),
    ) {
        for (i, w) in t.split(' ').enumerate() {
            let w: String = w.chars().filter(|c| c.is_ascii_alphabetic()).collect();
            if w.is_empty() || w.chars().all(|c| c.is_ascii_uppercase()) {
                continue;
            }
            push(if i == 0 { w } else { format!(" {w}") });
        }
    }
    for w in [" he", " she", " isn", "'t", " a", " to", " the", " year", "."] {
        push(w.to_string());
    }
    for c in 10..=17 {
        push(format!(" {c}"));
    }
    for y in 0..100 {
        push(format!("{y:02}"));
    }
    words
}

/// Names from `list` that encode to one token with a leading space.
fn single_token_names(vocab: &BpeVocab, list: &[&str]) -> Vec<(String, TokenId)> {
    list.iter()
        .filter_map(|n| vocab.single_token(&format!(" {n}")).ok().map(|t| (n.to_string(), t)))
        .collect()
}

/// Draw unique prompts until `n` are collected.
fn collect_unique(
    n: usize,
    seed: u64,
    task: Task,
    mut sample: impl FnMut(&mut ChaCha8Rng, usize) -> Result<Option<PromptPair>>,
) -> Result<Vec<PromptPair>> {
    if n == 0 {
        return Err(DlensError::Invalid("number of prompts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let max_attempts = 200 * n + 1000;
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(DlensError::Invalid(format!(
                "{} generator could not find {n} distinct length-aligned prompts (got {})",
                task.name(),
                out.len()
            )));
        }
        if let Some(p) = sample(&mut rng, out.len())? {
            if seen.insert(p.clean_text.clone()) {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Indirect-object prompts. Corruption replaces the repeated subject with a
/// third name (ABA → ABC).
pub fn gen_ioi(n: usize, seed: u64, vocab: &BpeVocab) -> Result<Vec<PromptPair>> {
    let names = single_token_names(vocab, IOI_NAMES);
    if names.len() < 3 {
        return Err(DlensError::Invalid(format!(
            "IOI needs at least 3 single-token names, vocabulary provides {}",
            names.len()
        )));
    }
    collect_unique(n, seed, Task::Ioi, |rng, _| {
        let picked: Vec<&(String, TokenId)> = names.choose_multiple(rng, 3).collect();
        let (a, b, c) = (picked[0], picked[1], picked[2]);
        let template = IOI_TEMPLATES.choose(rng).unwrap();
        let place = PLACES.choose(rng).unwrap();
        let object = OBJECTS.choose(rng).unwrap();
        // Either name may come first in the introductory clause.
        let (first, second) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        let (subject, io) = (b, a);
        let slots = |s: &str| {
            fill(
                template,
                &[
                    ("A", &first.0),
                    ("B", &second.0),
                    ("PLACE", place),
                    ("OBJECT", object),
                    ("S", s),
                ],
            )
        };
        let clean_text = slots(&subject.0);
        let corrupt_text = slots(&c.0);
        let clean_tokens = vocab.encode(&clean_text);
        let corrupt_tokens = vocab.encode(&corrupt_text);
        if clean_tokens.len() != corrupt_tokens.len() {
            return Ok(None);
        }
        let metadata = BTreeMap::from([
            ("io".to_string(), io.0.clone()),
            ("subject".to_string(), subject.0.clone()),
            ("corrupt_subject".to_string(), c.0.clone()),
            (
                "order".to_string(),
                if first.0 == io.0 { "ABBA" } else { "BABA" }.to_string(),
            ),
        ]);
        Ok(Some(PromptPair {
            task: Task::Ioi,
            clean_text,
            corrupt_text,
            clean_tokens,
            corrupt_tokens,
            answer_token: io.1,
            foil_token: Some(subject.1),
            valid_answers: vec![],
            metadata,
        }))
    })
}

/// Greater-than prompts. Start years `XXYY` use centuries 11–17 and
/// `YY ∈ [02, 98]`; the corrupt prompt uses `XX01`.
pub fn gen_gt(n: usize, seed: u64, vocab: &BpeVocab) -> Result<Vec<PromptPair>> {
    let two_digit: Vec<TokenId> = (0..100)
        .map(|y| vocab.single_token(&format!("{y:02}")))
        .collect::<Result<_>>()?;
    collect_unique(n, seed, Task::Gt, |rng, _| {
        let noun = GT_NOUNS.choose(rng).unwrap();
        let century: u32 = rng.random_range(11..=17);
        let yy: u32 = rng.random_range(2..=98);
        let prefix = |start: String| format!("The {noun} lasted from the year {start} to the year {century}");
        let clean_text = prefix(format!("{century}{yy:02}"));
        let corrupt_text = prefix(format!("{century}01"));
        let clean_tokens = vocab.encode(&clean_text);
        let corrupt_tokens = vocab.encode(&corrupt_text);
        if clean_tokens.len() != corrupt_tokens.len() {
            return Ok(None);
        }
        let valid_answers: Vec<TokenId> = ((yy + 1)..100).map(|y| two_digit[y as usize]).collect();
        let metadata = BTreeMap::from([
            ("noun".to_string(), noun.to_string()),
            ("century".to_string(), century.to_string()),
            ("yy".to_string(), format!("{yy:02}")),
        ]);
        Ok(Some(PromptPair {
            task: Task::Gt,
            clean_text,
            corrupt_text,
            clean_tokens,
            corrupt_tokens,
            answer_token: two_digit[(yy + 1) as usize],
            foil_token: None,
            valid_answers,
            metadata,
        }))
    })
}

/// Gender-pronoun prompts with a tag question. Corruption swaps the name for
/// an opposite-gender name; genders alternate so classes stay balanced.
pub fn gen_gp(n: usize, seed: u64, vocab: &BpeVocab) -> Result<Vec<PromptPair>> {
    let he = vocab.single_token(" he")?;
    let she = vocab.single_token(" she")?;
    let male = single_token_names(vocab, MALE_NAMES);
    let female = single_token_names(vocab, FEMALE_NAMES);
    if male.is_empty() || female.is_empty() {
        return Err(DlensError::Invalid(
            "GP needs single-token names of both genders in the vocabulary".into(),
        ));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut genders: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    genders.shuffle(&mut order_rng);
    collect_unique(n, seed, Task::Gp, |rng, idx| {
        let is_male = genders[idx];
        let (own, other) = if is_male { (&male, &female) } else { (&female, &male) };
        let name = own.choose(rng).unwrap();
        let swap = other.choose(rng).unwrap();
        let adv = GP_ADVERBS.choose(rng).unwrap();
        let adj = GP_ADJECTIVES.choose(rng).unwrap();
        let noun = GP_NOUNS.choose(rng).unwrap();
        let build = |nm: &str| format!("So {nm} is a {adv} {adj} {noun}, isn't");
        let clean_text = build(&name.0);
        let corrupt_text = build(&swap.0);
        let clean_tokens = vocab.encode(&clean_text);
        let corrupt_tokens = vocab.encode(&corrupt_text);
        if clean_tokens.len() != corrupt_tokens.len() {
            return Ok(None);
        }
        let (answer, foil) = if is_male { (he, she) } else { (she, he) };
        let metadata = BTreeMap::from([
            ("name".to_string(), name.0.clone()),
            ("corrupt_name".to_string(), swap.0.clone()),
            ("gender".to_string(), if is_male { "he" } else { "she" }.to_string()),
        ]);
        Ok(Some(PromptPair {
            task: Task::Gp,
            clean_text,
            corrupt_text,
            clean_tokens,
            corrupt_tokens,
            answer_token: answer,
            foil_token: Some(foil),
            valid_answers: vec![],
            metadata,
        }))
    })
}

pub fn generate(task: Task, n: usize, seed: u64, vocab: &BpeVocab) -> Result<Vec<PromptPair>> {
    match task {
        Task::Ioi => gen_ioi(n, seed, vocab),
        Task::Gt => gen_gt(n, seed, vocab),
        Task::Gp => gen_gp(n, seed, vocab),
    }
}

/// Generate `spec.total()` distinct prompts and partition them in order.
pub fn make_splits(task: Task, spec: SplitSpec, seed: u64, vocab: &BpeVocab) -> Result<Splits> {
    let mut all = generate(task, spec.total(), seed, vocab)?;
    let test = all.split_off(spec.train + spec.val);
    let val = all.split_off(spec.train);
    Ok(Splits { train: all, val, test })
}

/// Key position a direction analysis should single out: the `YY` token for
/// GT, the first mention of the indirect object for IOI and the name for GP.
pub fn target_position(pair: &PromptPair, vocab: &BpeVocab) -> Option<usize> {
    let key = match pair.task {
        Task::Gt => "yy",
        Task::Ioi => "io",
        Task::Gp => "name",
    };
    let want = pair.metadata.get(key)?.trim();
    let text: Vec<String> = pair
        .clean_tokens
        .iter()
        .map(|&t| vocab.decode(&[t]).map(|s| s.trim().to_string()).unwrap_or_default())
        .collect();
    if pair.task == Task::Gt {
        // The YY token directly follows the first century token.
        let century = pair.metadata.get("century")?.trim();
        return (1..text.len()).find(|&j| text[j - 1] == century && text[j] == want);
    }
    text.iter().position(|s| s == want)
}

pub fn write_jsonl(path: &Path, pairs: &[PromptPair]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| DlensError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| DlensError::io(path, e))?;
    }
    w.flush().map_err(|e| DlensError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PromptPair>> {
    let file = std::fs::File::open(path).map_err(|e| DlensError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DlensError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PromptPair = serde_json::from_str(&line)
            .map_err(|e| DlensError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if p.clean_tokens.len() != p.corrupt_tokens.len() {
            return Err(DlensError::Invalid(format!(
                "{}:{}: clean and corrupt token lengths differ",
                path.display(),
                i + 1
            )));
        }
        out.push(p);
    }
    Ok(out)
}

/// Per-prompt task score at the final position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    /// `None` where the task has no binary accuracy (GT).
    pub accuracy: Option<f64>,
    pub exact_match: f64,
}

pub fn task_metric(task: Task, logits: &[f32], pair: &PromptPair) -> TaskRecord {
    let top = argmax(logits) as TokenId;
    let binary = |foil: Option<TokenId>| {
        foil.map(|f| {
            if logits[pair.answer_token as usize] > logits[f as usize] {
                1.0
            } else {
                0.0
            }
        })
    };
    match task {
        Task::Ioi | Task::Gp => TaskRecord {
            accuracy: binary(pair.foil_token),
            exact_match: f64::from(u8::from(top == pair.answer_token)),
        },
        Task::Gt => TaskRecord {
            accuracy: None,
            exact_match: f64::from(u8::from(pair.valid_answers.contains(&top))),
        },
    }
}
