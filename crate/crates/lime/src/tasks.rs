//! Synthetic reasoning tasks: generators, tokenizers, batching, evaluation.
//!
//! Two task families are generated from scratch, both cheap to produce in
//! bulk and exactly checkable:
//!
//! * **Arithmetic expressions** (`aet`): integer expressions over `+ - × ÷`
//!   whose every intermediate result is an integer, paired with a chain of
//!   single-reduction steps (`(7+5)÷4=` → `12÷4=3`). Each step reduces the
//!   leftmost operator whose operands are both literals — innermost
//!   parentheses first, precedence respected.
//! * **DAG entailment** (`prosqa`): a shuffled list of `Every X is a Y.`
//!   rules over pseudoword concepts plus a few named-entity facts, a
//!   two-choice question (`Is Tom a lempus or scrompus?`), and a solution
//!   chain following edges to the one reachable choice.
//!
//! Samples are stored as human-readable text; a [`TaskVocab`] provides the
//! lossless token-id bijection (symbol-level for arithmetic, word-level for
//! entailment, byte-level for plain-text corpora), so ids are always
//! derivable and the JSONL files stay auditable.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::rng::{epoch_rng, stream_rng, stream};
use crate::{Error, Result};

/// Target id meaning "no loss at this position".
pub const IGNORE_INDEX: u32 = u32::MAX;

/// Largest absolute value any arithmetic intermediate may take.
pub const AET_VALUE_CAP: i64 = 999;
/// Operand range for arithmetic leaves.
pub const AET_LEAF_RANGE: std::ops::RangeInclusive<i64> = 1..=12;

/// Generator provenance carried with every sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// `aet` or `prosqa`.
    pub task: String,
    /// Operand count (aet) or chain depth (prosqa).
    pub param: usize,
    /// Dataset seed the sample was drawn under.
    pub seed: u64,
    /// Position within the generated dataset.
    pub index: usize,
}

/// One generated example. `prompt` ends with the task's natural separator
/// (`=` or `?`), `solution` is the full supervised continuation (steps plus
/// final answer), and `answer` is the canonical string accuracy compares
/// against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub prompt: String,
    pub solution: String,
    pub answer: String,
    pub meta: SampleMeta,
}

// ---------------------------------------------------------------------------
// Arithmetic expression task
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum AetOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl AetOp {
    fn precedence(self) -> u8 {
        match self {
            AetOp::Add | AetOp::Sub => 1,
            AetOp::Mul | AetOp::Div => 2,
        }
    }

    fn glyph(self) -> char {
        match self {
            AetOp::Add => '+',
            AetOp::Sub => '-',
            AetOp::Mul => '×',
            AetOp::Div => '÷',
        }
    }

    /// Applies the op under the task's integrality and magnitude rules.
    fn apply(self, l: i64, r: i64) -> Option<i64> {
        let v = match self {
            AetOp::Add => l + r,
            AetOp::Sub => l - r,
            AetOp::Mul => l * r,
            AetOp::Div => {
                if r == 0 || l % r != 0 {
                    return None;
                }
                l / r
            }
        };
        (v.abs() <= AET_VALUE_CAP).then_some(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Expr {
    Lit(i64),
    Bin(AetOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    fn eval(&self) -> Option<i64> {
        match self {
            Expr::Lit(v) => Some(*v),
            Expr::Bin(op, l, r) => op.apply(l.eval()?, r.eval()?),
        }
    }

    /// Renders with minimal parentheses: a child is wrapped when its
    /// precedence is lower than its parent's, or equal on the right-hand
    /// side (so `a-(b+c)` and `a+(b+c)` both keep their tree shape), and
    /// negative literals are wrapped whenever they sit under an operator.
    fn render(&self) -> String {
        fn go(e: &Expr, out: &mut String, parent: Option<(u8, bool)>) {
            match e {
                Expr::Lit(v) => {
                    let neg = *v < 0 && parent.is_some();
                    if neg {
                        out.push('(');
                    }
                    out.push_str(&v.to_string());
                    if neg {
                        out.push(')');
                    }
                }
                Expr::Bin(op, l, r) => {
                    let prec = op.precedence();
                    let wrap = match parent {
                        Some((pp, right)) => prec < pp || (prec == pp && right),
                        None => false,
                    };
                    if wrap {
                        out.push('(');
                    }
                    go(l, out, Some((prec, false)));
                    out.push(op.glyph());
                    go(r, out, Some((prec, true)));
                    if wrap {
                        out.push(')');
                    }
                }
            }
        }
        let mut s = String::new();
        go(self, &mut s, None);
        s
    }

    /// Evaluates the leftmost operator whose operands are both literals,
    /// returning the reduced tree; `None` when already a literal.
    fn reduce_leftmost(&self) -> Option<Expr> {
        match self {
            Expr::Lit(_) => None,
            Expr::Bin(op, l, r) => {
                if let (Expr::Lit(a), Expr::Lit(b)) = (l.as_ref(), r.as_ref()) {
                    // generation guarantees applicability
                    return Some(Expr::Lit(op.apply(*a, *b).expect("invalid reduction")));
                }
                if let Some(l2) = l.reduce_leftmost() {
                    return Some(Expr::Bin(*op, Box::new(l2), r.clone()));
                }
                let r2 = r.reduce_leftmost().expect("internal node with no reduction");
                Some(Expr::Bin(*op, l.clone(), Box::new(r2)))
            }
        }
    }
}

/// Random binary tree with `leaves` literal slots.
fn random_tree(rng: &mut ChaCha8Rng, leaves: usize) -> Expr {
    if leaves == 1 {
        return Expr::Lit(rng.gen_range(AET_LEAF_RANGE));
    }
    let ops = [AetOp::Add, AetOp::Sub, AetOp::Mul, AetOp::Div];
    let op = ops[rng.gen_range(0..4)];
    let left = rng.gen_range(1..leaves);
    let l = random_tree(rng, left);
    let r = random_tree(rng, leaves - left);
    Expr::Bin(op, Box::new(l), Box::new(r))
}

/// Generates `count` arithmetic samples with exactly `n_operands` literals
/// each. Division is only emitted where it is exact and every intermediate
/// stays within ±[`AET_VALUE_CAP`]; offending trees are rejection-sampled
/// away, so generation always succeeds.
pub fn gen_arithmetic(n_operands: usize, count: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n_operands < 2 || n_operands > 12 {
        return Err(Error::Config(format!("n_operands {} outside 2..=12", n_operands)));
    }
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, stream::DATA_GEN);
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let expr = loop {
            let t = random_tree(&mut rng, n_operands);
            if t.eval().is_some() {
                break t;
            }
        };
        let prompt = format!("{}=", expr.render());
        let mut steps = Vec::new();
        let mut cur = expr;
        while let Some(next) = cur.reduce_leftmost() {
            steps.push(next.render());
            cur = next;
        }
        let answer = steps.last().expect("at least one reduction").clone();
        out.push(SyntheticSample {
            prompt,
            solution: steps.join("="),
            answer,
            meta: SampleMeta { task: "aet".into(), param: n_operands, seed, index },
        });
    }
    Ok(out)
}

/// Concatenates arithmetic samples into newline-separated plain text for
/// byte-level language modelling, cycling the operand count through
/// `operand_tiers`.
pub fn aet_corpus_text(operand_tiers: &[usize], count: usize, seed: u64) -> Result<String> {
    if operand_tiers.is_empty() {
        return Err(Error::Config("need at least one operand tier".into()));
    }
    let mut text = String::new();
    for (pos, &tier) in operand_tiers.iter().enumerate() {
        let share = count / operand_tiers.len()
            + usize::from(pos < count % operand_tiers.len());
        if share == 0 {
            continue;
        }
        for s in gen_arithmetic(tier, share, seed.wrapping_add(pos as u64))? {
            text.push_str(&s.prompt);
            text.push_str(&s.solution);
            text.push('\n');
        }
    }
    Ok(text)
}

// ---------------------------------------------------------------------------
// ProsQA-style DAG entailment
// ---------------------------------------------------------------------------

/// Pseudoword concept inventory (onset + "pus", shumpus-style).
const CONCEPT_ONSETS: &[&str] = &[
    "shum", "rem", "yim", "ter", "fom", "ger", "brim", "ror", "scrom", "lem", "tim", "boom",
    "lor", "dum", "yer", "vap", "zon", "quil", "fra", "blon", "crin", "dro", "gle", "hip", "jor",
    "kel", "mun", "nar", "plo", "stra", "tru", "vim", "wex", "yol", "zam", "brol", "chi", "drep",
    "flim", "grom",
];

const ENTITY_NAMES: &[&str] = &["Tom", "Alex", "Davis", "Sam", "Max", "Kim", "Lee", "Ann", "Joe", "Pat"];

/// Graph-shape knobs for [`gen_prosqa`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProsqaParams {
    /// Concepts per sample.
    pub n_concepts: usize,
    /// `Every X is a Y.` rules per sample.
    pub n_rules: usize,
    /// Solution chain length (rule applications) is drawn uniformly from
    /// `min_depth..=max_depth`.
    pub min_depth: usize,
    pub max_depth: usize,
}

impl Default for ProsqaParams {
    fn default() -> Self {
        ProsqaParams { n_concepts: 20, n_rules: 23, min_depth: 1, max_depth: 3 }
    }
}

/// Multi-source BFS levels over `edges` (adjacency by concept index);
/// `usize::MAX` marks unreachable nodes.
fn bfs_levels(n: usize, edges: &[(usize, usize)], starts: &[usize]) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
    }
    let mut level = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for &s in starts {
        if level[s] == usize::MAX {
            level[s] = 0;
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    level
}

/// Generates `count` two-choice entailment samples. Each sample's rules form
/// a DAG by construction (edges only go forward in a random topological
/// order); exactly one of the question's two choices is reachable from the
/// queried entity's facts, and the solution follows a shortest path.
pub fn gen_prosqa(params: &ProsqaParams, count: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    if params.n_concepts < 4 || params.n_concepts > CONCEPT_ONSETS.len() {
        return Err(Error::Config(format!(
            "n_concepts {} outside 4..={}",
            params.n_concepts,
            CONCEPT_ONSETS.len()
        )));
    }
    let max_edges = params.n_concepts * (params.n_concepts - 1) / 2;
    if params.n_rules < 2 || params.n_rules > max_edges {
        return Err(Error::Config(format!("n_rules {} outside 2..={}", params.n_rules, max_edges)));
    }
    if params.min_depth < 1 || params.min_depth > params.max_depth {
        return Err(Error::Config("need 1 <= min_depth <= max_depth".into()));
    }
    let mut rng = stream_rng(seed, stream::DATA_GEN);
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let depth = rng.gen_range(params.min_depth..=params.max_depth);
        let sample = (0..1000)
            .find_map(|_| try_prosqa_sample(&mut rng, params, depth))
            .ok_or_else(|| {
                Error::Data(format!(
                    "could not satisfy prosqa parameters {:?} at depth {} after 1000 attempts",
                    params, depth
                ))
            })?;
        let (prompt, solution, answer) = sample;
        out.push(SyntheticSample {
            prompt,
            solution,
            answer,
            meta: SampleMeta { task: "prosqa".into(), param: depth, seed, index },
        });
    }
    Ok(out)
}

fn try_prosqa_sample(
    rng: &mut ChaCha8Rng,
    params: &ProsqaParams,
    depth: usize,
) -> Option<(String, String, String)> {
    let n = params.n_concepts;
    let mut names: Vec<String> =
        CONCEPT_ONSETS.iter().map(|o| format!("{}pus", o)).collect();
    names.shuffle(rng);
    names.truncate(n);
    let mut entities: Vec<&str> = ENTITY_NAMES.to_vec();
    entities.shuffle(rng);
    let entities = &entities[..3];
    let hero = entities[0];

    // Edges go forward in a random topological order — acyclic for free.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut pos = vec![0usize; n];
    for (p, &c) in order.iter().enumerate() {
        pos[c] = p;
    }
    let mut edge_set = BTreeSet::new();
    let mut guard = 0;
    while edge_set.len() < params.n_rules && guard < 10_000 {
        guard += 1;
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b {
            continue;
        }
        let (lo, hi) = if pos[a] < pos[b] { (a, b) } else { (b, a) };
        edge_set.insert((lo, hi));
    }
    if edge_set.len() < params.n_rules {
        return None;
    }
    let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();

    // The queried entity gets 1-2 starting facts; the others get one each.
    let n_hero_facts = rng.gen_range(1..=2);
    let mut fact_pool: Vec<usize> = (0..n).collect();
    fact_pool.shuffle(rng);
    let hero_facts: Vec<usize> = fact_pool[..n_hero_facts].to_vec();
    let noise_facts: Vec<(usize, usize)> =
        (1..3).map(|e| (e, fact_pool[n_hero_facts + e - 1])).collect();

    let level = bfs_levels(n, &edges, &hero_facts);
    let targets: Vec<usize> = (0..n).filter(|&c| level[c] == depth).collect();
    let target = *pick(rng, &targets)?;
    // Distractors must be plausible (mentioned in some rule) but unreachable.
    let mentioned: BTreeSet<usize> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    let distractors: Vec<usize> = (0..n)
        .filter(|&c| level[c] == usize::MAX && mentioned.contains(&c) && c != target)
        .collect();
    let distractor = *pick(rng, &distractors)?;

    // Shortest path via BFS parents from the hero's facts to the target.
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in &edges {
        adj[a].push(b);
    }
    let mut parent = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    for &s in &hero_facts {
        if !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                parent[v] = u;
                queue.push_back(v);
            }
        }
    }
    let mut chain = vec![target];
    while parent[*chain.last().unwrap()] != usize::MAX {
        chain.push(parent[*chain.last().unwrap()]);
    }
    chain.reverse();
    debug_assert_eq!(chain.len(), depth + 1);

    let mut sentences: Vec<String> = edges
        .iter()
        .map(|&(a, b)| format!("Every {} is a {}.", names[a], names[b]))
        .collect();
    for &f in &hero_facts {
        sentences.push(format!("{} is a {}.", hero, names[f]));
    }
    for &(e, f) in &noise_facts {
        sentences.push(format!("{} is a {}.", entities[e], names[f]));
    }
    sentences.shuffle(rng);
    let (first, second) = if rng.gen_bool(0.5) {
        (target, distractor)
    } else {
        (distractor, target)
    };
    let prompt = format!(
        "{} Is {} a {} or {}?",
        sentences.join(" "),
        hero,
        names[first],
        names[second]
    );
    let mut steps = vec![format!("{} is a {}.", hero, names[chain[0]])];
    for w in chain.windows(2) {
        steps.push(format!("Every {} is a {}.", names[w[0]], names[w[1]]));
    }
    let answer = format!("{} is a {}.", hero, names[target]);
    steps.push(answer.clone());
    Some((prompt, steps.join(" "), answer))
}

fn pick<'v, T>(rng: &mut ChaCha8Rng, xs: &'v [T]) -> Option<&'v T> {
    if xs.is_empty() {
        None
    } else {
        Some(&xs[rng.gen_range(0..xs.len())])
    }
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// How text maps to tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    /// Every character is a token (arithmetic's closed alphabet).
    Symbols,
    /// Whitespace-separated words with `.` and `?` split off (entailment).
    Words,
    /// Raw UTF-8 bytes (plain-text corpora).
    Bytes,
}

/// Bijective token <-> id map with dense ids: specials first, then the
/// token inventory in sorted order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskVocab {
    pub kind: TokenKind,
    tokens: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

/// Special token ids, fixed across all vocabularies.
pub mod special {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    /// Reserved boundary marker (document separator in corpus mode); the
    /// reasoning tasks rely on their natural separators (`=`, `?`) instead.
    pub const SEP: u32 = 3;
    pub const COUNT: u32 = 4;
    pub const NAMES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];
}

impl TaskVocab {
    fn from_tokens(kind: TokenKind, inventory: Vec<String>) -> TaskVocab {
        let mut tokens: Vec<String> = special::NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(inventory);
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        TaskVocab { kind, tokens, lookup }
    }

    /// Scans `samples` (or ignores them in byte mode) and builds the vocab.
    pub fn build(samples: &[SyntheticSample], kind: TokenKind) -> Result<TaskVocab> {
        let inventory: Vec<String> = match kind {
            TokenKind::Bytes => (0u16..256).map(|b| format!("<0x{:02x}>", b)).collect(),
            _ => {
                if samples.is_empty() {
                    return Err(Error::Data("cannot build a vocabulary from no samples".into()));
                }
                let mut set = BTreeSet::new();
                for s in samples {
                    for text in [&s.prompt, &s.solution, &s.answer] {
                        for tok in split_text(text, kind) {
                            set.insert(tok);
                        }
                    }
                }
                set.into_iter().collect()
            }
        };
        Ok(TaskVocab::from_tokens(kind, inventory))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Text to ids; unknown tokens are an error (the task alphabets are
    /// closed, so an unknown token means mismatched vocab and data).
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self.kind {
            TokenKind::Bytes => {
                Ok(text.as_bytes().iter().map(|&b| special::COUNT + b as u32).collect())
            }
            _ => split_text(text, self.kind)
                .into_iter()
                .map(|tok| {
                    self.lookup.get(&tok).copied().ok_or_else(|| {
                        Error::Data(format!("token '{}' not in vocabulary", tok))
                    })
                })
                .collect(),
        }
    }

    /// Ids back to text. Specials are dropped; decoding stops at `<eos>`.
    /// Byte mode reassembles UTF-8 (invalid sequences become U+FFFD).
    pub fn decode(&self, ids: &[u32]) -> String {
        if self.kind == TokenKind::Bytes {
            let bytes: Vec<u8> = ids
                .iter()
                .take_while(|&&id| id != special::EOS)
                .filter(|&&id| id >= special::COUNT)
                .map(|&id| (id - special::COUNT) as u8)
                .collect();
            return String::from_utf8_lossy(&bytes).into_owned();
        }
        let mut out = String::new();
        for &id in ids {
            if id == special::EOS {
                break;
            }
            if id < special::COUNT {
                continue;
            }
            match self.kind {
                TokenKind::Bytes => unreachable!(),
                TokenKind::Symbols => match self.tokens.get(id as usize) {
                    Some(t) => out.push_str(t),
                    None => out.push('\u{FFFD}'),
                },
                TokenKind::Words => match self.tokens.get(id as usize) {
                    Some(t) => {
                        if !out.is_empty() && t != "." && t != "?" {
                            out.push(' ');
                        }
                        out.push_str(t);
                    }
                    None => out.push('\u{FFFD}'),
                },
            }
        }
        out
    }

    /// Display form of one token id: specials by name, printable bytes as
    /// their character, other bytes as `<0xhh>`.
    pub fn token_text(&self, id: u32) -> String {
        if self.kind == TokenKind::Bytes && id >= special::COUNT {
            let b = (id - special::COUNT) as u8;
            if b.is_ascii_graphic() || b == b' ' {
                return (b as char).to_string();
            }
        }
        self.tokens.get(id as usize).cloned().unwrap_or_else(|| format!("<unk:{}>", id))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TaskVocab> {
        let json = std::fs::read_to_string(path)?;
        let mut v: TaskVocab = serde_json::from_str(&json)?;
        v.lookup = v
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if v.tokens.len() < special::COUNT as usize
            || special::NAMES.iter().zip(&v.tokens).any(|(a, b)| a != b)
        {
            return Err(Error::Data(format!("{}: malformed vocabulary header", path.display())));
        }
        Ok(v)
    }
}

fn split_text(text: &str, kind: TokenKind) -> Vec<String> {
    match kind {
        TokenKind::Symbols => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        TokenKind::Words => {
            let mut out = Vec::new();
            for word in text.split_whitespace() {
                let trimmed = word.trim_end_matches(['.', '?']);
                if !trimmed.is_empty() {
                    out.push(trimmed.to_string());
                }
                for suffix in word[trimmed.len()..].chars() {
                    out.push(suffix.to_string());
                }
            }
            out
        }
        TokenKind::Bytes => unreachable!("byte mode never splits strings"),
    }
}

// ---------------------------------------------------------------------------
// Answer extraction
// ---------------------------------------------------------------------------

/// Task discriminator for answer extraction and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Aet,
    Prosqa,
}

/// Pulls the canonical answer out of a full token sequence (prompt plus
/// generated continuation). Arithmetic: the last integer after the final
/// `=`. Entailment: the final `X is a Y.` clause. Returns `None` when the
/// pattern is absent — callers score that as incorrect.
pub fn extract_answer(vocab: &TaskVocab, ids: &[u32], kind: TaskKind) -> Option<String> {
    let text = vocab.decode(ids);
    match kind {
        TaskKind::Aet => {
            let tail = &text[text.rfind('=')? + '='.len_utf8()..];
            let mut best: Option<(usize, usize)> = None;
            let bytes = tail.as_bytes();
            let mut i = 0;
            while i < bytes.len() {
                if bytes[i].is_ascii_digit() {
                    let start = if i > 0 && bytes[i - 1] == b'-' { i - 1 } else { i };
                    let mut end = i;
                    while end < bytes.len() && bytes[end].is_ascii_digit() {
                        end += 1;
                    }
                    best = Some((start, end));
                    i = end;
                } else {
                    i += 1;
                }
            }
            best.map(|(s, e)| tail[s..e].to_string())
        }
        TaskKind::Prosqa => {
            let words = split_text(&text, TokenKind::Words);
            let dot = words.iter().rposition(|w| w == ".")?;
            if dot < 4 || words[dot - 3] != "is" || words[dot - 2] != "a" {
                return None;
            }
            let (x, y) = (&words[dot - 4], &words[dot - 1]);
            if x == "." || x == "?" || y == "." || y == "?" {
                return None;
            }
            Some(format!("{} is a {}.", x, y))
        }
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Which positions carry loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Every non-pad next-token prediction (language modelling).
    AllTokens,
    /// Only positions predicting solution tokens (and `<eos>`); prompt and
    /// pad predictions are ignored (answer-supervised fine-tuning).
    SolutionOnly,
}

/// One training batch: `inputs` and `targets` are `[batch, seq]` row-major,
/// with `targets[i] = inputs[i+1]`-style next-token alignment and
/// [`IGNORE_INDEX`] marking positions that carry no loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// 1.0 where the position carries loss, 0.0 elsewhere.
    pub fn loss_mask(&self) -> Vec<f32> {
        self.targets.iter().map(|&t| if t == IGNORE_INDEX { 0.0 } else { 1.0 }).collect()
    }
}

/// Deterministic epoch iterator over per-sample rows. Construction encodes
/// and validates every sample; iteration is allocation-light.
pub struct BatchIter {
    rows: std::rc::Rc<Vec<(Vec<u32>, usize)>>, // (BOS+prompt+solution+EOS, solution start)
    order: Vec<usize>,
    batch: usize,
    seq: usize,
    mode: LossMode,
    cursor: usize,
}

/// Builds the epoch's batches for `samples`. Shuffling is a pure function of
/// `(seed, epoch)`, so any epoch can be replayed without iterating previous
/// ones — checkpoint resume depends on that. A sample whose encoding exceeds
/// `seq_len + 1` tokens is an error naming the sample.
pub fn batch_iter(
    samples: &[SyntheticSample],
    vocab: &TaskVocab,
    batch_size: usize,
    seq_len: usize,
    mode: LossMode,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::Data("no samples to batch".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut ids = vec![special::BOS];
        ids.extend(vocab.encode(&s.prompt)?);
        let solution_start = ids.len();
        ids.extend(vocab.encode(&s.solution)?);
        ids.push(special::EOS);
        if ids.len() > seq_len + 1 {
            return Err(Error::Data(format!(
                "sample {} needs {} tokens but seq_len {} admits {}",
                i,
                ids.len(),
                seq_len,
                seq_len + 1
            )));
        }
        rows.push((ids, solution_start));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = epoch_rng(seed, stream::SHUFFLE, epoch);
    order.shuffle(&mut rng);
    Ok(BatchIter {
        rows: std::rc::Rc::new(rows),
        order,
        batch: batch_size,
        seq: seq_len,
        mode,
        cursor: 0,
    })
}

impl BatchIter {
    /// Batches per epoch (the final one may be smaller).
    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl Iterator for BatchIter {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        let b = idx.len();
        let mut inputs = vec![special::PAD; b * self.seq];
        let mut targets = vec![IGNORE_INDEX; b * self.seq];
        for (bi, &si) in idx.iter().enumerate() {
            let (row, sol_start) = &self.rows[si];
            for i in 0..self.seq {
                if i < row.len() {
                    inputs[bi * self.seq + i] = row[i];
                }
                if i + 1 < row.len() {
                    let keep = match self.mode {
                        LossMode::AllTokens => true,
                        LossMode::SolutionOnly => i + 1 >= *sol_start,
                    };
                    if keep {
                        targets[bi * self.seq + i] = row[i + 1];
                    }
                }
            }
        }
        self.cursor = end;
        Some(Batch { inputs, targets, batch: b, seq: self.seq })
    }
}

/// Longest encoded row (`<bos>` + prompt + solution + `<eos>`) over a
/// dataset — the minimum workable `seq_len` is this minus one.
pub fn max_row_tokens(samples: &[SyntheticSample], vocab: &TaskVocab) -> Result<usize> {
    let mut max = 0;
    for s in samples {
        let n = 2 + vocab.encode(&s.prompt)?.len() + vocab.encode(&s.solution)?.len();
        max = max.max(n);
    }
    Ok(max)
}

/// Deterministic epoch iterator over contiguous windows of a byte corpus.
pub struct CorpusIter {
    ids: std::rc::Rc<Vec<u32>>,
    order: Vec<usize>,
    batch: usize,
    seq: usize,
    cursor: usize,
}

/// Chunks `text` into non-overlapping `seq_len`-token windows (next-token
/// targets come from the following byte) and shuffles window order as a pure
/// function of `(seed, epoch)`.
pub fn corpus_iter(
    ids: std::rc::Rc<Vec<u32>>,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    epoch: u64,
) -> Result<CorpusIter> {
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::Config("batch_size and seq_len must be at least 1".into()));
    }
    if ids.len() < seq_len + 1 {
        return Err(Error::Data(format!(
            "corpus has {} tokens; need at least seq_len + 1 = {}",
            ids.len(),
            seq_len + 1
        )));
    }
    let windows = (ids.len() - 1) / seq_len;
    let mut order: Vec<usize> = (0..windows).collect();
    let mut rng = epoch_rng(seed, stream::SHUFFLE, epoch);
    order.shuffle(&mut rng);
    Ok(CorpusIter { ids, order, batch: batch_size, seq: seq_len, cursor: 0 })
}

impl CorpusIter {
    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Windows per epoch.
    pub fn windows(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for CorpusIter {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        let b = idx.len();
        let mut inputs = Vec::with_capacity(b * self.seq);
        let mut targets = Vec::with_capacity(b * self.seq);
        for &w in idx {
            let s = w * self.seq;
            inputs.extend_from_slice(&self.ids[s..s + self.seq]);
            targets.extend_from_slice(&self.ids[s + 1..s + self.seq + 1]);
        }
        self.cursor = end;
        Some(Batch { inputs, targets, batch: b, seq: self.seq })
    }
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

/// Writes one JSON object per line.
pub fn save_jsonl(samples: &[SyntheticSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<SyntheticSample>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SyntheticSample = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {}", path.display(), i + 1, e)))?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    Ok(out)
}
