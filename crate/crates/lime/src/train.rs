//! Training and fine-tuning: grouped AdamW, LR schedules, masked-loss
//! steps, evaluation, metric logging and binary checkpoints.
//!
//! The recipe treats router weights specially throughout: they get their
//! own (higher) learning rate, never receive weight decay, and their
//! gradients are re-masked every step so entries a routing variant forbids
//! stay exactly zero forever.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::model::{
    bind_params, forward, is_router_param, Bind, LimeConfig, Model, RouterBank,
};
use crate::tasks::{
    batch_iter, corpus_iter, special, Batch, LossMode, SyntheticSample, TaskKind, TaskVocab,
    IGNORE_INDEX,
};
use crate::tensor::optim::{clip_global_norm, AdamW, Moments};
use crate::tensor::{GradGraph, Tensor};
use crate::{Error, Result};

/// Learning-rate decay shape after warmup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Cosine from peak to `min_lr`, reaching it exactly at the last step.
    Cosine,
    /// Straight line from peak to zero at the last step.
    Linear,
}

/// Full optimization recipe. Serialization mirrors the field names 1:1 so a
/// JSON config file reads the same as the struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Router group's peak learning rate (routers want a much larger step).
    pub router_lr: f64,
    pub weight_decay: f64,
    /// Hard-coded to zero by default; routers are never decayed.
    pub router_weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub warmup_steps: u64,
    pub min_lr: f64,
    /// Optimizer steps the schedule spans; 0 means "derive from `epochs`".
    pub max_steps: u64,
    /// Epochs to run when `max_steps` is 0.
    pub epochs: u64,
    /// Pause the run after this many total steps (0 = run to the end). The
    /// schedule still spans `max_steps`/`epochs`, so a paused-and-resumed
    /// run retraces an uninterrupted one exactly.
    pub halt_step: u64,
    /// Effective batch size (sequences per optimizer step).
    pub batch_size: usize,
    /// Sequences per forward/backward pass; gradients accumulate until
    /// `batch_size` is reached. 0 means "= batch_size" (no accumulation).
    pub micro_batch: usize,
    pub seq_len: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Save `latest.ckpt` every this many steps (0 = only the final one).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            router_lr: 1e-2,
            weight_decay: 0.1,
            router_weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            schedule: Schedule::Cosine,
            warmup_steps: 200,
            min_lr: 1e-6,
            max_steps: 0,
            epochs: 0,
            halt_step: 0,
            batch_size: 64,
            micro_batch: 0,
            seq_len: 256,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.base_lr > 0.0) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.router_lr < 0.0 || self.min_lr < 0.0 {
            return fail("learning rates must be non-negative".into());
        }
        if self.min_lr > self.base_lr {
            return fail(format!("min_lr {} exceeds base_lr {}", self.min_lr, self.base_lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{} must be in [0,1), got {}", name, b));
            }
        }
        if !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return fail("eps and clip_norm must be positive".into());
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return fail("need batch_size >= 1 and seq_len >= 2".into());
        }
        if self.micro_batch() > self.batch_size || self.batch_size % self.micro_batch() != 0 {
            return fail(format!(
                "micro_batch {} must divide batch_size {}",
                self.micro_batch(),
                self.batch_size
            ));
        }
        if self.max_steps == 0 && self.epochs == 0 {
            return fail("set max_steps or epochs".into());
        }
        Ok(())
    }

    /// Sequences per forward pass.
    pub fn micro_batch(&self) -> usize {
        if self.micro_batch == 0 {
            self.batch_size
        } else {
            self.micro_batch
        }
    }

    /// Micro-batches accumulated per optimizer step.
    pub fn accum_factor(&self) -> usize {
        self.batch_size / self.micro_batch()
    }

    /// Total optimizer steps given the epoch length.
    pub fn resolve_max_steps(&self, steps_per_epoch: u64) -> Result<u64> {
        let max = if self.max_steps > 0 { self.max_steps } else { self.epochs * steps_per_epoch };
        if max == 0 {
            return Err(Error::Config("schedule resolves to zero steps".into()));
        }
        if self.warmup_steps >= max {
            return Err(Error::Config(format!(
                "warmup {} must be shorter than the run ({} steps)",
                self.warmup_steps, max
            )));
        }
        Ok(max)
    }
}

/// Per-group learning rates at `step` (0-based): `(base, router)`.
///
/// Linear warmup from 0 over `warmup_steps`, then the configured decay down
/// to `min_lr` (cosine) or 0 (linear) reached exactly at `max_steps`. Steps
/// past the end clamp to the final value. The router group follows the same
/// shape scaled to its own peak.
pub fn lr_at(cfg: &TrainConfig, step: u64, max_steps: u64) -> (f64, f64) {
    let base = if step < cfg.warmup_steps {
        cfg.base_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        let span = max_steps.saturating_sub(cfg.warmup_steps).max(1);
        let progress = (step - cfg.warmup_steps).min(span) as f64 / span as f64;
        match cfg.schedule {
            Schedule::Cosine => {
                cfg.min_lr
                    + (cfg.base_lr - cfg.min_lr)
                        * 0.5
                        * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            Schedule::Linear => cfg.base_lr * (1.0 - progress),
        }
    };
    (base, base * cfg.router_lr / cfg.base_lr)
}

/// Disjoint name partition for the two optimizer groups. Frozen parameters
/// (the `average` variant's routers) appear in neither.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroups {
    pub base: Vec<String>,
    pub router: Vec<String>,
}

pub fn param_groups(params: &BTreeMap<String, Tensor>, bank: &RouterBank) -> ParamGroups {
    let mut base = Vec::new();
    let mut router = Vec::new();
    for name in params.keys() {
        if is_router_param(name) {
            if bank.trainable {
                router.push(name.clone());
            }
        } else {
            base.push(name.clone());
        }
    }
    ParamGroups { base, router }
}

/// One metrics record, logged per optimizer step. `lr` is the base group's
/// rate. `wall_ms` is excluded from determinism comparisons — it is the
/// only field two identical runs may disagree on.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    /// Equality on the deterministic fields.
    pub fn same_metrics(&self, other: &StepRecord) -> bool {
        self.step == other.step
            && self.loss == other.loss
            && self.lr == other.lr
            && self.grad_norm == other.grad_norm
    }
}

/// Line-buffered JSONL metrics writer; a `None` path logs nowhere.
pub struct MetricsLog {
    out: Option<std::io::BufWriter<std::fs::File>>,
}

impl MetricsLog {
    pub fn create(path: Option<&Path>, append: bool) -> Result<MetricsLog> {
        let out = match path {
            Some(p) => {
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(append)
                    .write(true)
                    .truncate(!append)
                    .open(p)?;
                Some(std::io::BufWriter::new(f))
            }
            None => None,
        };
        Ok(MetricsLog { out })
    }

    pub fn log(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(w) = &mut self.out {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}

/// Owns the model, optimizer state and step counter for one run.
pub struct Trainer {
    pub model: Model,
    pub tcfg: TrainConfig,
    pub bank: RouterBank,
    pub opt: AdamW,
    pub groups: ParamGroups,
    /// Completed optimizer steps.
    pub step: u64,
    pub max_steps: u64,
    /// Where a divergence diagnostic checkpoint gets written.
    pub diag_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(
        model: Model,
        tcfg: TrainConfig,
        max_steps: u64,
        diag_dir: Option<PathBuf>,
    ) -> Result<Trainer> {
        tcfg.validate()?;
        let bank = RouterBank::new(&model.cfg);
        let groups = param_groups(&model.params, &bank);
        let opt = AdamW::new(tcfg.beta1, tcfg.beta2, tcfg.eps);
        Ok(Trainer { model, tcfg, bank, opt, groups, step: 0, max_steps, diag_dir })
    }

    /// One optimizer step over the micro-batches of one effective batch.
    ///
    /// Computes the masked-CE mean over all live positions of the whole
    /// group (weighting each micro-batch's gradient by its live-token
    /// share), re-masks router gradients, clips the global norm, and
    /// applies the grouped AdamW update. A non-finite loss aborts with a
    /// diagnostic checkpoint.
    pub fn train_step(&mut self, micros: &[Batch]) -> Result<StepRecord> {
        let t0 = Instant::now();
        let counts: Vec<usize> = micros
            .iter()
            .map(|b| b.targets.iter().filter(|&&t| t != IGNORE_INDEX).count())
            .collect();
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Data("batch has no supervised positions".into()));
        }
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0f64;
        for (batch, &count) in micros.iter().zip(&counts) {
            if count == 0 {
                continue;
            }
            let mut g = GradGraph::new();
            let vars = bind_params(&mut g, &self.model.params, &self.model.cfg, Bind::Trainable);
            let logits = forward(&mut g, &self.model.cfg, &vars, &batch.inputs, batch.batch)?;
            let loss = g.cross_entropy_mean(logits, &batch.targets, IGNORE_INDEX);
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                let note = self.dump_diagnostic();
                return Err(Error::Data(format!(
                    "non-finite loss {} at step {}{}",
                    lv,
                    self.step + 1,
                    note
                )));
            }
            loss_sum += lv * count as f64;
            g.backward(loss);
            let w = count as f32 / total as f32;
            for (name, &var) in &vars {
                if let Some(grad) = g.take_grad(var) {
                    match grads.get_mut(name) {
                        Some(acc) => {
                            for (a, &x) in acc.data.iter_mut().zip(&grad.data) {
                                *a += w * x;
                            }
                        }
                        None => {
                            let mut t = grad;
                            for x in t.data.iter_mut() {
                                *x *= w;
                            }
                            grads.insert(name.clone(), t);
                        }
                    }
                }
            }
        }
        let grad_norm = self.apply_grads(grads)?;
        let (lr, _) = lr_at(&self.tcfg, self.step - 1, self.max_steps);
        Ok(StepRecord {
            step: self.step,
            loss: loss_sum / total as f64,
            lr,
            grad_norm,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Masks router gradients, clips, and applies one grouped AdamW update
    /// at the current step's learning rates. Returns the pre-clip norm.
    pub fn apply_grads(&mut self, mut grads: BTreeMap<String, Tensor>) -> Result<f64> {
        for name in &self.groups.router {
            if let (Some(g), Some(m)) = (grads.get_mut(name), self.bank.masks.get(name)) {
                for (x, &keep) in g.data.iter_mut().zip(&m.data) {
                    *x *= keep;
                }
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.tcfg.clip_norm as f32);
        let (lr_base, lr_router) = lr_at(&self.tcfg, self.step, self.max_steps);
        self.opt.begin_step();
        for (name, g) in &grads {
            let (lr, wd) = if is_router_param(name) {
                (lr_router, self.tcfg.router_weight_decay)
            } else {
                (lr_base, self.tcfg.weight_decay)
            };
            let p = self
                .model
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Data(format!("gradient for unknown parameter '{}'", name)))?;
            self.opt.update(name, &mut p.data, &g.data, lr as f32, wd as f32);
        }
        self.step += 1;
        Ok(grad_norm)
    }

    fn dump_diagnostic(&self) -> String {
        match &self.diag_dir {
            Some(dir) => {
                let path = dir.join("diverged.ckpt");
                match save_checkpoint(&path, &self.model, &self.opt, self.step) {
                    Ok(()) => format!(" (diagnostic checkpoint at {})", path.display()),
                    Err(e) => format!(" (diagnostic checkpoint failed: {})", e),
                }
            }
            None => String::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Mean masked cross-entropy and perplexity over `batches` (frozen model).
pub fn eval_loss(model: &Model, batches: impl IntoIterator<Item = Batch>) -> Result<(f64, f64)> {
    let mut sum = 0.0f64;
    let mut total = 0usize;
    for batch in batches {
        let count = batch.targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
        if count == 0 {
            continue;
        }
        let mut g = GradGraph::new();
        let vars = bind_params(&mut g, &model.params, &model.cfg, Bind::Frozen);
        let logits = forward(&mut g, &model.cfg, &vars, &batch.inputs, batch.batch)?;
        let loss = g.cross_entropy_mean(logits, &batch.targets, IGNORE_INDEX);
        sum += g.value(loss).item() as f64 * count as f64;
        total += count;
    }
    if total == 0 {
        return Err(Error::Data("evaluation set has no supervised positions".into()));
    }
    let mean = sum / total as f64;
    Ok((mean, mean.exp()))
}

/// Greedy open-generation accuracy: the fraction of samples whose extracted
/// answer string equals the labeled one. `max_new` caps generated tokens
/// (conventionally twice the longest training solution).
pub fn eval_accuracy(
    model: &Model,
    samples: &[SyntheticSample],
    vocab: &TaskVocab,
    kind: TaskKind,
    max_new: usize,
    batch_cap: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut prompts = Vec::with_capacity(samples.len());
    for s in samples {
        let mut ids = vec![special::BOS];
        ids.extend(vocab.encode(&s.prompt)?);
        prompts.push(ids);
    }
    let generated = model.greedy_generate(&prompts, max_new, special::EOS, batch_cap)?;
    let mut correct = 0usize;
    for ((prompt, gen), sample) in prompts.iter().zip(&generated).zip(samples) {
        let mut full = prompt.clone();
        full.extend_from_slice(gen);
        if extract_answer_full(vocab, &full, kind).as_deref() == Some(sample.answer.as_str()) {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn extract_answer_full(vocab: &TaskVocab, ids: &[u32], kind: TaskKind) -> Option<String> {
    crate::tasks::extract_answer(vocab, ids, kind)
}

/// Generation budget: twice the longest encoded solution, plus the `<eos>`.
pub fn generation_cap(samples: &[SyntheticSample], vocab: &TaskVocab) -> Result<usize> {
    let mut max = 0;
    for s in samples {
        max = max.max(vocab.encode(&s.solution)?.len());
    }
    Ok(2 * max + 1)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CKPT_MAGIC: [u8; 8] = *b"LIMECKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptTrailer {
    config: LimeConfig,
    step: u64,
    adam_step: u64,
}

/// A deserialized checkpoint: model, optimizer moments, and step counters.
pub struct Checkpoint {
    pub model: Model,
    pub moments: BTreeMap<String, Moments>,
    pub step: u64,
    pub adam_step: u64,
}

/// Binary format, all little-endian: magic `LIMECKPT`, u32 version, u32
/// tensor count, then per tensor `(u16 name length, name bytes, u8 rank,
/// u32 dims…, f32 payload)`, then a JSON trailer `{config, step,
/// adam_step}` running to end-of-file. Optimizer moments are stored as
/// tensors named `opt.m.<param>` / `opt.v.<param>`. Writing is
/// deterministic (name-sorted), so identical states produce identical
/// bytes.
pub fn save_checkpoint(path: &Path, model: &Model, opt: &AdamW, step: u64) -> Result<()> {
    let mut entries: Vec<(String, &[usize], &[f32])> = Vec::new();
    for (name, t) in &model.params {
        entries.push((name.clone(), &t.shape, &t.data));
    }
    for (name, mom) in opt.state() {
        let shape = &model
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("moments for unknown parameter '{}'", name)))?
            .shape;
        entries.push((format!("opt.m.{}", name), shape, &mom.m));
        entries.push((format!("opt.v.{}", name), shape, &mom.v));
    }
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, shape, data) in &entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[shape.len() as u8])?;
        for &d in *shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(data.len() * 4);
        for &x in *data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    let trailer =
        CkptTrailer { config: model.cfg.clone(), step, adam_step: opt.step };
    serde_json::to_writer(&mut w, &trailer)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {}", path.display(), msg));
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic).map_err(|_| bad("file shorter than header"))?;
    if magic != CKPT_MAGIC {
        return Err(bad("bad magic (not a checkpoint)"));
    }
    let version = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
    if version != CKPT_VERSION {
        return Err(bad(&format!("unsupported version {}", version)));
    }
    let count = read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        read_exact(&mut r, &mut len2).map_err(|_| bad("truncated tensor name"))?;
        let mut name_bytes = vec![0u8; u16::from_le_bytes(len2) as usize];
        read_exact(&mut r, &mut name_bytes).map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("non-UTF-8 tensor name"))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank).map_err(|_| bad("truncated tensor rank"))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r).map_err(|_| bad("truncated tensor dims"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        read_exact(&mut r, &mut payload)
            .map_err(|_| bad(&format!("truncated payload for '{}'", name)))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::new(&shape, data));
    }
    let mut trailer_json = Vec::new();
    r.read_to_end(&mut trailer_json)?;
    let trailer: CkptTrailer =
        serde_json::from_slice(&trailer_json).map_err(|_| bad("malformed trailer"))?;
    trailer.config.validate()?;

    let mut params = BTreeMap::new();
    let mut m_half: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut v_half: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            m_half.insert(rest.to_string(), t.data);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            v_half.insert(rest.to_string(), t.data);
        } else {
            params.insert(name, t);
        }
    }
    let mut moments = BTreeMap::new();
    for (name, m) in m_half {
        let v = v_half
            .remove(&name)
            .ok_or_else(|| bad(&format!("first moment without second for '{}'", name)))?;
        if params.get(&name).map(|p| p.data.len()) != Some(m.len()) {
            return Err(bad(&format!("moment shape mismatch for '{}'", name)));
        }
        moments.insert(name, Moments { m, v });
    }
    if let Some(name) = v_half.keys().next() {
        return Err(bad(&format!("second moment without first for '{}'", name)));
    }
    Ok(Checkpoint {
        model: Model { cfg: trailer.config, params },
        moments,
        step: trailer.step,
        adam_step: trailer.adam_step,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<()> {
    r.read_exact(buf)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

// ---------------------------------------------------------------------------
// The full run driver
// ---------------------------------------------------------------------------

/// What to train on.
pub enum TaskData<'a> {
    /// Task samples packed `<bos> prompt solution <eos>`.
    Samples { samples: &'a [SyntheticSample], vocab: &'a TaskVocab, mode: LossMode },
    /// A pre-tokenized corpus chunked into non-overlapping windows.
    Corpus { ids: Rc<Vec<u32>> },
}

impl TaskData<'_> {
    fn epoch_micros(&self, tcfg: &TrainConfig, epoch: u64) -> Result<Box<dyn Iterator<Item = Batch>>> {
        match self {
            TaskData::Samples { samples, vocab, mode } => Ok(Box::new(batch_iter(
                samples,
                vocab,
                tcfg.micro_batch(),
                tcfg.seq_len,
                *mode,
                tcfg.seed,
                epoch,
            )?)),
            TaskData::Corpus { ids } => Ok(Box::new(corpus_iter(
                ids.clone(),
                tcfg.micro_batch(),
                tcfg.seq_len,
                tcfg.seed,
                epoch,
            )?)),
        }
    }

    fn micros_per_epoch(&self, tcfg: &TrainConfig) -> Result<usize> {
        Ok(match self {
            TaskData::Samples { samples, vocab, mode } => {
                batch_iter(samples, vocab, tcfg.micro_batch(), tcfg.seq_len, *mode, tcfg.seed, 0)?
                    .len()
            }
            TaskData::Corpus { ids } => {
                corpus_iter(ids.clone(), tcfg.micro_batch(), tcfg.seq_len, tcfg.seed, 0)?.len()
            }
        })
    }
}

/// A finished (or resumed-and-finished) run.
pub struct RunOutcome {
    pub model: Model,
    /// Per-step records, covering only the steps this call executed.
    pub records: Vec<StepRecord>,
    pub steps_per_epoch: u64,
    pub max_steps: u64,
}

/// Trains a model from scratch (or resumes from `resume`) until the
/// schedule completes. The epoch/step position is a pure function of the
/// step counter, so a resumed run replays the exact batch sequence an
/// uninterrupted run would have seen. Writes `metrics.jsonl`,
/// `latest.ckpt` (if `checkpoint_every` is set) and `final.ckpt` under
/// `out_dir` when given.
pub fn run_training(
    mcfg: &LimeConfig,
    tcfg: &TrainConfig,
    data: &TaskData,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<RunOutcome> {
    mcfg.validate()?;
    tcfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let accum = tcfg.accum_factor();
    let micros_per_epoch = data.micros_per_epoch(tcfg)? as u64;
    let steps_per_epoch = micros_per_epoch.div_ceil(accum as u64);
    let max_steps = tcfg.resolve_max_steps(steps_per_epoch)?;

    let (model, moments, adam_step, start_step) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.model.cfg != *mcfg {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint architecture differs from the requested one",
                    path.display()
                )));
            }
            (ckpt.model, ckpt.moments, ckpt.adam_step, ckpt.step)
        }
        None => (Model::new(mcfg.clone(), tcfg.seed)?, BTreeMap::new(), 0, 0),
    };
    let mut trainer = Trainer::new(model, tcfg.clone(), max_steps, out_dir.map(Path::to_path_buf))?;
    trainer.step = start_step;
    trainer.opt.step = adam_step;
    for (name, mom) in moments {
        trainer.opt.insert_state(name, mom);
    }

    let mut log = MetricsLog::create(
        out_dir.map(|d| d.join("metrics.jsonl")).as_deref(),
        resume.is_some(),
    )?;
    let mut records = Vec::new();
    let end_step = if tcfg.halt_step > 0 { tcfg.halt_step.min(max_steps) } else { max_steps };

    'run: while trainer.step < end_step {
        let epoch = trainer.step / steps_per_epoch;
        let skip_micros = (trainer.step % steps_per_epoch) as usize * accum;
        let mut it = data.epoch_micros(tcfg, epoch)?.skip(skip_micros).peekable();
        while it.peek().is_some() {
            let group: Vec<Batch> = it.by_ref().take(accum).collect();
            let rec = trainer.train_step(&group)?;
            log.log(&rec)?;
            records.push(rec);
            if tcfg.checkpoint_every > 0 && trainer.step % tcfg.checkpoint_every == 0 {
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join("latest.ckpt"), &trainer.model, &trainer.opt, trainer.step)?;
                }
            }
            if trainer.step >= end_step {
                break 'run;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("final.ckpt"), &trainer.model, &trainer.opt, trainer.step)?;
    }
    Ok(RunOutcome { model: trainer.model, records, steps_per_epoch, max_steps })
}
