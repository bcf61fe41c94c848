//! `lime` — command-line front end: dataset generation, training, evaluation
//! and multi-run experiment recipes.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on usage/config
//! errors. Failures print one machine-readable JSON object to stderr:
//! `{"error": "...", "kind": "config" | "data" | "io" | "json" | "checkpoint"}`.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use clap::{Args, Parser, Subcommand};

use lime::diag::{
    collect_representations, entropy_profile, export_embeddings, linear_probe_cv,
    per_head_router_report, probe_dataset, router_heatmap, RepKind,
};
use lime::exp::{self, Recipe};
use lime::model::{LimeConfig, RoutingVariant};
use lime::tasks::{
    aet_corpus_text, batch_iter, gen_arithmetic, gen_prosqa, load_jsonl, max_row_tokens,
    save_jsonl, special, LossMode, ProsqaParams, TaskKind, TaskVocab, TokenKind,
};
use lime::train::{
    eval_accuracy, eval_loss, generation_cap, load_checkpoint, run_training, TaskData, TrainConfig,
};
use lime::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lime",
    version,
    about = "Layer-integrated memory transformers: data, training, evaluation and recipes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (or plain-text corpus) plus its vocab.
    GenData(GenDataArgs),
    /// Train a model from a JSON config on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint: held-out loss/perplexity and, for reasoning
    /// tasks, open-ended answer accuracy.
    Eval(EvalArgs),
    /// Inspect a trained checkpoint: entropy, probes, router heatmaps,
    /// embedding export.
    Analyze(AnalyzeArgs),
    /// Closed-form parameter and FLOP accounting for a config.
    Audit(AuditArgs),
    /// Run a pinned multi-run experiment recipe (cached and resumable).
    Recipe(RecipeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// One of: aet, prosqa, corpus.
    #[arg(long)]
    task: String,
    /// Operand count for `aet`; comma-separated tiers for `corpus`.
    #[arg(long)]
    operands: Option<String>,
    /// Number of samples (or corpus lines).
    #[arg(long)]
    count: usize,
    /// RNG seed; falls back to $LIME_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file: {"model": {...LimeConfig...}, "train": {...TrainConfig...}}.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory from `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Routing variant override: full, baseline, average, last-j, first-j.
    #[arg(long)]
    variant: Option<String>,
    /// Buffer budget for the last-j / first-j variants.
    #[arg(long)]
    j: Option<usize>,
    /// Seed override; falls back to $LIME_SEED, then the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for manifest, metrics, and checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Which targets carry loss: solution (default) or all.
    #[arg(long, default_value = "solution")]
    loss_mode: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory; evaluates `test.jsonl` if present, else `data.jsonl`,
    /// else the corpus text.
    #[arg(long)]
    data: PathBuf,
    /// One of: aet, prosqa, lm.
    #[arg(long)]
    task: String,
    /// Sequences per generation/eval batch.
    #[arg(long, default_value_t = 16)]
    batch_cap: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(subcommand)]
    cmd: AnalyzeCmd,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Per-layer matrix-based Rényi entropy of values or hidden states.
    Entropy(EntropyArgs),
    /// Cross-validated linear probes over closely related tokens.
    Probe(ProbeArgs),
    /// Router mixing-weight heatmap as a CSV matrix (or per-head JSON).
    RouterHeatmap(HeatmapArgs),
    /// Per-token representation vectors as CSV for external projection.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct EntropyArgs {
    /// Checkpoint to inspect.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory from `gen-data` (corpus text or JSONL samples).
    #[arg(long)]
    data: PathBuf,
    /// Representation to analyze: values or hiddens.
    #[arg(long, default_value = "values")]
    kind: String,
    /// Rényi order α (α ≠ 1).
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    /// Number of windows traced.
    #[arg(long, default_value_t = 8)]
    seqs: usize,
    /// Window length; defaults to min(max_seq, 128).
    #[arg(long)]
    seq_len: Option<usize>,
    /// Output file (.csv or .json); stdout JSON when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint to inspect.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory from `gen-data` (corpus text or JSONL samples).
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated word classes to separate.
    #[arg(long, default_value = "is,are,was,were")]
    words: String,
    /// Representation to probe: values or hiddens.
    #[arg(long, default_value = "values")]
    kind: String,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Cap per word class before balancing (0 = no cap).
    #[arg(long, default_value_t = 0)]
    cap: usize,
    /// Number of windows traced.
    #[arg(long, default_value_t = 16)]
    seqs: usize,
    /// Window length; defaults to min(max_seq, 128).
    #[arg(long)]
    seq_len: Option<usize>,
    /// Fold-assignment seed; falls back to $LIME_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (.csv or .json); stdout JSON when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Checkpoint to inspect.
    #[arg(long)]
    ckpt: PathBuf,
    /// Emit the unaveraged per-head report as JSON instead of the CSV matrix.
    #[arg(long)]
    per_head: bool,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Checkpoint to inspect.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory from `gen-data` (corpus text or JSONL samples).
    #[arg(long)]
    data: PathBuf,
    /// 1-based layer to export, matching the layer column in analysis CSVs.
    #[arg(long)]
    layer: usize,
    /// Representation to export: values or hiddens.
    #[arg(long, default_value = "values")]
    kind: String,
    /// Number of windows traced.
    #[arg(long, default_value_t = 4)]
    seqs: usize,
    /// Window length; defaults to min(max_seq, 128).
    #[arg(long)]
    seq_len: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    /// JSON config: {"model": ..., "train": ...} or a bare model config.
    #[arg(long)]
    config: PathBuf,
    /// Sequences per forward pass.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Tokens per sequence; defaults to the model's max_seq.
    #[arg(long)]
    seq: Option<usize>,
}

#[derive(Args)]
struct RecipeArgs {
    /// One of: aet-sweep, prosqa-ft, ablation-sweep, depth-sweep,
    /// collapse-report.
    name: String,
    /// Artifact root; every run gets `<root>/<name>/`.
    #[arg(long, default_value = "runs")]
    root: PathBuf,
    /// Comma-separated name filters; only matching runs execute.
    #[arg(long, default_value = "")]
    only: String,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            let kind = match &err {
                Error::Config(_) => "config",
                Error::Data(_) => "data",
                Error::Io(_) => "io",
                Error::Json(_) => "json",
                Error::Checkpoint(_) => "checkpoint",
            };
            eprintln!(
                "{}",
                serde_json::json!({ "error": err.to_string(), "kind": kind })
            );
            if matches!(err, Error::Config(_)) {
                2
            } else {
                1
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Analyze(a) => analyze(a),
        Cmd::Audit(a) => audit(a),
        Cmd::Recipe(a) => recipe(a),
    }
}

/// `--seed` flag, then `$LIME_SEED`, then `fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("LIME_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("LIME_SEED must be an unsigned integer, got '{}'", v))),
        Err(_) => Ok(fallback),
    }
}

fn parse_tiers(operands: &Option<String>, task: &str) -> Result<Vec<usize>> {
    let raw = operands
        .as_deref()
        .ok_or_else(|| Error::Config(format!("--operands is required for task '{}'", task)))?;
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad operand count '{}'", t)))
        })
        .collect()
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, 0)?;
    std::fs::create_dir_all(&a.out)?;
    match a.task.as_str() {
        "aet" => {
            let tiers = parse_tiers(&a.operands, "aet")?;
            if tiers.len() != 1 {
                return Err(Error::Config(
                    "task 'aet' takes exactly one operand count (use 'corpus' for mixtures)".into(),
                ));
            }
            let samples = gen_arithmetic(tiers[0], a.count, seed)?;
            save_jsonl(&samples, &a.out.join("data.jsonl"))?;
            let vocab = TaskVocab::build(&samples, TokenKind::Symbols)?;
            vocab.save(&a.out.join("vocab.json"))?;
            println!("{}", serde_json::json!({"samples": samples.len(), "vocab": vocab.len()}));
        }
        "prosqa" => {
            let samples = gen_prosqa(&ProsqaParams::default(), a.count, seed)?;
            save_jsonl(&samples, &a.out.join("data.jsonl"))?;
            let vocab = TaskVocab::build(&samples, TokenKind::Words)?;
            vocab.save(&a.out.join("vocab.json"))?;
            println!("{}", serde_json::json!({"samples": samples.len(), "vocab": vocab.len()}));
        }
        "corpus" => {
            let tiers = parse_tiers(&a.operands, "corpus")?;
            let text = aet_corpus_text(&tiers, a.count, seed)?;
            let bytes = text.len();
            std::fs::write(a.out.join("corpus.txt"), text)?;
            let vocab = TaskVocab::build(&[], TokenKind::Bytes)?;
            vocab.save(&a.out.join("vocab.json"))?;
            println!("{}", serde_json::json!({"lines": a.count, "bytes": bytes, "vocab": vocab.len()}));
        }
        other => {
            return Err(Error::Config(format!(
                "unknown task '{}' (expected aet, prosqa or corpus)",
                other
            )))
        }
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct FileConfig {
    model: LimeConfig,
    train: TrainConfig,
}

/// `--variant`/`--j` into a concrete [`RoutingVariant`]. The generic forms
/// `last-j`/`first-j` require `--j`; the literal forms `last-4` etc. also
/// parse directly.
fn resolve_variant(variant: &str, j: Option<usize>) -> Result<RoutingVariant> {
    match (variant, j) {
        ("last-j", Some(j)) => Ok(RoutingVariant::LastJ(j)),
        ("first-j", Some(j)) => Ok(RoutingVariant::FirstJ(j)),
        ("last-j" | "first-j", None) => Err(Error::Config(format!(
            "variant '{}' requires --j <buffers>",
            variant
        ))),
        _ => variant.parse(),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)?;
    let cfg: FileConfig = serde_json::from_str(&text)?;
    let mut mcfg = cfg.model;
    let mut tcfg = cfg.train;
    if let Some(v) = &a.variant {
        mcfg.routing_variant = resolve_variant(v, a.j)?;
    }
    tcfg.seed = resolve_seed(a.seed, tcfg.seed)?;

    let loss_mode = match a.loss_mode.as_str() {
        "solution" => LossMode::SolutionOnly,
        "all" => LossMode::AllTokens,
        other => {
            return Err(Error::Config(format!(
                "unknown loss mode '{}' (expected solution or all)",
                other
            )))
        }
    };

    std::fs::create_dir_all(&a.out_dir)?;
    let name = a
        .out_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());

    // Datasets produced by gen-data: samples + vocab, or a byte corpus.
    let samples_path = ["train.jsonl", "data.jsonl"]
        .iter()
        .map(|f| a.data.join(f))
        .find(|p| p.exists());
    let corpus_path = ["train.txt", "corpus.txt"]
        .iter()
        .map(|f| a.data.join(f))
        .find(|p| p.exists());

    let outcome = if let Some(samples_path) = samples_path {
        let samples = load_jsonl(&samples_path)?;
        let vocab = TaskVocab::load(&a.data.join("vocab.json"))?;
        exp::write_run_manifest(&a.out_dir, &name, &mcfg, &tcfg, &[samples_path])?;
        let data = TaskData::Samples { samples: &samples, vocab: &vocab, mode: loss_mode };
        run_training(&mcfg, &tcfg, &data, Some(&a.out_dir), a.resume.as_deref())?
    } else if let Some(corpus_path) = corpus_path {
        let vocab = TaskVocab::load(&a.data.join("vocab.json"))?;
        let ids = Rc::new(vocab.encode(&std::fs::read_to_string(&corpus_path)?)?);
        exp::write_run_manifest(&a.out_dir, &name, &mcfg, &tcfg, &[corpus_path])?;
        let data = TaskData::Corpus { ids };
        run_training(&mcfg, &tcfg, &data, Some(&a.out_dir), a.resume.as_deref())?
    } else {
        return Err(Error::Data(format!(
            "no dataset found in {} (expected train.jsonl, data.jsonl, train.txt or corpus.txt)",
            a.data.display()
        )));
    };

    let last = outcome.records.last();
    println!(
        "{}",
        serde_json::json!({
            "steps": outcome.max_steps,
            "final_loss": last.map(|r| r.loss),
            "out_dir": a.out_dir.display().to_string(),
        })
    );
    Ok(())
}

fn eval_samples_path(data: &Path) -> Result<PathBuf> {
    ["test.jsonl", "data.jsonl"]
        .iter()
        .map(|f| data.join(f))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::Data(format!("no test.jsonl or data.jsonl in {}", data.display()))
        })
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let model = ckpt.model;
    let vocab = TaskVocab::load(&a.data.join("vocab.json"))?;
    let report = match a.task.as_str() {
        "aet" | "prosqa" => {
            let kind = if a.task == "aet" { TaskKind::Aet } else { TaskKind::Prosqa };
            let samples = load_jsonl(&eval_samples_path(&a.data)?)?;
            let seq = (max_row_tokens(&samples, &vocab)? - 1).min(model.cfg.max_seq);
            let batches = batch_iter(
                &samples,
                &vocab,
                a.batch_cap.max(1),
                seq,
                LossMode::SolutionOnly,
                0,
                0,
            )?;
            let (loss, ppl) = eval_loss(&model, batches)?;
            let cap = generation_cap(&samples, &vocab)?;
            let acc = eval_accuracy(&model, &samples, &vocab, kind, cap, a.batch_cap.max(1))?;
            serde_json::json!({"samples": samples.len(), "loss": loss, "ppl": ppl, "accuracy": acc})
        }
        "lm" => {
            let corpus_path = ["val.txt", "corpus.txt", "train.txt"]
                .iter()
                .map(|f| a.data.join(f))
                .find(|p| p.exists())
                .ok_or_else(|| {
                    Error::Data(format!("no corpus text found in {}", a.data.display()))
                })?;
            let ids = Rc::new(vocab.encode(&std::fs::read_to_string(&corpus_path)?)?);
            let windows = lime::tasks::corpus_iter(
                ids.clone(),
                a.batch_cap.max(1),
                model.cfg.max_seq,
                0,
                0,
            )?;
            let (loss, ppl) = eval_loss(&model, windows)?;
            serde_json::json!({"tokens": ids.len(), "loss": loss, "ppl": ppl})
        }
        other => {
            return Err(Error::Config(format!(
                "unknown task '{}' (expected aet, prosqa or lm)",
                other
            )))
        }
    };
    println!("{}", report);
    Ok(())
}

/// A flat token stream for representation analysis: corpus text when the
/// dataset directory has one, otherwise the concatenated encoded sample rows
/// (`<bos>` prompt solution `<eos>`, the training layout).
fn analysis_stream(data: &Path, vocab: &TaskVocab) -> Result<Vec<u32>> {
    if let Some(p) = ["val.txt", "corpus.txt", "train.txt"]
        .iter()
        .map(|f| data.join(f))
        .find(|p| p.exists())
    {
        return vocab.encode(&std::fs::read_to_string(&p)?);
    }
    if let Some(p) = ["test.jsonl", "data.jsonl", "train.jsonl"]
        .iter()
        .map(|f| data.join(f))
        .find(|p| p.exists())
    {
        let mut ids = Vec::new();
        for s in &load_jsonl(&p)? {
            ids.push(special::BOS);
            ids.extend(vocab.encode(&s.prompt)?);
            ids.extend(vocab.encode(&s.solution)?);
            ids.push(special::EOS);
        }
        return Ok(ids);
    }
    Err(Error::Data(format!(
        "no analyzable data in {} (expected corpus text or JSONL samples)",
        data.display()
    )))
}

/// `n` evenly spaced windows of length `t` over the stream. Deterministic;
/// windows may overlap when the stream is short.
fn analysis_windows(ids: &[u32], n: usize, t: usize) -> Result<Vec<Vec<u32>>> {
    if t == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    if ids.len() < t {
        return Err(Error::Data(format!(
            "stream has {} tokens, need at least {}",
            ids.len(),
            t
        )));
    }
    let n = n.max(1);
    let last_start = ids.len() - t;
    Ok((0..n)
        .map(|i| {
            let start = if n == 1 { 0 } else { i * last_start / (n - 1) };
            ids[start..start + t].to_vec()
        })
        .collect())
}

struct AnalysisInputs {
    model: lime::model::Model,
    vocab: TaskVocab,
    windows: Vec<Vec<u32>>,
}

fn analysis_inputs(
    ckpt: &Path,
    data: &Path,
    seqs: usize,
    seq_len: Option<usize>,
) -> Result<AnalysisInputs> {
    let model = load_checkpoint(ckpt)?.model;
    let vocab = TaskVocab::load(&data.join("vocab.json"))?;
    let stream = analysis_stream(data, &vocab)?;
    let t = seq_len.unwrap_or_else(|| model.cfg.max_seq.min(128));
    if t > model.cfg.max_seq {
        return Err(Error::Config(format!(
            "--seq-len {} exceeds the model's max_seq {}",
            t, model.cfg.max_seq
        )));
    }
    let windows = analysis_windows(&stream, seqs, t)?;
    Ok(AnalysisInputs { model, vocab, windows })
}

/// Write CSV or pretty JSON depending on the output extension; default to
/// JSON on stdout.
fn emit(out: &Option<PathBuf>, csv: String, json: serde_json::Value) -> Result<()> {
    match out {
        Some(p) if p.extension().is_some_and(|e| e == "csv") => std::fs::write(p, csv)?,
        Some(p) => std::fs::write(p, format!("{:#}\n", json))?,
        None => println!("{}", json),
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    match a.cmd {
        AnalyzeCmd::Entropy(a) => {
            let kind: RepKind = a.kind.parse()?;
            let inputs = analysis_inputs(&a.ckpt, &a.data, a.seqs, a.seq_len)?;
            let dump = collect_representations(&inputs.model, &inputs.windows, 4)?;
            let profile = entropy_profile(&dump, kind, a.alpha)?;
            let mut csv = String::from("layer,entropy\n");
            for (i, e) in profile.iter().enumerate() {
                csv.push_str(&format!("{},{}\n", i + 1, e));
            }
            let json = serde_json::json!({
                "kind": a.kind, "alpha": a.alpha,
                "seqs": dump.sequences(), "seq_len": dump.seq_len,
                "entropy": profile,
            });
            emit(&a.out, csv, json)
        }
        AnalyzeCmd::Probe(a) => {
            let kind: RepKind = a.kind.parse()?;
            let seed = resolve_seed(a.seed, 0)?;
            let words: Vec<&str> = a.words.split(',').map(str::trim).collect();
            let inputs = analysis_inputs(&a.ckpt, &a.data, a.seqs, a.seq_len)?;
            let dump = collect_representations(&inputs.model, &inputs.windows, 4)?;
            let ds = probe_dataset(&dump, &inputs.vocab, &words, kind, a.cap)?;
            let mut csv = String::from("layer,accuracy_mean,accuracy_std\n");
            let mut rows = Vec::new();
            for layer in 0..dump.layers {
                let (mean, std) = linear_probe_cv(&ds, layer, a.folds, seed)?;
                csv.push_str(&format!("{},{},{}\n", layer + 1, mean, std));
                rows.push(serde_json::json!({"layer": layer + 1, "mean": mean, "std": std}));
            }
            let json = serde_json::json!({
                "kind": a.kind, "words": words, "folds": a.folds,
                "examples_per_class": ds.per_class(), "layers": rows,
            });
            emit(&a.out, csv, json)
        }
        AnalyzeCmd::RouterHeatmap(a) => {
            let model = load_checkpoint(&a.ckpt)?.model;
            if a.per_head {
                // The per-head report is nested, so it is JSON-only.
                let json = serde_json::to_value(per_head_router_report(&model)?)?;
                match &a.out {
                    Some(p) => std::fs::write(p, format!("{:#}\n", json))?,
                    None => println!("{}", json),
                }
            } else {
                // Heatmaps are flat matrices and stay CSV in every sink.
                let csv = router_heatmap(&model)?.to_csv();
                match &a.out {
                    Some(p) => std::fs::write(p, csv)?,
                    None => print!("{}", csv),
                }
            }
            Ok(())
        }
        AnalyzeCmd::ExportEmbeddings(a) => {
            let kind: RepKind = a.kind.parse()?;
            if a.layer == 0 {
                return Err(Error::Config("--layer is 1-based; got 0".into()));
            }
            let inputs = analysis_inputs(&a.ckpt, &a.data, a.seqs, a.seq_len)?;
            let dump = collect_representations(&inputs.model, &inputs.windows, 4)?;
            let rows =
                export_embeddings(&dump, a.layer - 1, kind, Some(&inputs.vocab), &a.out)?;
            println!(
                "{}",
                serde_json::json!({"rows": rows, "out": a.out.display().to_string()})
            );
            Ok(())
        }
    }
}

fn audit(a: AuditArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)?;
    let mcfg = match serde_json::from_str::<FileConfig>(&text) {
        Ok(fc) => fc.model,
        Err(_) => serde_json::from_str::<LimeConfig>(&text)?,
    };
    let seq = a.seq.unwrap_or(mcfg.max_seq);
    let report = lime::audit::cost_report(&mcfg, a.batch, seq)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn recipe(a: RecipeArgs) -> Result<()> {
    let recipe: Recipe = a.name.parse()?;
    let rows = exp::run_recipe(recipe, &a.root, &a.only)?;
    for r in &rows {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}
