//! Representation diagnostics: matrix-based Rényi entropy of token
//! representations, token-class linear probes with cross-validation,
//! router-weight heatmaps, and raw representation export.
//!
//! Everything here is read-only over a trained (or freshly initialized)
//! model. The numeric core is a hand-rolled cyclic Jacobi eigensolver in
//! `f64`; probes are multinomial logistic regressions trained by full-batch
//! gradient descent.

use std::collections::BTreeMap;
use std::path::Path;

use crate::model::{bind_params, forward_traced, is_router_param, Bind, LimeConfig, Model, RoutingVariant};
use crate::tasks::{special, TaskVocab, TokenKind};
use crate::tensor::rng::{stream, stream_rng};
use crate::tensor::{GradGraph, Tensor};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Symmetric eigenvalues (cyclic Jacobi, f64)
// ---------------------------------------------------------------------------

/// Eigenvalues of a dense symmetric `n×n` matrix (row-major), descending.
///
/// Cyclic Jacobi with a per-sweep threshold: unconditionally stable for
/// symmetric input, quadratically convergent, no external dependencies.
/// Accuracy is limited only by `f64` rounding, which is plenty for spectra
/// that get normalized by their trace anyway.
pub fn sym_eigenvalues(mat: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(mat.len(), n * n, "matrix must be n*n");
    if n == 0 {
        return Vec::new();
    }
    let mut a = mat.to_vec();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut evals: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    evals.sort_by(|x, y| y.total_cmp(x));
    evals
}

// ---------------------------------------------------------------------------
// Matrix-based Rényi entropy
// ---------------------------------------------------------------------------

/// α-order Rényi entropy of the Gram spectrum of `z` (`[t, d']` rows =
/// token positions).
///
/// `K = Z Zᵀ` is normalized by its trace so the clamped eigenvalues form a
/// probability vector `p`, and `S = (1/(1−α)) · ln Σ pᵢ^α`. The nonzero
/// spectrum of `Z Zᵀ` equals that of `Zᵀ Z`, so the Gram matrix is built on
/// the smaller side; padding zeros contribute nothing to the sum. The
/// result is clamped into `[0, ln t]`, the mathematical range.
pub fn renyi_entropy(z: &Tensor, alpha: f64) -> Result<f64> {
    if z.shape.len() != 2 {
        return Err(Error::Config(format!(
            "entropy wants a [t, d'] matrix, got shape {:?}",
            z.shape
        )));
    }
    let (t, d) = (z.shape[0], z.shape[1]);
    if t < 2 {
        return Err(Error::Config(format!("entropy needs at least 2 rows, got {}", t)));
    }
    if !(alpha > 0.0) || alpha == 1.0 {
        return Err(Error::Config(format!(
            "alpha must be positive and != 1, got {}",
            alpha
        )));
    }
    let n = t.min(d);
    let mut gram = vec![0.0f64; n * n];
    if t <= d {
        // K[i][j] = <row i, row j>
        for i in 0..t {
            for j in i..t {
                let mut acc = 0.0f64;
                for k in 0..d {
                    acc += z.data[i * d + k] as f64 * z.data[j * d + k] as f64;
                }
                gram[i * t + j] = acc;
                gram[j * t + i] = acc;
            }
        }
    } else {
        // Same nonzero spectrum from the feature-side Gram.
        for a in 0..d {
            for b in a..d {
                let mut acc = 0.0f64;
                for i in 0..t {
                    acc += z.data[i * d + a] as f64 * z.data[i * d + b] as f64;
                }
                gram[a * d + b] = acc;
                gram[b * d + a] = acc;
            }
        }
    }
    let evals = sym_eigenvalues(&gram, n);
    let trace: f64 = evals.iter().map(|&l| l.max(0.0)).sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::Data(
            "entropy undefined: representation matrix is all zeros (or non-finite)".into(),
        ));
    }
    let sum_p_alpha: f64 = evals
        .iter()
        .map(|&l| (l.max(0.0) / trace).powf(alpha))
        .sum();
    let s = sum_p_alpha.ln() / (1.0 - alpha);
    Ok(s.clamp(0.0, (t as f64).ln()))
}

// ---------------------------------------------------------------------------
// Representation capture
// ---------------------------------------------------------------------------

/// Which captured stream an analysis reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepKind {
    /// Raw per-layer value projections (before routing), `[t, H_kv·d_h]`.
    Values,
    /// Residual stream after each layer, `[t, d]`.
    Hiddens,
}

impl std::str::FromStr for RepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<RepKind> {
        match s {
            "values" => Ok(RepKind::Values),
            "hiddens" => Ok(RepKind::Hiddens),
            other => Err(Error::Config(format!(
                "unknown representation kind '{}' (expected values or hiddens)",
                other
            ))),
        }
    }
}

/// Per-layer, per-sequence representation matrices captured from forward
/// passes, plus the token ids they came from.
pub struct RepresentationDump {
    pub layers: usize,
    pub seq_len: usize,
    /// `values[layer][seq]` = `[t, H_kv·d_h]`, the pre-routing W^(V) output.
    pub values: Vec<Vec<Tensor>>,
    /// `hiddens[layer][seq]` = `[t, d]`, the residual stream after the layer.
    pub hiddens: Vec<Vec<Tensor>>,
    /// `tokens[seq]` = the `t` input ids.
    pub tokens: Vec<Vec<u32>>,
}

impl RepresentationDump {
    pub fn sequences(&self) -> usize {
        self.tokens.len()
    }

    fn layer_seqs(&self, kind: RepKind, layer: usize) -> Result<&[Tensor]> {
        let bank = match kind {
            RepKind::Values => &self.values,
            RepKind::Hiddens => &self.hiddens,
        };
        bank.get(layer)
            .map(|v| v.as_slice())
            .ok_or_else(|| {
                Error::Config(format!("layer {} out of range (0..{})", layer, self.layers))
            })
    }
}

/// Runs `model` over `seqs` (equal-length token rows, `micro` at a time)
/// and captures per-layer values and hidden states for every sequence.
pub fn collect_representations(
    model: &Model,
    seqs: &[Vec<u32>],
    micro: usize,
) -> Result<RepresentationDump> {
    if seqs.is_empty() {
        return Err(Error::Data("no sequences to trace".into()));
    }
    let t = seqs[0].len();
    if t == 0 {
        return Err(Error::Data("sequences must be non-empty".into()));
    }
    if let Some(bad) = seqs.iter().find(|s| s.len() != t) {
        return Err(Error::Data(format!(
            "sequences must share one length; got {} and {}",
            t,
            bad.len()
        )));
    }
    let cfg = &model.cfg;
    let micro = micro.max(1);
    let (h_kv, d_h, d) = (cfg.num_kv_heads, cfg.head_dim, cfg.hidden_size);
    let mut dump = RepresentationDump {
        layers: cfg.num_layers,
        seq_len: t,
        values: vec![Vec::new(); cfg.num_layers],
        hiddens: vec![Vec::new(); cfg.num_layers],
        tokens: Vec::with_capacity(seqs.len()),
    };
    for chunk in seqs.chunks(micro) {
        let b = chunk.len();
        let ids: Vec<u32> = chunk.iter().flat_map(|s| s.iter().copied()).collect();
        let mut g = GradGraph::new();
        let vars = bind_params(&mut g, &model.params, cfg, Bind::Frozen);
        let (_, trace) = forward_traced(&mut g, cfg, &vars, &ids, b)?;
        for layer in 0..cfg.num_layers {
            let vals = g.value(trace.layer_values[layer]); // [b, H_kv, t, d_h]
            for s in 0..b {
                let mut m = vec![0.0f32; t * h_kv * d_h];
                for h in 0..h_kv {
                    for pos in 0..t {
                        let src = ((s * h_kv + h) * t + pos) * d_h;
                        let dst = pos * (h_kv * d_h) + h * d_h;
                        m[dst..dst + d_h].copy_from_slice(&vals.data[src..src + d_h]);
                    }
                }
                dump.values[layer].push(Tensor::new(&[t, h_kv * d_h], m));
            }
            let hid = g.value(trace.layer_hidden[layer]); // [b*t, d]
            for s in 0..b {
                let start = s * t * d;
                dump.hiddens[layer].push(Tensor::new(
                    &[t, d],
                    hid.data[start..start + t * d].to_vec(),
                ));
            }
        }
        for s in chunk {
            dump.tokens.push(s.clone());
        }
    }
    Ok(dump)
}

/// Mean per-sequence Rényi entropy for every layer (index 0 = layer 1).
pub fn entropy_profile(dump: &RepresentationDump, kind: RepKind, alpha: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(dump.layers);
    for layer in 0..dump.layers {
        let seqs = dump.layer_seqs(kind, layer)?;
        let mut acc = 0.0f64;
        for z in seqs {
            acc += renyi_entropy(z, alpha)?;
        }
        out.push(acc / seqs.len() as f64);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Probe dataset extraction
// ---------------------------------------------------------------------------

/// Balanced per-occurrence probe rows for a set of word classes, gathered
/// at each word's final token position, for every layer of one
/// representation kind.
pub struct ProbeDataset {
    pub classes: Vec<String>,
    pub dim: usize,
    /// `features[layer][i]` pairs with `labels[i]`.
    pub features: Vec<Vec<Vec<f32>>>,
    pub labels: Vec<usize>,
}

impl ProbeDataset {
    /// Rows per class after balancing.
    pub fn per_class(&self) -> usize {
        if self.classes.is_empty() {
            0
        } else {
            self.labels.iter().filter(|&&l| l == 0).count()
        }
    }
}

fn is_letter_id(id: u32) -> bool {
    let b = id as i64 - special::COUNT as i64;
    (0..=255).contains(&b) && (b as u8 as char).is_ascii_alphabetic()
}

/// Positions (seq, final-token index) where `word` occurs in `tokens`.
///
/// Byte vocabularies match the word's byte run with letter boundaries on
/// both sides (so `is` never fires inside `this`); symbol/word
/// vocabularies match whole tokens.
fn word_positions(
    vocab: &TaskVocab,
    tokens: &[Vec<u32>],
    word: &str,
) -> Result<Vec<(usize, usize)>> {
    let mut hits = Vec::new();
    match vocab.kind {
        TokenKind::Bytes => {
            let pattern: Vec<u32> =
                word.bytes().map(|b| b as u32 + special::COUNT as u32).collect();
            let n = pattern.len();
            for (s, seq) in tokens.iter().enumerate() {
                for start in 0..seq.len().saturating_sub(n - 1) {
                    if seq[start..start + n] != pattern[..] {
                        continue;
                    }
                    let left_ok = start == 0 || !is_letter_id(seq[start - 1]);
                    let right_ok =
                        start + n >= seq.len() || !is_letter_id(seq[start + n]);
                    if left_ok && right_ok {
                        hits.push((s, start + n - 1));
                    }
                }
            }
        }
        TokenKind::Symbols | TokenKind::Words => {
            let id = vocab.encode(word)?;
            if id.len() != 1 {
                return Err(Error::Config(format!(
                    "probe word '{}' does not map to a single token",
                    word
                )));
            }
            let id = id[0];
            for (s, seq) in tokens.iter().enumerate() {
                for (pos, &tok) in seq.iter().enumerate() {
                    if tok == id {
                        hits.push((s, pos));
                    }
                }
            }
        }
    }
    Ok(hits)
}

/// Gathers a balanced probe dataset from `dump`: for each word class, up to
/// `cap` occurrences (0 = no cap), then every class truncated to the
/// smallest class count.
pub fn probe_dataset(
    dump: &RepresentationDump,
    vocab: &TaskVocab,
    words: &[&str],
    kind: RepKind,
    cap: usize,
) -> Result<ProbeDataset> {
    if words.len() < 2 {
        return Err(Error::Config("probing needs at least two word classes".into()));
    }
    let mut per_class: Vec<Vec<(usize, usize)>> = Vec::new();
    for &w in words {
        let mut hits = word_positions(vocab, &dump.tokens, w)?;
        if hits.is_empty() {
            return Err(Error::Data(format!(
                "probe word '{}' does not occur in the corpus",
                w
            )));
        }
        if cap > 0 {
            hits.truncate(cap);
        }
        per_class.push(hits);
    }
    let keep = per_class.iter().map(|h| h.len()).min().unwrap_or(0);
    for hits in &mut per_class {
        hits.truncate(keep);
    }

    let mut labels = Vec::with_capacity(keep * words.len());
    let mut features: Vec<Vec<Vec<f32>>> = vec![Vec::new(); dump.layers];
    let mut dim = 0;
    for (class, hits) in per_class.iter().enumerate() {
        for &(s, pos) in hits {
            labels.push(class);
            for layer in 0..dump.layers {
                let z = &dump.layer_seqs(kind, layer)?[s];
                let d = z.shape[1];
                dim = d;
                features[layer].push(z.data[pos * d..(pos + 1) * d].to_vec());
            }
        }
    }
    Ok(ProbeDataset {
        classes: words.iter().map(|w| w.to_string()).collect(),
        dim,
        features,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Linear probe (multinomial logistic regression, five-fold CV)
// ---------------------------------------------------------------------------

const PROBE_L2: f64 = 1e-3;
const PROBE_TOL: f64 = 1e-6;
const PROBE_MAX_ITERS: usize = 5_000;

/// Five-fold (or `folds`-fold) cross-validated accuracy of an L2-regularized
/// multinomial logistic probe on `ds.features[layer]`: `(mean, std)`.
///
/// Folds are stratified per class so no fold misses a class; features are
/// standardized with statistics fitted on the training folds only; the
/// solver is full-batch gradient descent run to a 1e-6 loss plateau or
/// 5,000 iterations.
pub fn linear_probe_cv(
    ds: &ProbeDataset,
    layer: usize,
    folds: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let x = ds
        .features
        .get(layer)
        .ok_or_else(|| Error::Config(format!("layer {} out of range", layer)))?;
    let n = x.len();
    let c = ds.classes.len();
    if folds < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    for (class, name) in ds.classes.iter().enumerate() {
        let count = ds.labels.iter().filter(|&&l| l == class).count();
        if count < folds {
            return Err(Error::Data(format!(
                "class '{}' has {} samples, fewer than {} folds",
                name, count, folds
            )));
        }
    }

    // Stratified fold ids: shuffle each class's indices, deal them round-robin.
    let mut fold_of = vec![0usize; n];
    let mut rng = stream_rng(seed, stream::PROBE);
    for class in 0..c {
        let mut idx: Vec<usize> =
            (0..n).filter(|&i| ds.labels[i] == class).collect();
        // Fisher–Yates with the seeded stream.
        for i in (1..idx.len()).rev() {
            let j = (rand::Rng::gen_range(&mut rng, 0..=i as u64)) as usize;
            idx.swap(i, j);
        }
        for (k, &i) in idx.iter().enumerate() {
            fold_of[i] = k % folds;
        }
    }

    let d = ds.dim;
    let mut accs = Vec::with_capacity(folds);
    for fold in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();

        // Standardize on the training fold.
        let mut mean = vec![0.0f64; d];
        for &i in &train {
            for (m, &v) in mean.iter_mut().zip(&x[i]) {
                *m += v as f64;
            }
        }
        for m in &mut mean {
            *m /= train.len() as f64;
        }
        let mut var = vec![0.0f64; d];
        for &i in &train {
            for k in 0..d {
                let diff = x[i][k] as f64 - mean[k];
                var[k] += diff * diff;
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|v| (v / train.len() as f64).sqrt().max(1e-12))
            .collect();
        let stdz = |i: usize, k: usize| (x[i][k] as f64 - mean[k]) / std[k];

        // Multinomial logistic regression: weights [c][d] + bias [c].
        let mut w = vec![0.0f64; c * d];
        let mut b = vec![0.0f64; c];
        let lr = 1.0 / (PROBE_L2 + d as f64 / 2.0 + 1.0);
        let mut prev_loss = f64::INFINITY;
        for _iter in 0..PROBE_MAX_ITERS {
            let mut gw = vec![0.0f64; c * d];
            let mut gb = vec![0.0f64; c];
            let mut loss = 0.0f64;
            for &i in &train {
                let mut logits = b.clone();
                for (cls, logit) in logits.iter_mut().enumerate() {
                    for k in 0..d {
                        *logit += w[cls * d + k] * stdz(i, k);
                    }
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                loss -= (exps[ds.labels[i]] / denom).ln();
                for cls in 0..c {
                    let p = exps[cls] / denom;
                    let err = p - if cls == ds.labels[i] { 1.0 } else { 0.0 };
                    gb[cls] += err;
                    for k in 0..d {
                        gw[cls * d + k] += err * stdz(i, k);
                    }
                }
            }
            let inv_n = 1.0 / train.len() as f64;
            loss *= inv_n;
            for (wk, gwk) in w.iter_mut().zip(&gw) {
                loss += 0.5 * PROBE_L2 * *wk * *wk * inv_n;
                *wk -= lr * (gwk * inv_n + PROBE_L2 * *wk * inv_n);
            }
            for (bk, gbk) in b.iter_mut().zip(&gb) {
                *bk -= lr * gbk * inv_n;
            }
            if (prev_loss - loss).abs() < PROBE_TOL {
                break;
            }
            prev_loss = loss;
        }

        let mut correct = 0usize;
        for &i in &test {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for cls in 0..c {
                let mut logit = b[cls];
                for k in 0..d {
                    logit += w[cls * d + k] * stdz(i, k);
                }
                if logit > best.0 {
                    best = (logit, cls);
                }
            }
            if best.1 == ds.labels[i] {
                correct += 1;
            }
        }
        accs.push(correct as f64 / test.len() as f64);
    }

    let mean = accs.iter().sum::<f64>() / folds as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / folds as f64;
    Ok((mean, var.sqrt()))
}

// ---------------------------------------------------------------------------
// Router heatmaps
// ---------------------------------------------------------------------------

/// Row-normalized mean-|weight| router heatmap: rows are destination layers
/// ℓ = 2..L, columns are source layers 1..L (1-based); entries with j > ℓ
/// are exactly zero.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RouterHeatmap {
    pub layers: usize,
    /// `rows[r][j]` = normalized mass layer `r+2` places on source `j+1`.
    pub rows: Vec<Vec<f64>>,
}

impl RouterHeatmap {
    /// CSV matrix with a `dest_layer` first column and one column per
    /// source layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dest_layer");
        for j in 1..=self.layers {
            out.push_str(&format!(",src_{}", j));
        }
        out.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            out.push_str(&format!("{}", r + 2));
            for v in row {
                out.push_str(&format!(",{}", v));
            }
            out.push('\n');
        }
        out
    }
}

/// Per-(layer, destination-head) routing mass, kept unnormalized alongside
/// the per-head normalized rows so the head-averaged marginal reproduces
/// [`router_heatmap`] exactly.
#[derive(Clone, Debug, serde::Serialize)]
pub struct PerHeadRouterReport {
    pub layers: usize,
    pub heads: usize,
    /// `magnitudes[r][h][j]` = mean |W| over source heads for destination
    /// head `h` of layer `r+2`, source layer `j+1` (zero for j+1 > layer).
    pub magnitudes: Vec<Vec<Vec<f64>>>,
    /// Same data with each `(layer, head)` row normalized to sum 1.
    pub rows: Vec<Vec<Vec<f64>>>,
}

fn router_weight<'p>(
    cfg: &LimeConfig,
    params: &'p BTreeMap<String, Tensor>,
    layer_idx: usize,
) -> Result<&'p Tensor> {
    params.get(&format!("routers.{}", layer_idx)).ok_or_else(|| {
        Error::Config(format!(
            "no router weights for layer {} (variant '{}')",
            layer_idx + 1,
            cfg.routing_variant
        ))
    })
}

/// Mean absolute router weight per (destination layer, source layer),
/// averaged over both head axes and then row-normalized.
pub fn router_heatmap(model: &Model) -> Result<RouterHeatmap> {
    let cfg = &model.cfg;
    if cfg.routing_variant == RoutingVariant::Baseline {
        return Err(Error::Config(
            "the baseline variant has no routers to visualize".into(),
        ));
    }
    let h_kv = cfg.num_kv_heads;
    let mut rows = Vec::new();
    for i in 1..cfg.num_layers {
        let l = i + 1; // 1-based destination layer
        let w = router_weight(cfg, &model.params, i)?;
        assert_eq!(w.shape, vec![h_kv, l * h_kv], "router shape for layer {}", l);
        let mut row = vec![0.0f64; cfg.num_layers];
        for (j, mass) in row.iter_mut().take(l).enumerate() {
            let mut acc = 0.0f64;
            for h in 0..h_kv {
                for hp in 0..h_kv {
                    acc += (w.data[h * (l * h_kv) + j * h_kv + hp] as f64).abs();
                }
            }
            *mass = acc / (h_kv * h_kv) as f64;
        }
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            for v in &mut row {
                *v /= sum;
            }
        }
        rows.push(row);
    }
    Ok(RouterHeatmap { layers: cfg.num_layers, rows })
}

/// [`router_heatmap`] with the destination-head axis kept.
pub fn per_head_router_report(model: &Model) -> Result<PerHeadRouterReport> {
    let cfg = &model.cfg;
    if cfg.routing_variant == RoutingVariant::Baseline {
        return Err(Error::Config(
            "the baseline variant has no routers to visualize".into(),
        ));
    }
    let h_kv = cfg.num_kv_heads;
    let mut magnitudes = Vec::new();
    let mut rows = Vec::new();
    for i in 1..cfg.num_layers {
        let l = i + 1;
        let w = router_weight(cfg, &model.params, i)?;
        let mut mag = vec![vec![0.0f64; cfg.num_layers]; h_kv];
        for (h, head_row) in mag.iter_mut().enumerate() {
            for (j, mass) in head_row.iter_mut().take(l).enumerate() {
                let mut acc = 0.0f64;
                for hp in 0..h_kv {
                    acc += (w.data[h * (l * h_kv) + j * h_kv + hp] as f64).abs();
                }
                *mass = acc / h_kv as f64;
            }
        }
        let normed: Vec<Vec<f64>> = mag
            .iter()
            .map(|head_row| {
                let sum: f64 = head_row.iter().sum();
                if sum > 0.0 {
                    head_row.iter().map(|v| v / sum).collect()
                } else {
                    head_row.clone()
                }
            })
            .collect();
        magnitudes.push(mag);
        rows.push(normed);
    }
    Ok(PerHeadRouterReport { layers: cfg.num_layers, heads: h_kv, magnitudes, rows })
}

/// Zeroes every off-identity router entry in place, leaving only the
/// identity slice over each layer's own heads — the "vanilla attention"
/// router state the equivalence and heatmap baselines are defined against.
pub fn zero_off_identity_routers(model: &mut Model) {
    let h_kv = model.cfg.num_kv_heads;
    for (name, w) in model.params.iter_mut() {
        if !is_router_param(name) {
            continue;
        }
        let cols = w.shape[1];
        let l = cols / h_kv;
        for h in 0..h_kv {
            for col in 0..cols {
                let own = col >= (l - 1) * h_kv && col - (l - 1) * h_kv == h;
                w.data[h * cols + col] = if own { 1.0 } else { 0.0 };
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Raw export
// ---------------------------------------------------------------------------

/// Writes one CSV row per token position of every dumped sequence:
/// `token,label,layer,v0..v{d'-1}`. `label` is the vocab's rendering of the
/// token (quoted; empty when no vocab is given). Values print in shortest
/// round-trip decimal form, so parsing recovers them to the exact f32.
/// Returns the number of data rows written.
pub fn export_embeddings(
    dump: &RepresentationDump,
    layer: usize,
    kind: RepKind,
    vocab: Option<&TaskVocab>,
    path: &Path,
) -> Result<usize> {
    let seqs = dump.layer_seqs(kind, layer)?;
    let d = seqs.first().map(|z| z.shape[1]).unwrap_or(0);
    let mut out = String::from("token,label,layer");
    for k in 0..d {
        out.push_str(&format!(",v{}", k));
    }
    out.push('\n');
    let mut rows = 0usize;
    for (s, z) in seqs.iter().enumerate() {
        for pos in 0..dump.seq_len {
            let tok = dump.tokens[s][pos];
            let label = vocab
                .map(|v| v.token_text(tok))
                .unwrap_or_default()
                .replace('"', "\"\"");
            out.push_str(&format!("{},\"{}\",{}", tok, label, layer + 1));
            for k in 0..d {
                out.push_str(&format!(",{:?}", z.data[pos * d + k]));
            }
            out.push('\n');
            rows += 1;
        }
    }
    std::fs::write(path, out)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::tensor::rng::trunc_normal;
    use rand::Rng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        stream_rng(seed, stream::EVAL)
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        Tensor::new(&shape.to_vec(), (0..n).map(|_| trunc_normal(&mut r, 1.0)).collect())
    }

    // -------------------------- eigensolver ------------------------------

    #[test]
    fn jacobi_matches_nalgebra_on_random_symmetric_matrices() {
        for (n, seed) in [(3usize, 1u64), (8, 2), (17, 3), (32, 4)] {
            let mut r = rng(seed);
            let mut m = vec![0.0f64; n * n];
            for i in 0..n {
                for j in i..n {
                    let v = trunc_normal(&mut r, 1.0) as f64;
                    m[i * n + j] = v;
                    m[j * n + i] = v;
                }
            }
            let ours = sym_eigenvalues(&m, n);
            let na = nalgebra::DMatrix::from_row_slice(n, n, &m);
            let mut truth: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
            truth.sort_by(|a, b| b.total_cmp(a));
            let scale: f64 = truth.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for (o, t) in ours.iter().zip(&truth) {
                assert!((o - t).abs() <= 1e-9 * scale, "{} vs {} (n={})", o, t, n);
            }
        }
    }

    // ---------------------------- entropy ---------------------------------

    #[test]
    fn orthonormal_rows_hit_log_t_for_every_alpha() {
        // 4 orthonormal rows in d'=6.
        let t = 4;
        let d = 6;
        let mut z = vec![0.0f32; t * d];
        for i in 0..t {
            z[i * d + i] = 1.0;
        }
        let z = Tensor::new(&[t, d], z);
        for alpha in [0.5, 2.0, 3.0, 10.0] {
            let s = renyi_entropy(&z, alpha).unwrap();
            assert!(
                (s - (t as f64).ln()).abs() < 1e-6,
                "alpha={}: {} vs {}",
                alpha,
                s,
                (t as f64).ln()
            );
        }
    }

    #[test]
    fn rank_one_matrix_has_zero_entropy() {
        let row = [0.3f32, -1.2, 0.7];
        let t = 5;
        let data: Vec<f32> = (0..t).flat_map(|_| row).collect();
        let z = Tensor::new(&[t, 3], data);
        let s = renyi_entropy(&z, 2.0).unwrap();
        assert!(s.abs() < 1e-9, "rank-1 entropy {}", s);
    }

    #[test]
    fn entropy_matches_dense_f64_oracle_on_random_matrix() {
        // Independent oracle: build the full t×t Gram in f64, eigendecompose
        // with nalgebra, apply the definition directly.
        let z = random_tensor(&[16, 8], 7);
        let (t, d) = (16usize, 8usize);
        let mut k = nalgebra::DMatrix::<f64>::zeros(t, t);
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0.0f64;
                for c in 0..d {
                    acc += z.data[i * d + c] as f64 * z.data[j * d + c] as f64;
                }
                k[(i, j)] = acc;
            }
        }
        let evals = k.symmetric_eigen().eigenvalues;
        let tr: f64 = evals.iter().map(|&l| l.max(0.0)).sum();
        let sum_sq: f64 = evals.iter().map(|&l| (l.max(0.0) / tr).powi(2)).sum();
        let want = -sum_sq.ln();
        let got = renyi_entropy(&z, 2.0).unwrap();
        assert!((got - want).abs() < 1e-6, "{} vs {}", got, want);
    }

    #[test]
    fn entropy_is_invariant_to_scaling_and_rotation() {
        let z = random_tensor(&[12, 6], 9);
        let base = renyi_entropy(&z, 2.0).unwrap();
        // Powers of two rescale every f32 entry exactly, so the spectrum
        // ratios are untouched and the 1e-9 contract is testable as stated.
        for c in [0.03125f32, 0.5, 2.0, 4096.0] {
            let scaled = Tensor::new(&[12, 6], z.data.iter().map(|v| v * c).collect());
            let s = renyi_entropy(&scaled, 2.0).unwrap();
            assert!((s - base).abs() < 1e-9, "scale {}: {} vs {}", c, s, base);
        }
        // Non-dyadic factors round the f32 inputs themselves (~1e-7
        // relative), which bounds what any spectral function can preserve.
        for c in [0.001f32, 3.0] {
            let scaled = Tensor::new(&[12, 6], z.data.iter().map(|v| v * c).collect());
            let s = renyi_entropy(&scaled, 2.0).unwrap();
            assert!((s - base).abs() < 1e-6, "scale {}: {} vs {}", c, s, base);
        }
        // Right-multiplication by an orthogonal matrix: product of Givens
        // rotations over feature pairs.
        let d = 6usize;
        let mut q = vec![0.0f64; d * d];
        for i in 0..d {
            q[i * d + i] = 1.0;
        }
        let mut r = rng(11);
        for _ in 0..10 {
            let a = r.gen_range(0..d as u64) as usize;
            let b = (a + 1 + r.gen_range(0..(d - 1) as u64) as usize) % d;
            let ang = trunc_normal(&mut r, 1.0) as f64;
            let (cs, sn) = (ang.cos(), ang.sin());
            for row in 0..d {
                let qa = q[row * d + a];
                let qb = q[row * d + b];
                q[row * d + a] = cs * qa - sn * qb;
                q[row * d + b] = sn * qa + cs * qb;
            }
        }
        let mut rotated = vec![0.0f32; 12 * d];
        for i in 0..12 {
            for jj in 0..d {
                let mut acc = 0.0f64;
                for k in 0..d {
                    acc += z.data[i * d + k] as f64 * q[k * d + jj];
                }
                rotated[i * d + jj] = acc as f32;
            }
        }
        let s = renyi_entropy(&Tensor::new(&[12, d], rotated), 2.0).unwrap();
        // f32 rounding of the rotated entries costs a little precision.
        assert!((s - base).abs() < 1e-5, "rotated {} vs {}", s, base);
        // In exact arithmetic the Gram matrix is untouched; verify the
        // 1e-9 contract with an f64-exact orthogonal map: a permutation.
        let mut permuted = vec![0.0f32; 12 * d];
        for i in 0..12 {
            for jj in 0..d {
                permuted[i * d + jj] = z.data[i * d + (jj + 2) % d];
            }
        }
        let sp = renyi_entropy(&Tensor::new(&[12, d], permuted), 2.0).unwrap();
        assert!((sp - base).abs() < 1e-9, "permuted {} vs {}", sp, base);
    }

    #[test]
    fn entropy_stays_in_bounds_and_rejects_zero_input() {
        for seed in 0..20u64 {
            let t = 3 + (seed as usize % 9);
            let d = 2 + (seed as usize % 13);
            let z = random_tensor(&[t, d], 100 + seed);
            for alpha in [0.5, 2.0, 5.0] {
                let s = renyi_entropy(&z, alpha).unwrap();
                assert!((0.0..=(t as f64).ln() + 1e-12).contains(&s), "s={} t={}", s, t);
            }
        }
        let zero = Tensor::zeros(&[4, 3]);
        match renyi_entropy(&zero, 2.0) {
            Err(Error::Data(msg)) => assert!(msg.contains("zero")),
            other => panic!("expected data error, got {:?}", other.map(|_| ())),
        }
        assert!(renyi_entropy(&random_tensor(&[1, 3], 1), 2.0).is_err());
        assert!(renyi_entropy(&random_tensor(&[4, 3], 1), 1.0).is_err());
        assert!(renyi_entropy(&random_tensor(&[4, 3], 1), -2.0).is_err());
    }

    // ------------------------ representation capture ----------------------

    fn tiny_model(variant: RoutingVariant, seed: u64) -> Model {
        let cfg = LimeConfig::new(11, 16, 32, 3, 4, 2, 12, variant);
        Model { params: init_params(&cfg, seed).unwrap(), cfg }
    }

    #[test]
    fn dump_has_one_value_and_hidden_bank_per_layer() {
        let model = tiny_model(RoutingVariant::Full, 3);
        let seqs: Vec<Vec<u32>> =
            (0..5u32).map(|s| (0..8u32).map(|i| (s + i) % 11).collect()).collect();
        let dump = collect_representations(&model, &seqs, 2).unwrap();
        assert_eq!(dump.layers, 3);
        assert_eq!(dump.values.len(), 3);
        assert_eq!(dump.hiddens.len(), 3);
        for layer in 0..3 {
            assert_eq!(dump.values[layer].len(), 5);
            assert_eq!(dump.hiddens[layer].len(), 5);
            assert_eq!(dump.values[layer][0].shape, vec![8, 2 * 4]);
            assert_eq!(dump.hiddens[layer][0].shape, vec![8, 16]);
        }
        assert_eq!(dump.tokens.len(), 5);
    }

    #[test]
    fn layer_one_values_equal_offline_projection_bitwise() {
        let model = tiny_model(RoutingVariant::Full, 5);
        let seqs: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4, 5, 6], vec![6, 5, 4, 3, 2, 1]];
        let dump = collect_representations(&model, &seqs, 2).unwrap();
        // Offline recomputation with the same kernels: embed -> RMSNorm ->
        // W^(V) matmul. Values are captured before rotary/routing, so this
        // must agree bit for bit.
        let mut g = GradGraph::new();
        let vars = bind_params(&mut g, &model.params, &model.cfg, Bind::Frozen);
        let ids: Vec<u32> = seqs.iter().flatten().copied().collect();
        let x = g.embed(vars["embed.weight"], &ids);
        let h = g.rmsnorm(x, vars["layers.0.attn_norm.gain"], crate::model::RMS_EPS);
        let v = g.matmul(h, vars["layers.0.wv"]);
        let offline = g.value(v); // [b*t, H_kv*d_h]
        let (t, dv) = (6usize, 8usize);
        for s in 0..2 {
            for pos in 0..t {
                let want = &offline.data[((s * t) + pos) * dv..((s * t) + pos + 1) * dv];
                let got = &dump.values[0][s].data[pos * dv..(pos + 1) * dv];
                assert_eq!(want, got, "seq {} pos {}", s, pos);
            }
        }
    }

    #[test]
    fn probe_rows_balance_classes_and_respect_word_boundaries() {
        let model = tiny_model(RoutingVariant::Baseline, 8);
        // Byte-level corpus where "is" also appears inside "this" — the
        // embedded occurrence must not count.
        let vocab = TaskVocab::build(&[], TokenKind::Bytes).unwrap();
        let text = ["is it so", "this is x", "it is on", "so it be"];
        let mut cfg = model.cfg.clone();
        cfg.vocab_size = 300;
        cfg.max_seq = 16;
        let model = Model { params: init_params(&cfg, 8).unwrap(), cfg };
        let seqs: Vec<Vec<u32>> = text
            .iter()
            .map(|t| {
                let mut ids = vocab.encode(t).unwrap();
                ids.resize(9, special::PAD);
                ids
            })
            .collect();
        let dump = collect_representations(&model, &seqs, 2).unwrap();
        let ds = probe_dataset(&dump, &vocab, &["is", "it"], RepKind::Hiddens, 0).unwrap();
        // "is": seq0 pos1, seq1 pos6, seq2 pos4 (the "this" match is rejected)
        // "it": seq0 pos4, seq2 pos1, seq3 pos4 -> 3 per class after balance
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 3);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 3);
        assert_eq!(ds.per_class(), 3);
        assert_eq!(ds.features.len(), model.cfg.num_layers);
        assert_eq!(ds.features[0].len(), 6);
        assert_eq!(ds.dim, model.cfg.hidden_size);
        // Missing word is a named error.
        match probe_dataset(&dump, &vocab, &["is", "zebra"], RepKind::Hiddens, 0) {
            Err(Error::Data(msg)) => assert!(msg.contains("zebra")),
            _ => panic!("expected missing-word error"),
        }
    }

    // ----------------------------- probes ---------------------------------

    fn cluster_dataset(
        centers: &[[f64; 2]],
        n_per: usize,
        noise: f64,
        seed: u64,
    ) -> ProbeDataset {
        let mut r = rng(seed);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (class, c) in centers.iter().enumerate() {
            for _ in 0..n_per {
                let dx = trunc_normal(&mut r, 1.0) as f64 * noise;
                let dy = trunc_normal(&mut r, 1.0) as f64 * noise;
                features.push(vec![(c[0] + dx) as f32, (c[1] + dy) as f32]);
                labels.push(class);
            }
        }
        ProbeDataset {
            classes: (0..centers.len()).map(|c| format!("c{}", c)).collect(),
            dim: 2,
            features: vec![features],
            labels,
        }
    }

    #[test]
    fn separable_clusters_probe_at_exactly_one() {
        let ds = cluster_dataset(
            &[[8.0, 8.0], [-8.0, 8.0], [8.0, -8.0], [-8.0, -8.0]],
            40,
            0.2,
            21,
        );
        let (mean, std) = linear_probe_cv(&ds, 0, 5, 0).unwrap();
        assert_eq!(mean, 1.0, "separable clusters must probe perfectly");
        assert_eq!(std, 0.0);
    }

    #[test]
    fn shuffled_labels_probe_at_chance() {
        let mut ds = cluster_dataset(
            &[[8.0, 8.0], [-8.0, 8.0], [8.0, -8.0], [-8.0, -8.0]],
            100,
            0.2,
            22,
        );
        // Destroy the feature-label relationship deterministically.
        let n = ds.labels.len();
        let mut r = rng(23);
        for i in (1..n).rev() {
            let j = r.gen_range(0..=i as u64) as usize;
            ds.labels.swap(i, j);
        }
        let (mean, std) = linear_probe_cv(&ds, 0, 5, 0).unwrap();
        assert!((mean - 0.25).abs() <= 0.05, "chance-level mean {} (std {})", mean, std);
    }

    #[test]
    fn probe_matches_closed_form_lda_on_two_gaussians() {
        // Two overlapping 2-d Gaussians; oracle = LDA with pooled covariance
        // fitted per training fold, evaluated on the same stratified folds.
        let ds = cluster_dataset(&[[1.0, 0.5], [-1.0, -0.5]], 80, 0.9, 31);
        let (probe_mean, _) = linear_probe_cv(&ds, 0, 5, 0).unwrap();

        // Rebuild the same folds the probe used.
        let n = ds.labels.len();
        let folds = 5;
        let mut fold_of = vec![0usize; n];
        let mut r = stream_rng(0, stream::PROBE);
        for class in 0..2 {
            let mut idx: Vec<usize> = (0..n).filter(|&i| ds.labels[i] == class).collect();
            for i in (1..idx.len()).rev() {
                let j = r.gen_range(0..=i as u64) as usize;
                idx.swap(i, j);
            }
            for (k, &i) in idx.iter().enumerate() {
                fold_of[i] = k % folds;
            }
        }
        let x = &ds.features[0];
        let mut lda_accs = Vec::new();
        for fold in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
            let mut mu = [[0.0f64; 2]; 2];
            let mut cnt = [0.0f64; 2];
            for &i in &train {
                let c = ds.labels[i];
                mu[c][0] += x[i][0] as f64;
                mu[c][1] += x[i][1] as f64;
                cnt[c] += 1.0;
            }
            for c in 0..2 {
                mu[c][0] /= cnt[c];
                mu[c][1] /= cnt[c];
            }
            let mut cov = [0.0f64; 4];
            for &i in &train {
                let c = ds.labels[i];
                let dx = x[i][0] as f64 - mu[c][0];
                let dy = x[i][1] as f64 - mu[c][1];
                cov[0] += dx * dx;
                cov[1] += dx * dy;
                cov[2] += dx * dy;
                cov[3] += dy * dy;
            }
            let m = train.len() as f64 - 2.0;
            for v in &mut cov {
                *v /= m;
            }
            let det = cov[0] * cov[3] - cov[1] * cov[2];
            let inv = [cov[3] / det, -cov[1] / det, -cov[2] / det, cov[0] / det];
            let dmu = [mu[1][0] - mu[0][0], mu[1][1] - mu[0][1]];
            let w = [inv[0] * dmu[0] + inv[1] * dmu[1], inv[2] * dmu[0] + inv[3] * dmu[1]];
            let mid = [(mu[0][0] + mu[1][0]) / 2.0, (mu[0][1] + mu[1][1]) / 2.0];
            let b = -(w[0] * mid[0] + w[1] * mid[1]);
            let mut correct = 0usize;
            for &i in &test {
                let score = w[0] * x[i][0] as f64 + w[1] * x[i][1] as f64 + b;
                let pred = usize::from(score > 0.0);
                if pred == ds.labels[i] {
                    correct += 1;
                }
            }
            lda_accs.push(correct as f64 / test.len() as f64);
        }
        let lda_mean = lda_accs.iter().sum::<f64>() / folds as f64;
        assert!(
            (probe_mean - lda_mean).abs() <= 0.05,
            "probe {} vs LDA {}",
            probe_mean,
            lda_mean
        );
    }

    #[test]
    fn probe_rejects_classes_smaller_than_the_fold_count() {
        let ds = cluster_dataset(&[[5.0, 5.0], [-5.0, -5.0]], 3, 0.1, 41);
        match linear_probe_cv(&ds, 0, 5, 0) {
            Err(Error::Data(msg)) => assert!(msg.contains("fewer than")),
            _ => panic!("expected a degenerate-fold error"),
        }
    }

    // ----------------------------- heatmaps -------------------------------

    #[test]
    fn zeroed_identity_router_heatmap_is_exactly_one_hot() {
        let mut model = tiny_model(RoutingVariant::Full, 17);
        zero_off_identity_routers(&mut model);
        let hm = router_heatmap(&model).unwrap();
        assert_eq!(hm.rows.len(), model.cfg.num_layers - 1);
        for (r, row) in hm.rows.iter().enumerate() {
            let l = r + 2;
            for (j, &v) in row.iter().enumerate() {
                let want = if j + 1 == l { 1.0 } else { 0.0 };
                assert_eq!(v, want, "row {} col {}", l, j + 1);
            }
        }
        let csv = hm.to_csv();
        assert!(csv.starts_with("dest_layer,src_1,src_2,src_3\n"));
        assert_eq!(csv.lines().count(), model.cfg.num_layers);
    }

    #[test]
    fn average_router_heatmap_rows_are_uniform() {
        let model = tiny_model(RoutingVariant::Average, 19);
        let hm = router_heatmap(&model).unwrap();
        for (r, row) in hm.rows.iter().enumerate() {
            let l = r + 2;
            for (j, &v) in row.iter().enumerate() {
                if j + 1 <= l {
                    assert!((v - 1.0 / l as f64).abs() < 1e-12, "row {}: {}", l, v);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn heatmap_matches_triple_loop_reference_and_rows_are_stochastic() {
        let model = tiny_model(RoutingVariant::Full, 23);
        let hm = router_heatmap(&model).unwrap();
        let h_kv = model.cfg.num_kv_heads;
        for (r, row) in hm.rows.iter().enumerate() {
            let l = r + 2;
            let w = &model.params[&format!("routers.{}", r + 1)];
            // Independent reference: plain triple loop in f64.
            let mut reference = vec![0.0f64; l];
            for (j, slot) in reference.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                let mut count = 0usize;
                for h in 0..h_kv {
                    for hp in 0..h_kv {
                        acc += (w.data[h * (l * h_kv) + j * h_kv + hp] as f64).abs();
                        count += 1;
                    }
                }
                *slot = acc / count as f64;
            }
            let total: f64 = reference.iter().sum();
            for v in &mut reference {
                *v /= total;
            }
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", l, sum);
            for (j, &v) in row.iter().enumerate() {
                let want = if j < l { reference[j] } else { 0.0 };
                assert!((v - want).abs() < 1e-9, "row {} col {}: {} vs {}", l, j + 1, v, want);
            }
        }
    }

    #[test]
    fn per_head_report_is_consistent_with_the_heatmap() {
        let model = tiny_model(RoutingVariant::Full, 29);
        let hm = router_heatmap(&model).unwrap();
        let per = per_head_router_report(&model).unwrap();
        assert_eq!(per.heads, model.cfg.num_kv_heads);
        for (r, heads) in per.rows.iter().enumerate() {
            let l = r + 2;
            for head_row in heads {
                let sum: f64 = head_row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                for (j, &v) in head_row.iter().enumerate() {
                    if j >= l {
                        assert_eq!(v, 0.0);
                    }
                }
            }
            // Head-averaging the unnormalized magnitudes and renormalizing
            // reproduces the marginal heatmap.
            let mut marged = vec![0.0f64; model.cfg.num_layers];
            for head_row in &per.magnitudes[r] {
                for (j, &v) in head_row.iter().enumerate() {
                    marged[j] += v / per.heads as f64;
                }
            }
            let total: f64 = marged.iter().sum();
            for v in &mut marged {
                *v /= total;
            }
            for (j, &v) in hm.rows[r].iter().enumerate() {
                assert!((v - marged[j]).abs() < 1e-9, "row {} col {}", l, j + 1);
            }
        }
        // Identity-zeroed construction: every head one-hot at its own layer.
        let mut ident = tiny_model(RoutingVariant::Full, 29);
        zero_off_identity_routers(&mut ident);
        let per = per_head_router_report(&ident).unwrap();
        for (r, heads) in per.rows.iter().enumerate() {
            let l = r + 2;
            for head_row in heads {
                for (j, &v) in head_row.iter().enumerate() {
                    assert_eq!(v, if j + 1 == l { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn baseline_has_no_heatmap() {
        let model = tiny_model(RoutingVariant::Baseline, 31);
        match router_heatmap(&model) {
            Err(Error::Config(msg)) => assert!(msg.contains("baseline")),
            _ => panic!("expected a config error"),
        }
    }

    // ------------------------------ export --------------------------------

    #[test]
    fn exported_csv_round_trips_to_the_exact_f32() {
        let model = tiny_model(RoutingVariant::Full, 37);
        let seqs: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]];
        let dump = collect_representations(&model, &seqs, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let rows = export_embeddings(&dump, 1, RepKind::Values, None, &path).unwrap();
        assert_eq!(rows, 8, "2 sequences x 4 positions");
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        let d = 8usize; // H_kv * d_h = 2 * 4
        assert_eq!(header.split(',').count(), d + 3);
        assert!(header.starts_with("token,label,layer,v0"));
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), d + 3);
            let (s, pos) = (i / 4, i % 4);
            assert_eq!(fields[0].parse::<u32>().unwrap(), seqs[s][pos]);
            assert_eq!(fields[2], "2", "1-based layer index");
            for k in 0..d {
                let parsed: f32 = fields[3 + k].parse().unwrap();
                assert_eq!(
                    parsed.to_bits(),
                    dump.values[1][s].data[pos * d + k].to_bits(),
                    "row {} col {}",
                    i,
                    k
                );
            }
        }
    }

    #[test]
    fn entropy_profile_covers_every_layer() {
        let model = tiny_model(RoutingVariant::Full, 41);
        let seqs: Vec<Vec<u32>> =
            (0..4u32).map(|s| (0..6u32).map(|i| (s * 2 + i) % 11).collect()).collect();
        let dump = collect_representations(&model, &seqs, 2).unwrap();
        for kind in [RepKind::Values, RepKind::Hiddens] {
            let profile = entropy_profile(&dump, kind, 2.0).unwrap();
            assert_eq!(profile.len(), 3);
            for (l, s) in profile.iter().enumerate() {
                assert!(s.is_finite() && *s >= 0.0, "layer {}: {}", l, s);
            }
        }
    }
}
