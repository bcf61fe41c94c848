//! Closed-form parameter and FLOP accounting for any [`LimeConfig`].
//!
//! Everything in this module is integer arithmetic over the config — no
//! tensors are allocated and nothing is traced. Costs follow a shape-based
//! convention:
//!
//! * one multiply-accumulate counts as **2 FLOPs**, so a `[m,k]·[k,n]`
//!   matmul costs `2·m·k·n`;
//! * softmax, normalization, activation, rotary and residual passes are
//!   counted **linearly in their element counts**, with the per-element
//!   constants below. These linear terms are a stated convention rather
//!   than a claim of parity with any particular tracer, and they are
//!   dwarfed by the matmul terms at every config this crate trains;
//! * the embedding lookup is a table read and costs nothing.
//!
//! Parameter counts are exact: [`count_params`] matches the tensors
//! allocated by [`crate::model::init_params`] element for element.

use serde::{Deserialize, Serialize};

use crate::model::LimeConfig;
use crate::{Error, Result};

/// FLOPs charged per element of an RMSNorm pass: square, accumulate,
/// rescale, gain.
pub const NORM_FLOPS_PER_ELEM: u64 = 4;
/// FLOPs charged per element of a softmax pass: exponentiate, accumulate,
/// divide.
pub const SOFTMAX_FLOPS_PER_ELEM: u64 = 3;
/// FLOPs charged per element rotated by RoPE: two multiplies and an add.
pub const ROPE_FLOPS_PER_ELEM: u64 = 3;
/// FLOPs charged per element of the SwiGLU gate activation: a sigmoid
/// (counted as three) plus the self-gate product.
pub const ACT_FLOPS_PER_ELEM: u64 = 4;

/// Exact parameter tally, split by component.
///
/// Invariant: the five components sum to `total` exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Token embedding table, plus the output projection when untied.
    pub embeddings: u64,
    /// Q/K/V/O projection weights across all layers.
    pub attention: u64,
    /// Gate/up/down projection weights across all layers.
    pub mlp: u64,
    /// RMSNorm gains: two per layer plus the final norm.
    pub norms: u64,
    /// Router matrices `Σ_{ℓ=2}^{L} H_kv·(ℓ·H_kv)`; zero for the
    /// router-free baseline.
    pub routers: u64,
    /// Sum of all components.
    pub total: u64,
}

/// Forward-pass FLOP tally at a given `(batch, seq_len)`, split by
/// component.
///
/// Invariant: the five cost components sum to `forward_total` exactly, and
/// `training_total` is exactly three times `forward_total`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounts {
    /// Batch size the tally was taken at.
    pub batch: usize,
    /// Sequence length the tally was taken at.
    pub seq_len: usize,
    /// Q/K/V/O projections, rotary application, attention scores, softmax,
    /// weighted sums and the attention residual add, across all layers.
    pub attention: u64,
    /// Cross-layer KV mixing: `2·b·t·d_h·H_kv·(ℓ·H_kv)` per layer `ℓ ≥ 2`,
    /// once for keys and once for values. Zero for the baseline.
    pub routing: u64,
    /// Gate/up/down projections, gate activation and the MLP residual add,
    /// across all layers.
    pub mlp: u64,
    /// All RMSNorm passes: two per layer plus the final norm.
    pub norms: u64,
    /// Logits projection onto the vocabulary.
    pub output_head: u64,
    /// Sum of all components; the embedding lookup itself is free.
    pub forward_total: u64,
    /// Training cost approximated as 3× forward, covering the forward and
    /// backward passes together.
    pub training_total: u64,
}

/// Per-layer slice of the totals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// 1-based layer index.
    pub layer: usize,
    /// Parameters owned by this layer (projections, MLP, its two norm
    /// gains, and its router when present).
    pub params: u64,
    /// Forward FLOPs spent in this layer, including its routing share.
    pub forward_flops: u64,
    /// The routing share of `forward_flops`.
    pub routing_flops: u64,
}

/// Full analytic cost picture for one config at one `(batch, seq_len)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// Exact parameter tally.
    pub params: ParamCounts,
    /// FLOP tally at the requested shape.
    pub flops: FlopCounts,
    /// Per-layer breakdown. Layer costs exclude the embedding table, the
    /// final norm and the output head, which live outside any layer.
    pub layers: Vec<LayerCost>,
}

/// Router parameter count for 1-based layer `l`: a `[H_kv, l·H_kv]` matrix.
/// Layer 1 has nothing buffered before it and owns no router.
fn router_params_at(cfg: &LimeConfig, l: u64) -> u64 {
    let hkv = cfg.num_kv_heads as u64;
    if cfg.routing_variant.has_routers() && l >= 2 {
        hkv * (l * hkv)
    } else {
        0
    }
}

/// Exact parameter count for a valid config.
///
/// Matches [`crate::model::init_params`] element for element: masked
/// variants (`last-j`, `first-j`) still allocate full `[H_kv, ℓ·H_kv]`
/// router matrices, and the frozen `average` variant stores real tensors,
/// so both count; only the baseline has zero router parameters.
pub fn count_params(cfg: &LimeConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let (v, d) = (cfg.vocab_size as u64, cfg.hidden_size as u64);
    let inter = cfg.intermediate_size as u64;
    let layers = cfg.num_layers as u64;
    let (hq, hkv, dh) = (
        cfg.num_heads as u64,
        cfg.num_kv_heads as u64,
        cfg.head_dim as u64,
    );

    let embeddings = v * d + if cfg.tie_embeddings { 0 } else { d * v };
    let attention = layers * (d * (hq * dh) + 2 * d * (hkv * dh) + (hq * dh) * d);
    let mlp = layers * 3 * d * inter;
    let norms = (2 * layers + 1) * d;
    let routers: u64 = (1..=layers).map(|l| router_params_at(cfg, l)).sum();
    let total = embeddings + attention + mlp + norms + routers;
    Ok(ParamCounts { embeddings, attention, mlp, norms, routers, total })
}

/// Per-layer FLOP shares at `(b, t)`, in the module's counting convention.
struct LayerFlops {
    attention: u64,
    routing: u64,
    mlp: u64,
    norms: u64,
}

fn layer_flops(cfg: &LimeConfig, b: u64, t: u64, l: u64) -> LayerFlops {
    let d = cfg.hidden_size as u64;
    let inter = cfg.intermediate_size as u64;
    let (hq, hkv, dh) = (
        cfg.num_heads as u64,
        cfg.num_kv_heads as u64,
        cfg.head_dim as u64,
    );

    let projections = 2 * b * t * d * (hq * dh)      // queries
        + 2 * (2 * b * t * d * (hkv * dh))           // keys and values
        + 2 * b * t * (hq * dh) * d; // output
    let rope = ROPE_FLOPS_PER_ELEM * b * (hq + hkv) * t * dh;
    let scores = 2 * b * hq * t * t * dh;
    let softmax = SOFTMAX_FLOPS_PER_ELEM * b * hq * t * t;
    let weighted = 2 * b * hq * t * t * dh;
    let attention = projections + rope + scores + softmax + weighted + b * t * d;

    // One mixture over l·H_kv buffered heads for keys, one for values.
    let routing = if cfg.routing_variant.has_routers() && l >= 2 {
        2 * (2 * b * t * dh * hkv * (l * hkv))
    } else {
        0
    };

    let mlp = 3 * (2 * b * t * d * inter)            // gate, up, down
        + ACT_FLOPS_PER_ELEM * b * t * inter         // SiLU on the gate
        + b * t * inter                              // gate × up product
        + b * t * d; // residual add

    let norms = 2 * NORM_FLOPS_PER_ELEM * b * t * d;
    LayerFlops { attention, routing, mlp, norms }
}

/// Forward and training FLOPs for a valid config at `(batch, seq_len)`.
///
/// `seq_len` may exceed `cfg.max_seq`; the tally is pure shape arithmetic.
pub fn count_flops(cfg: &LimeConfig, batch: usize, seq_len: usize) -> Result<FlopCounts> {
    cfg.validate()?;
    if batch == 0 || seq_len == 0 {
        return Err(Error::Config(format!(
            "count_flops needs batch >= 1 and seq_len >= 1, got ({}, {})",
            batch, seq_len
        )));
    }
    let (b, t) = (batch as u64, seq_len as u64);
    let (v, d) = (cfg.vocab_size as u64, cfg.hidden_size as u64);

    let mut attention = 0;
    let mut routing = 0;
    let mut mlp = 0;
    let mut norms = NORM_FLOPS_PER_ELEM * b * t * d; // final norm
    for l in 1..=cfg.num_layers as u64 {
        let f = layer_flops(cfg, b, t, l);
        attention += f.attention;
        routing += f.routing;
        mlp += f.mlp;
        norms += f.norms;
    }
    let output_head = 2 * b * t * d * v;
    let forward_total = attention + routing + mlp + norms + output_head;
    Ok(FlopCounts {
        batch,
        seq_len,
        attention,
        routing,
        mlp,
        norms,
        output_head,
        forward_total,
        training_total: 3 * forward_total,
    })
}

/// [`count_params`] and [`count_flops`] plus the per-layer breakdown.
pub fn cost_report(cfg: &LimeConfig, batch: usize, seq_len: usize) -> Result<CostReport> {
    let params = count_params(cfg)?;
    let flops = count_flops(cfg, batch, seq_len)?;
    let (b, t) = (batch as u64, seq_len as u64);
    let d = cfg.hidden_size as u64;
    let inter = cfg.intermediate_size as u64;
    let (hq, hkv, dh) = (
        cfg.num_heads as u64,
        cfg.num_kv_heads as u64,
        cfg.head_dim as u64,
    );
    let layer_params =
        d * (hq * dh) + 2 * d * (hkv * dh) + (hq * dh) * d + 3 * d * inter + 2 * d;

    let layers = (1..=cfg.num_layers as u64)
        .map(|l| {
            let f = layer_flops(cfg, b, t, l);
            LayerCost {
                layer: l as usize,
                params: layer_params + router_params_at(cfg, l),
                forward_flops: f.attention + f.routing + f.mlp + f.norms,
                routing_flops: f.routing,
            }
        })
        .collect();
    Ok(CostReport { params, flops, layers })
}

/// One training run's loss log plus enough config to price its steps, as
/// consumed by [`iso_flop_table`].
pub struct IsoFlopSeries<'a> {
    /// Column prefix in the merged CSV.
    pub name: String,
    /// Architecture the run trained.
    pub config: &'a LimeConfig,
    /// Sequences per optimizer step.
    pub batch: usize,
    /// Tokens per sequence.
    pub seq_len: usize,
    /// `losses[s]` is the loss measured at step `s`; entry 0 is the loss
    /// before any update.
    pub losses: &'a [f64],
}

/// Merge loss logs onto a shared cumulative-training-FLOPs axis.
///
/// Emits CSV with a `step` column followed by `<name>_flops,<name>_loss`
/// per series. Cumulative FLOPs at step `s` are `s` times that series'
/// per-step training cost, so step 0 is 0 for every series and two series
/// with identical configs and shapes get identical FLOPs columns. All
/// series must log the same number of steps.
pub fn iso_flop_table(series: &[IsoFlopSeries]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Config("iso_flop_table needs at least one series".into()));
    }
    for s in series {
        if s.name.contains(',') || s.name.contains('\n') {
            return Err(Error::Config(format!(
                "series name {:?} would corrupt the CSV",
                s.name
            )));
        }
    }
    let steps = series[0].losses.len();
    for s in &series[1..] {
        if s.losses.len() != steps {
            return Err(Error::Data(format!(
                "loss log for '{}' has {} steps, expected {}",
                s.name,
                s.losses.len(),
                steps
            )));
        }
    }
    let per_step: Vec<u128> = series
        .iter()
        .map(|s| count_flops(s.config, s.batch, s.seq_len).map(|f| f.training_total as u128))
        .collect::<Result<_>>()?;

    let mut out = String::from("step");
    for s in series {
        out.push_str(&format!(",{}_flops,{}_loss", s.name, s.name));
    }
    out.push('\n');
    for step in 0..steps {
        out.push_str(&step.to_string());
        for (s, flops) in series.iter().zip(&per_step) {
            out.push_str(&format!(",{},{:?}", step as u128 * flops, s.losses[step]));
        }
        out.push('\n');
    }
    Ok(out)
}
