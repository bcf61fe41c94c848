//! Define-by-run reverse-mode autodiff.
//!
//! A [`GradGraph`] is an append-only arena of [`Op`] records. Every forward
//! helper pushes one node whose inputs are earlier indices, so the arena is
//! topologically sorted by construction and [`GradGraph::backward`] is a
//! single reverse sweep. Graphs are cheap and short-lived: build one per
//! training step, run backward, read the leaf gradients, drop it.
//!
//! The op set is exactly what a decoder-only transformer with cross-layer
//! KV routing needs — nothing generic beyond that. Matmuls treat leading
//! dimensions as batch, so per-head attention products need no transpose
//! plumbing; attention itself stays unfused (scores → masked softmax →
//! weighted sum), which keeps every op independently checkable against a
//! finite-difference oracle.

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;

/// Additive-mask value treated as "excluded" by [`GradGraph::softmax_rows`].
/// Kept finite so f32 arithmetic stays NaN-free; anything at or below half
/// this sentinel counts as masked and maps to an exact zero weight.
pub const MASK_SENTINEL: f32 = -1e9;

/// Handle to a node in a [`GradGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

/// Operation record. Fields hold whatever the backward rule needs beyond
/// the input values themselves (index lists, saved statistics).
pub enum Op {
    Leaf,
    /// Elementwise `a + b` (same shape).
    Add(Var, Var),
    /// Elementwise `a * b` (same shape).
    Mul(Var, Var),
    /// `a * c` for a constant `c`.
    Scale(Var, f32),
    /// Elementwise `x * sigmoid(x)`.
    Silu(Var),
    /// `a[.., m, k] · b[.., k, n] -> [.., m, n]`; a 2-d `b` broadcasts over
    /// the batch dims. Linear layers store weights as `[in, out]`.
    Matmul(Var, Var),
    /// `a[.., m, k] · b[.., n, k]ᵀ -> [.., m, n]`; used for attention scores
    /// and the tied output head (logits = h · Eᵀ).
    MatmulNt(Var, Var),
    /// Row softmax over the last dim with an optional additive mask whose
    /// shape is either equal to `x` or a trailing suffix of it.
    SoftmaxRows { x: Var, mask: Option<Var> },
    /// Row-wise RMS normalization with a learned gain.
    RmsNorm { x: Var, gain: Var, eps: f32 },
    /// Row gather: `out[i] = table[ids[i]]`.
    Embed { table: Var, ids: Vec<u32> },
    /// `[b*t, h*dh] -> [b, h, t, dh]`.
    SplitHeads { x: Var, b: usize, h: usize },
    /// `[b, h, t, dh] -> [b*t, h*dh]`.
    MergeHeads(Var),
    /// `[b, hkv, t, dh] -> [b, hkv*group, t, dh]`, output head `j` reading
    /// input head `j / group` (the GQA broadcast).
    RepeatHeads { x: Var, group: usize },
    /// Rotary position embedding over the trailing `[t, dh]` dims,
    /// interleaved-pair convention.
    Rope { x: Var, theta: f32 },
    /// Per-head mixture of buffered streams: `w` is `[h, l*h]`, each buffer
    /// is `[b, h, t, dh]`, and output head `i` is the weighted sum of all
    /// `l*h` buffered heads with weights `w[i, ..]` (column `s*h + j` maps
    /// to buffer `s`, head `j`).
    RouteMix { w: Var, bufs: Vec<Var> },
    /// Mean token cross-entropy over rows whose target is not `ignore`.
    CrossEntropyMean { logits: Var, targets: Vec<u32>, ignore: u32, lse: Vec<f32>, count: usize },
    /// Sum of all elements.
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Arena of nodes plus a parallel gradient store.
#[derive(Default)]
pub struct GradGraph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl GradGraph {
    pub fn new() -> Self {
        GradGraph { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Inserts a trainable leaf; its gradient survives the backward sweep.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a non-trainable leaf (inputs, masks, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of `v` if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Removes and returns the gradient of `v` as a tensor.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let shape = self.nodes[v.0].value.shape.clone();
        self.grads[v.0].take().map(|data| Tensor::new(&shape, data))
    }

    // ---- forward ops -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect();
        let t = Tensor { shape: va.shape.clone(), data };
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let t = Tensor { shape: va.shape.clone(), data };
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| x * c).collect();
        let t = Tensor { shape: va.shape.clone(), data };
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| x * sigmoid(x)).collect();
        let t = Tensor { shape: va.shape.clone(), data };
        let ng = self.needs(a);
        self.push(t, Op::Silu(a), ng)
    }

    /// Batched `a · b`; see [`Op::Matmul`].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let dims = MmDims::of(self.value(a), self.value(b), false);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; dims.lead * dims.m * dims.n];
        for s in 0..dims.lead {
            gemm_nn(
                dims.m,
                dims.k,
                dims.n,
                dims.a_slice(&va.data, s),
                dims.b_slice(&vb.data, s),
                &mut out[s * dims.m * dims.n..(s + 1) * dims.m * dims.n],
                false,
            );
        }
        let t = Tensor::new(&dims.out_shape, out);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Matmul(a, b), ng)
    }

    /// Batched `a · bᵀ`; see [`Op::MatmulNt`].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let dims = MmDims::of(self.value(a), self.value(b), true);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; dims.lead * dims.m * dims.n];
        for s in 0..dims.lead {
            gemm_nt(
                dims.m,
                dims.k,
                dims.n,
                dims.a_slice(&va.data, s),
                dims.b_slice(&vb.data, s),
                &mut out[s * dims.m * dims.n..(s + 1) * dims.m * dims.n],
                false,
            );
        }
        let t = Tensor::new(&dims.out_shape, out);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::MatmulNt(a, b), ng)
    }

    /// Row softmax over the last dimension. Mask entries at or below
    /// [`MASK_SENTINEL`]`/2` exclude a column: its weight is exactly 0 and
    /// it never enters the max/sum. Panics if a row is fully masked.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Var>) -> Var {
        let vx = self.value(x);
        let n = *vx.shape.last().expect("softmax on rank-0");
        let rows = vx.numel() / n;
        let mask_data = mask.map(|m| {
            let vm = self.value(m);
            let ms = &vm.shape;
            assert!(
                vx.shape.ends_with(ms) && vm.numel() % n == 0,
                "mask shape {:?} must be a row-aligned suffix of {:?}",
                ms,
                vx.shape
            );
            (vm.data.clone(), vm.numel())
        });
        let mut data = vec![0.0f32; vx.numel()];
        for r in 0..rows {
            let xr = &vx.data[r * n..(r + 1) * n];
            let out = &mut data[r * n..(r + 1) * n];
            let mrow = mask_data
                .as_ref()
                .map(|(md, mlen)| &md[(r * n) % mlen..(r * n) % mlen + n]);
            softmax_row(xr, mrow, out);
        }
        let t = Tensor { shape: vx.shape.clone(), data };
        let ng = self.needs(x);
        self.push(t, Op::SoftmaxRows { x, mask }, ng)
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f32) -> Var {
        let (vx, vg) = (self.value(x), self.value(gain));
        let d = *vx.shape.last().expect("rmsnorm on rank-0");
        assert_eq!(vg.shape, vec![d], "rmsnorm gain must be [{}]", d);
        let rows = vx.numel() / d;
        let mut data = vec![0.0f32; vx.numel()];
        for r in 0..rows {
            let xr = &vx.data[r * d..(r + 1) * d];
            let inv = rms_inv(xr, eps);
            for i in 0..d {
                data[r * d + i] = xr[i] * inv * vg.data[i];
            }
        }
        let t = Tensor { shape: vx.shape.clone(), data };
        let ng = self.needs(x) || self.needs(gain);
        self.push(t, Op::RmsNorm { x, gain, eps }, ng)
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let vt = self.value(table);
        assert_eq!(vt.shape.len(), 2, "embedding table must be 2-d");
        let (vocab, d) = (vt.shape[0], vt.shape[1]);
        let mut data = vec![0.0f32; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            assert!(id < vocab, "token id {} out of vocab {}", id, vocab);
            data[i * d..(i + 1) * d].copy_from_slice(&vt.data[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], data);
        let ng = self.needs(table);
        self.push(t, Op::Embed { table, ids: ids.to_vec() }, ng)
    }

    /// `[b*t, h*dh] -> [b, h, t, dh]`.
    pub fn split_heads(&mut self, x: Var, b: usize, h: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape.len(), 2);
        let (bt, hdh) = (vx.shape[0], vx.shape[1]);
        assert_eq!(bt % b, 0, "rows {} not divisible by batch {}", bt, b);
        assert_eq!(hdh % h, 0, "cols {} not divisible by heads {}", hdh, h);
        let (t, dh) = (bt / b, hdh / h);
        let mut data = vec![0.0f32; vx.numel()];
        for bi in 0..b {
            for ti in 0..t {
                let src_row = (bi * t + ti) * hdh;
                for hi in 0..h {
                    let dst = ((bi * h + hi) * t + ti) * dh;
                    data[dst..dst + dh]
                        .copy_from_slice(&vx.data[src_row + hi * dh..src_row + (hi + 1) * dh]);
                }
            }
        }
        let tn = Tensor::new(&[b, h, t, dh], data);
        let ng = self.needs(x);
        self.push(tn, Op::SplitHeads { x, b, h }, ng)
    }

    /// `[b, h, t, dh] -> [b*t, h*dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape.len(), 4);
        let (b, h, t, dh) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let mut data = vec![0.0f32; vx.numel()];
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let src = ((bi * h + hi) * t + ti) * dh;
                    let dst = (bi * t + ti) * (h * dh) + hi * dh;
                    data[dst..dst + dh].copy_from_slice(&vx.data[src..src + dh]);
                }
            }
        }
        let tn = Tensor::new(&[b * t, h * dh], data);
        let ng = self.needs(x);
        self.push(tn, Op::MergeHeads(x), ng)
    }

    /// GQA broadcast: `[b, hkv, t, dh] -> [b, hkv*group, t, dh]`.
    pub fn repeat_heads(&mut self, x: Var, group: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape.len(), 4);
        let (b, hkv, t, dh) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let td = t * dh;
        let h = hkv * group;
        let mut data = vec![0.0f32; b * h * td];
        for bi in 0..b {
            for hi in 0..h {
                let src = (bi * hkv + hi / group) * td;
                let dst = (bi * h + hi) * td;
                data[dst..dst + td].copy_from_slice(&vx.data[src..src + td]);
            }
        }
        let tn = Tensor::new(&[b, h, t, dh], data);
        let ng = self.needs(x);
        self.push(tn, Op::RepeatHeads { x, group }, ng)
    }

    /// Rotary embedding on `[.., t, dh]`; pair `(2p, 2p+1)` of the position-
    /// `ti` row rotates by `ti * theta^(-2p/dh)`.
    pub fn rope(&mut self, x: Var, theta: f32) -> Var {
        let vx = self.value(x);
        assert!(vx.shape.len() >= 2, "rope needs trailing [t, dh] dims");
        let dh = vx.shape[vx.shape.len() - 1];
        let t = vx.shape[vx.shape.len() - 2];
        assert_eq!(dh % 2, 0, "rope head dim must be even");
        let heads = vx.numel() / (t * dh);
        let tab = rope_table(t, dh, theta);
        let mut data = vec![0.0f32; vx.numel()];
        for hd in 0..heads {
            for ti in 0..t {
                let off = (hd * t + ti) * dh;
                for p in 0..dh / 2 {
                    let (c, s) = tab[ti * (dh / 2) + p];
                    let (x0, x1) = (vx.data[off + 2 * p], vx.data[off + 2 * p + 1]);
                    data[off + 2 * p] = x0 * c - x1 * s;
                    data[off + 2 * p + 1] = x0 * s + x1 * c;
                }
            }
        }
        let tn = Tensor { shape: vx.shape.clone(), data };
        let ng = self.needs(x);
        self.push(tn, Op::Rope { x, theta }, ng)
    }

    /// Mixes `l` buffered `[b, h, t, dh]` streams into one with per-head
    /// weights `w[h, l*h]`; see [`Op::RouteMix`].
    pub fn route_mix(&mut self, w: Var, bufs: &[Var]) -> Var {
        assert!(!bufs.is_empty(), "route_mix needs at least one buffer");
        let l = bufs.len();
        let shape = self.value(bufs[0]).shape.clone();
        assert_eq!(shape.len(), 4);
        let (b, h, t, dh) = (shape[0], shape[1], shape[2], shape[3]);
        for &bf in bufs {
            assert_eq!(self.value(bf).shape, shape, "route_mix buffers must share a shape");
        }
        let vw = self.value(w);
        assert_eq!(vw.shape, vec![h, l * h], "router must be [{}, {}]", h, l * h);
        let td = t * dh;
        let cols = l * h;
        let mut data = vec![0.0f32; b * h * td];
        for bi in 0..b {
            for hi in 0..h {
                let out = &mut data[(bi * h + hi) * td..(bi * h + hi + 1) * td];
                for (s, &bf) in bufs.iter().enumerate() {
                    let vb = &self.nodes[bf.0].value;
                    for j in 0..h {
                        let wv = vw.data[hi * cols + s * h + j];
                        axpy(wv, &vb.data[(bi * h + j) * td..(bi * h + j + 1) * td], out);
                    }
                }
            }
        }
        let tn = Tensor::new(&shape, data);
        let ng = self.needs(w) || bufs.iter().any(|&bf| self.needs(bf));
        self.push(tn, Op::RouteMix { w, bufs: bufs.to_vec() }, ng)
    }

    /// Mean cross-entropy over rows whose target differs from `ignore`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape.len(), 2);
        let (n, vsize) = (vl.shape[0], vl.shape[1]);
        assert_eq!(targets.len(), n, "one target per logit row");
        let mut lse = vec![0.0f32; n];
        let mut count = 0usize;
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &vl.data[i * vsize..(i + 1) * vsize];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|&z| ((z - m) as f64).exp()).sum();
            let l = m as f64 + sum.ln();
            lse[i] = l as f32;
            if targets[i] != ignore {
                let tgt = targets[i] as usize;
                assert!(tgt < vsize, "target {} out of vocab {}", tgt, vsize);
                total += l - row[tgt] as f64;
                count += 1;
            }
        }
        assert!(count > 0, "cross entropy with every position ignored");
        let t = Tensor::scalar((total / count as f64) as f32);
        let ng = self.needs(logits);
        self.push(t, Op::CrossEntropyMean { logits, targets: targets.to_vec(), ignore, lse, count }, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s: f64 = vx.data.iter().map(|&v| v as f64).sum();
        let t = Tensor::scalar(s as f32);
        let ng = self.needs(x);
        self.push(t, Op::SumAll(x), ng)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Intermediate gradients are freed
    /// as soon as they have been propagated; leaf gradients stay readable.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        assert!(self.nodes[loss.0].needs_grad, "loss does not depend on any trainable leaf");
        self.grads[loss.0] = Some(vec![1.0]);
        let GradGraph { nodes, grads } = self;
        for i in (0..=loss.0).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_op(nodes, grads, i, &g);
        }
    }
}

/// Resolved dimensions for a (possibly batched, possibly rhs-broadcast)
/// matrix product.
struct MmDims {
    lead: usize,
    m: usize,
    k: usize,
    n: usize,
    b_broadcast: bool,
    out_shape: Vec<usize>,
}

impl MmDims {
    fn of(a: &Tensor, b: &Tensor, transposed: bool) -> MmDims {
        assert!(a.shape.len() >= 2, "matmul lhs must have rank >= 2");
        let (m, k) = (a.shape[a.shape.len() - 2], a.shape[a.shape.len() - 1]);
        let lead: usize = a.shape[..a.shape.len() - 2].iter().product();
        let b_broadcast = b.shape.len() == 2;
        if !b_broadcast {
            assert_eq!(
                b.shape[..b.shape.len() - 2],
                a.shape[..a.shape.len() - 2],
                "matmul batch dims differ: {:?} vs {:?}",
                a.shape,
                b.shape
            );
        }
        let (br, bc) = (b.shape[b.shape.len() - 2], b.shape[b.shape.len() - 1]);
        let n = if transposed {
            assert_eq!(bc, k, "matmul_nt inner dim: {:?} x {:?}", a.shape, b.shape);
            br
        } else {
            assert_eq!(br, k, "matmul inner dim: {:?} x {:?}", a.shape, b.shape);
            bc
        };
        let mut out_shape = a.shape[..a.shape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        MmDims { lead, m, k, n, b_broadcast, out_shape }
    }

    fn a_slice<'d>(&self, data: &'d [f32], s: usize) -> &'d [f32] {
        &data[s * self.m * self.k..(s + 1) * self.m * self.k]
    }

    fn b_slice<'d>(&self, data: &'d [f32], s: usize) -> &'d [f32] {
        let len = self.k * self.n;
        if self.b_broadcast {
            &data[..len]
        } else {
            &data[s * len..(s + 1) * len]
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn masked(m: f32) -> bool {
    m <= MASK_SENTINEL * 0.5
}

/// One stabilized softmax row; masked columns get exactly 0.
fn softmax_row(xr: &[f32], mrow: Option<&[f32]>, out: &mut [f32]) {
    let n = xr.len();
    let mut mx = f32::NEG_INFINITY;
    for i in 0..n {
        let keep = mrow.map_or(true, |mr| !masked(mr[i]));
        if keep {
            let s = xr[i] + mrow.map_or(0.0, |mr| mr[i]);
            if s > mx {
                mx = s;
            }
        }
    }
    assert!(mx > f32::NEG_INFINITY, "softmax row is fully masked");
    let mut z = 0.0f64;
    for i in 0..n {
        let keep = mrow.map_or(true, |mr| !masked(mr[i]));
        if keep {
            let e = ((xr[i] + mrow.map_or(0.0, |mr| mr[i])) - mx).exp();
            out[i] = e;
            z += e as f64;
        } else {
            out[i] = 0.0;
        }
    }
    let inv = (1.0 / z) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// `1 / sqrt(mean(x^2) + eps)` with the sum carried in f64.
fn rms_inv(row: &[f32], eps: f32) -> f32 {
    let ssq: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum();
    (1.0 / (ssq / row.len() as f64 + eps as f64).sqrt()) as f32
}

fn rope_table(t: usize, dh: usize, theta: f32) -> Vec<(f32, f32)> {
    let half = dh / 2;
    let mut tab = vec![(0.0f32, 0.0f32); t * half];
    for p in 0..half {
        let freq = (theta as f64).powf(-2.0 * p as f64 / dh as f64);
        for ti in 0..t {
            let ang = ti as f64 * freq;
            tab[ti * half + p] = (ang.cos() as f32, ang.sin() as f32);
        }
    }
    tab
}

/// Gradient buffer of `v`, allocated on first touch.
fn gbuf<'a>(grads: &'a mut [Option<Vec<f32>>], nodes: &[Node], v: Var) -> &'a mut [f32] {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(vec![0.0f32; nodes[v.0].value.numel()]);
    }
    slot.as_mut().unwrap()
}

fn backward_op(nodes: &[Node], grads: &mut [Option<Vec<f32>>], i: usize, g: &[f32]) {
    match &nodes[i].op {
        Op::Leaf => unreachable!("leaves are skipped in the sweep"),
        Op::Add(a, b) => {
            for &inp in [a, b] {
                if nodes[inp.0].needs_grad {
                    let gi = gbuf(grads, nodes, inp);
                    axpy(1.0, g, gi);
                }
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if nodes[a.0].needs_grad {
                let vb = &nodes[b.0].value.data;
                let ga = gbuf(grads, nodes, a);
                for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(vb) {
                    *o += gv * bv;
                }
            }
            if nodes[b.0].needs_grad {
                let va = &nodes[a.0].value.data;
                let gb = gbuf(grads, nodes, b);
                for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(va) {
                    *o += gv * av;
                }
            }
        }
        Op::Scale(a, c) => {
            if nodes[a.0].needs_grad {
                let ga = gbuf(grads, nodes, *a);
                axpy(*c, g, ga);
            }
        }
        Op::Silu(a) => {
            if nodes[a.0].needs_grad {
                let vx = &nodes[a.0].value.data;
                let ga = gbuf(grads, nodes, *a);
                for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(vx) {
                    let s = sigmoid(x);
                    *o += gv * s * (1.0 + x * (1.0 - s));
                }
            }
        }
        Op::Matmul(a, b) => {
            let (a, b) = (*a, *b);
            let dims = MmDims::of(&nodes[a.0].value, &nodes[b.0].value, false);
            let (m, k, n) = (dims.m, dims.k, dims.n);
            if nodes[a.0].needs_grad {
                let vb = &nodes[b.0].value.data;
                let ga = gbuf(grads, nodes, a);
                for s in 0..dims.lead {
                    // dA = dC · Bᵀ
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g[s * m * n..(s + 1) * m * n],
                        dims.b_slice(vb, s),
                        &mut ga[s * m * k..(s + 1) * m * k],
                        true,
                    );
                }
            }
            if nodes[b.0].needs_grad {
                let va = &nodes[a.0].value.data;
                let gb = gbuf(grads, nodes, b);
                for s in 0..dims.lead {
                    // dB = Aᵀ · dC (accumulates across batch when broadcast)
                    let gb_s = if dims.b_broadcast {
                        &mut gb[..k * n]
                    } else {
                        &mut gb[s * k * n..(s + 1) * k * n]
                    };
                    gemm_tn(k, m, n, dims.a_slice(va, s), &g[s * m * n..(s + 1) * m * n], gb_s, true);
                }
            }
        }
        Op::MatmulNt(a, b) => {
            let (a, b) = (*a, *b);
            let dims = MmDims::of(&nodes[a.0].value, &nodes[b.0].value, true);
            let (m, k, n) = (dims.m, dims.k, dims.n);
            if nodes[a.0].needs_grad {
                let vb = &nodes[b.0].value.data;
                let ga = gbuf(grads, nodes, a);
                for s in 0..dims.lead {
                    // dA = dC · B
                    gemm_nn(
                        m,
                        n,
                        k,
                        &g[s * m * n..(s + 1) * m * n],
                        dims.b_slice(vb, s),
                        &mut ga[s * m * k..(s + 1) * m * k],
                        true,
                    );
                }
            }
            if nodes[b.0].needs_grad {
                let va = &nodes[a.0].value.data;
                let gb = gbuf(grads, nodes, b);
                for s in 0..dims.lead {
                    // dB = dCᵀ · A
                    let gb_s = if dims.b_broadcast {
                        &mut gb[..n * k]
                    } else {
                        &mut gb[s * n * k..(s + 1) * n * k]
                    };
                    gemm_tn(n, m, k, &g[s * m * n..(s + 1) * m * n], dims.a_slice(va, s), gb_s, true);
                }
            }
        }
        Op::SoftmaxRows { x, .. } => {
            if nodes[x.0].needs_grad {
                let y = &nodes[i].value.data;
                let n = *nodes[i].value.shape.last().unwrap();
                let rows = y.len() / n;
                let gx = gbuf(grads, nodes, *x);
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut s = 0.0f64;
                    for j in 0..n {
                        s += gr[j] as f64 * yr[j] as f64;
                    }
                    let sf = s as f32;
                    let go = &mut gx[r * n..(r + 1) * n];
                    for j in 0..n {
                        // masked columns have y=0, so they stay untouched
                        go[j] += yr[j] * (gr[j] - sf);
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, eps } => {
            let (x, gain, eps) = (*x, *gain, *eps);
            let d = *nodes[x.0].value.shape.last().unwrap();
            let rows = nodes[x.0].value.numel() / d;
            let vx = &nodes[x.0].value.data;
            let vg = &nodes[gain.0].value.data;
            if nodes[x.0].needs_grad {
                let gx = gbuf(grads, nodes, x);
                for r in 0..rows {
                    let xr = &vx[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let inv = rms_inv(xr, eps) as f64;
                    let mut s = 0.0f64;
                    for i in 0..d {
                        s += gr[i] as f64 * vg[i] as f64 * xr[i] as f64;
                    }
                    let c = s * inv * inv * inv / d as f64;
                    for i in 0..d {
                        gx[r * d + i] +=
                            ((gr[i] as f64 * vg[i] as f64) * inv - xr[i] as f64 * c) as f32;
                    }
                }
            }
            if nodes[gain.0].needs_grad {
                let mut gg = vec![0.0f64; d];
                for r in 0..rows {
                    let xr = &vx[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let inv = rms_inv(xr, eps) as f64;
                    for i in 0..d {
                        gg[i] += gr[i] as f64 * xr[i] as f64 * inv;
                    }
                }
                let ggs = gbuf(grads, nodes, gain);
                for (o, &v) in ggs.iter_mut().zip(&gg) {
                    *o += v as f32;
                }
            }
        }
        Op::Embed { table, ids } => {
            if nodes[table.0].needs_grad {
                let d = nodes[table.0].value.shape[1];
                let gt = gbuf(grads, nodes, *table);
                for (i, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    axpy(1.0, &g[i * d..(i + 1) * d], &mut gt[id * d..(id + 1) * d]);
                }
            }
        }
        Op::SplitHeads { x, b, h } => {
            if nodes[x.0].needs_grad {
                let (b, h) = (*b, *h);
                let out_shape = &nodes[i].value.shape;
                let (t, dh) = (out_shape[2], out_shape[3]);
                let hdh = h * dh;
                let gx = gbuf(grads, nodes, *x);
                for bi in 0..b {
                    for ti in 0..t {
                        let dst_row = (bi * t + ti) * hdh;
                        for hi in 0..h {
                            let src = ((bi * h + hi) * t + ti) * dh;
                            axpy(
                                1.0,
                                &g[src..src + dh],
                                &mut gx[dst_row + hi * dh..dst_row + (hi + 1) * dh],
                            );
                        }
                    }
                }
            }
        }
        Op::MergeHeads(x) => {
            if nodes[x.0].needs_grad {
                let shape = nodes[x.0].value.shape.clone();
                let (b, h, t, dh) = (shape[0], shape[1], shape[2], shape[3]);
                let gx = gbuf(grads, nodes, *x);
                for bi in 0..b {
                    for hi in 0..h {
                        for ti in 0..t {
                            let dst = ((bi * h + hi) * t + ti) * dh;
                            let src = (bi * t + ti) * (h * dh) + hi * dh;
                            axpy(1.0, &g[src..src + dh], &mut gx[dst..dst + dh]);
                        }
                    }
                }
            }
        }
        Op::RepeatHeads { x, group } => {
            if nodes[x.0].needs_grad {
                let group = *group;
                let shape = nodes[x.0].value.shape.clone();
                let (b, hkv, t, dh) = (shape[0], shape[1], shape[2], shape[3]);
                let td = t * dh;
                let h = hkv * group;
                let gx = gbuf(grads, nodes, *x);
                for bi in 0..b {
                    for hi in 0..h {
                        let dst = (bi * hkv + hi / group) * td;
                        let src = (bi * h + hi) * td;
                        axpy(1.0, &g[src..src + td], &mut gx[dst..dst + td]);
                    }
                }
            }
        }
        Op::Rope { x, theta } => {
            if nodes[x.0].needs_grad {
                let shape = &nodes[x.0].value.shape;
                let dh = shape[shape.len() - 1];
                let t = shape[shape.len() - 2];
                let heads = nodes[x.0].value.numel() / (t * dh);
                let tab = rope_table(t, dh, *theta);
                let gx = gbuf(grads, nodes, *x);
                // Transpose of a rotation is the rotation by the negative angle.
                for hd in 0..heads {
                    for ti in 0..t {
                        let off = (hd * t + ti) * dh;
                        for p in 0..dh / 2 {
                            let (c, s) = tab[ti * (dh / 2) + p];
                            let (g0, g1) = (g[off + 2 * p], g[off + 2 * p + 1]);
                            gx[off + 2 * p] += g0 * c + g1 * s;
                            gx[off + 2 * p + 1] += -g0 * s + g1 * c;
                        }
                    }
                }
            }
        }
        Op::RouteMix { w, bufs } => {
            let w = *w;
            let shape = nodes[bufs[0].0].value.shape.clone();
            let (b, h, t, dh) = (shape[0], shape[1], shape[2], shape[3]);
            let (td, cols) = (t * dh, bufs.len() * h);
            if nodes[w.0].needs_grad {
                let mut gw = vec![0.0f32; h * cols];
                for (s, &bf) in bufs.iter().enumerate() {
                    let vb = &nodes[bf.0].value.data;
                    for bi in 0..b {
                        for hi in 0..h {
                            let go = &g[(bi * h + hi) * td..(bi * h + hi + 1) * td];
                            for j in 0..h {
                                gw[hi * cols + s * h + j] +=
                                    dot(go, &vb[(bi * h + j) * td..(bi * h + j + 1) * td]);
                            }
                        }
                    }
                }
                let gws = gbuf(grads, nodes, w);
                axpy(1.0, &gw, gws);
            }
            let vw = &nodes[w.0].value.data;
            for (s, &bf) in bufs.iter().enumerate() {
                if !nodes[bf.0].needs_grad {
                    continue;
                }
                let gb = gbuf(grads, nodes, bf);
                for bi in 0..b {
                    for hi in 0..h {
                        let go = &g[(bi * h + hi) * td..(bi * h + hi + 1) * td];
                        for j in 0..h {
                            axpy(
                                vw[hi * cols + s * h + j],
                                go,
                                &mut gb[(bi * h + j) * td..(bi * h + j + 1) * td],
                            );
                        }
                    }
                }
            }
        }
        Op::CrossEntropyMean { logits, targets, ignore, lse, count } => {
            if nodes[logits.0].needs_grad {
                let (logits, ignore, count) = (*logits, *ignore, *count);
                let vl = &nodes[logits.0].value;
                let (n, vsize) = (vl.shape[0], vl.shape[1]);
                let gscale = g[0] / count as f32;
                let gl = gbuf(grads, nodes, logits);
                for r in 0..n {
                    if targets[r] == ignore {
                        continue;
                    }
                    let row = &vl.data[r * vsize..(r + 1) * vsize];
                    let l = lse[r];
                    let grow = &mut gl[r * vsize..(r + 1) * vsize];
                    for j in 0..vsize {
                        grow[j] += (row[j] - l).exp() * gscale;
                    }
                    grow[targets[r] as usize] -= gscale;
                }
            }
        }
        Op::SumAll(x) => {
            if nodes[x.0].needs_grad {
                let gx = gbuf(grads, nodes, *x);
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
        }
    }
}
