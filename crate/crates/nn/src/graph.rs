//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards visits every node after
//! all of its consumers.

use crate::gemm::{gemm, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    cout: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Silu {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    AvgPool {
        x: Var,
        ph: usize,
        pw: usize,
    },
    Upsample {
        x: Var,
        ph: usize,
        pw: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    MeanW {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    DivByExp {
        x: Var,
        log_scale: Var,
        active: bool,
        factor: f32,
    },
    SymmetricInfoNce {
        logits: Var,
        grad: Vec<f32>,
    },
    WeightedMse {
        pred: Var,
        target: Vec<f32>,
        weight: Vec<f32>,
        weight_sum: f64,
    },
    SelectRows {
        x: Var,
        alt: Var,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients aligned with the store they were computed against.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.grads[id.index()].as_deref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Recorded computation over the parameters of one [`ParamStore`].
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

fn accumulate(slot: &mut Option<Vec<f32>>, contribution: Vec<f32>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.push(value, Op::Param(id), true);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    /// `[m,k] x [k,n]`, or `[m,k] x [n,k]^T` when `trans_b`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-d");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d");
        let (m, k) = (sa[0], sa[1]);
        let (bk, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        assert_eq!(k, bk, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        {
            let av = MatRef::new(self.value(a).data(), m, k);
            let bv = if trans_b {
                MatRef::new(self.value(b).data(), n, k).t()
            } else {
                MatRef::new(self.value(b).data(), k, n)
            };
            gemm(av, bv, &mut out, 0.0);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new([m, n], out), Op::MatMul { a, b, trans_b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false)
    }

    /// Adds a vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = *self.shape(x).last().expect("rank >= 1");
        assert_eq!(self.value(bias).numel(), c, "bias length");
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for chunk in out.data_mut().chunks_exact_mut(c) {
            for (o, bv) in chunk.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddBias { x, bias }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale { x, factor }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = silu(*v));
        let ng = self.needs(x);
        self.push(out, Op::Silu { x }, ng)
    }

    /// NHWC convolution. `w` is `[kh*kw*cin, cout]` (patch-major), `b` is `[cout]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 4, "conv2d expects NHWC input");
        let (n, h, wd, cin) = (s[0], s[1], s[2], s[3]);
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        assert!(
            h + 2 * ph >= kh && wd + 2 * pw >= kw,
            "kernel larger than padded input"
        );
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (wd + 2 * pw - kw) / sw + 1;
        let ws = self.shape(w);
        assert_eq!(ws[0], kh * kw * cin, "conv weight patch size");
        let cout = ws[1];
        assert_eq!(self.value(b).numel(), cout, "conv bias length");
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            cin,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho,
            wo,
            cout,
        };

        let cols = im2col(self.value(x).data(), &geom);
        let rows = geom.rows();
        let mut out = vec![0.0; rows * cout];
        let bias = self.value(b).data();
        for r in out.chunks_exact_mut(cout) {
            r.copy_from_slice(bias);
        }
        gemm(
            MatRef::new(&cols, rows, geom.patch()),
            MatRef::new(self.value(w).data(), geom.patch(), cout),
            &mut out,
            1.0,
        );
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        let cols = if ng { cols } else { Vec::new() };
        self.push(
            Tensor::new([n, ho, wo, cout], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            ng,
        )
    }

    /// Non-overlapping average pooling over `(ph, pw)` windows.
    pub fn avg_pool(&mut self, x: Var, ph: usize, pw: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        assert!(
            h % ph == 0 && w % pw == 0,
            "pool window must tile the input"
        );
        let (ho, wo) = (h / ph, w / pw);
        let inv = 1.0 / (ph * pw) as f32;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * ho * wo * c];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((b * h + y) * w + xx) * c;
                    let dst = ((b * ho + y / ph) * wo + xx / pw) * c;
                    for ch in 0..c {
                        out[dst + ch] += xd[src + ch] * inv;
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::new([n, ho, wo, c], out),
            Op::AvgPool { x, ph, pw },
            ng,
        )
    }

    /// Nearest-neighbour upsampling by `(ph, pw)`.
    pub fn upsample(&mut self, x: Var, ph: usize, pw: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * ph, w * pw);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * ho * wo * c];
        for b in 0..n {
            for y in 0..ho {
                for xx in 0..wo {
                    let src = ((b * h + y / ph) * w + xx / pw) * c;
                    let dst = ((b * ho + y) * wo + xx) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::new([n, ho, wo, c], out),
            Op::Upsample { x, ph, pw },
            ng,
        )
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(
            sa[..sa.len() - 1],
            sb[..sb.len() - 1],
            "concat leading dims"
        );
        let ca = *sa.last().unwrap();
        let cb = *sb.last().unwrap();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let rows = ad.len() / ca.max(1);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out), Op::Concat { a, b }, ng)
    }

    /// Adds a per-sample bias `[N, Hb, C]` to an NHWC tensor, where `Hb` is
    /// either 1 (broadcast over rows) or `H` (one bias per row).
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let bs = self.shape(bias).to_vec();
        assert_eq!(bs.len(), 3, "row bias must be [N, Hb, C]");
        assert!(
            bs[0] == n && bs[2] == c && (bs[1] == 1 || bs[1] == h),
            "row bias shape"
        );
        let hb = bs[1];
        let mut out = self.value(x).clone();
        let bd = self.value(bias).data().to_vec();
        let od = out.data_mut();
        for b in 0..n {
            for y in 0..h {
                let brow = &bd[(b * hb + if hb == 1 { 0 } else { y }) * c..][..c];
                for xx in 0..w {
                    let o = ((b * h + y) * w + xx) * c;
                    for ch in 0..c {
                        od[o + ch] += brow[ch];
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddRowBias { x, bias }, ng)
    }

    /// Mean over the W axis: `[N,H,W,C] -> [N,H,C]`.
    pub fn mean_w(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let inv = 1.0 / w as f32;
        let mut out = vec![0.0; n * h * c];
        for b in 0..n {
            for y in 0..h {
                let o = (b * h + y) * c;
                for xx in 0..w {
                    let src = ((b * h + y) * w + xx) * c;
                    for ch in 0..c {
                        out[o + ch] += xd[src + ch];
                    }
                }
                out[o..o + c].iter_mut().for_each(|v| *v *= inv);
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new([n, h, c], out), Op::MeanW { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let ng = self.needs(x);
        self.push(out, Op::Reshape { x }, ng)
    }

    /// Row-wise L2 normalisation of a `[B, E]` matrix.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let e = s[1];
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(s[0]);
        for row in out.data_mut().chunks_exact_mut(e) {
            let norm = (row
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt())
            .max(1e-12);
            for v in row.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
            norms.push(norm as f32);
        }
        let ng = self.needs(x);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    /// `x / exp(clamp(s, lo, hi))` for a scalar `s`. The gradient to `s` is
    /// zero while the clamp is active.
    pub fn div_by_exp(&mut self, x: Var, log_scale: Var, lo: f32, hi: f32) -> Var {
        let s = self.value(log_scale).item();
        let clamped = s.clamp(lo, hi);
        let active = s > lo && s < hi;
        let factor = (-clamped).exp();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let ng = self.needs(x) || self.needs(log_scale);
        self.push(
            out,
            Op::DivByExp {
                x,
                log_scale,
                active,
                factor,
            },
            ng,
        )
    }

    /// Symmetric cross-entropy of a square logit matrix against the
    /// diagonal: half row-wise softmax CE plus half column-wise.
    pub fn symmetric_info_nce(&mut self, logits: Var) -> Var {
        let s = self.shape(logits).to_vec();
        assert!(s.len() == 2 && s[0] == s[1], "logits must be square");
        let (loss, grad) = symmetric_info_nce_with_grad(self.value(logits).data(), s[0]);
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss as f32),
            Op::SymmetricInfoNce { logits, grad },
            ng,
        )
    }

    /// `sum(w * (pred - target)^2) / sum(w)`.
    pub fn weighted_mse(&mut self, pred: Var, target: Vec<f32>, weight: Vec<f32>) -> Var {
        let p = self.value(pred).data();
        assert_eq!(p.len(), target.len());
        assert_eq!(p.len(), weight.len());
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for ((&pv, &tv), &wv) in p.iter().zip(&target).zip(&weight) {
            let d = (pv - tv) as f64;
            num += wv as f64 * d * d;
            den += wv as f64;
        }
        assert!(den > 0.0, "weights must have positive sum");
        let ng = self.needs(pred);
        self.push(
            Tensor::scalar((num / den) as f32),
            Op::WeightedMse {
                pred,
                target,
                weight,
                weight_sum: den,
            },
            ng,
        )
    }

    /// Replaces row `i` of `x: [B, E]` with `alt: [1, E]` where `mask[i]`.
    pub fn select_rows(&mut self, x: Var, alt: Var, mask: Vec<bool>) -> Var {
        let s = self.shape(x).to_vec();
        let e = s[1];
        assert_eq!(mask.len(), s[0]);
        assert_eq!(self.value(alt).numel(), e);
        let mut out = self.value(x).clone();
        let a = self.value(alt).data().to_vec();
        for (row, &m) in out.data_mut().chunks_exact_mut(e).zip(&mask) {
            if m {
                row.copy_from_slice(&a);
            }
        }
        let ng = self.needs(x) || self.needs(alt);
        self.push(out, Op::SelectRows { x, alt, mask }, ng)
    }

    /// Back-propagates from the scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => accumulate(&mut out.grads[id.index()], g),
                Op::MatMul { a, b, trans_b } => {
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    let k = self.shape(*a)[1];
                    let gv = MatRef::new(&g, m, n);
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        let bv = if *trans_b {
                            MatRef::new(self.value(*b).data(), n, k)
                        } else {
                            MatRef::new(self.value(*b).data(), k, n).t()
                        };
                        gemm(gv, bv, &mut da, 0.0);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.needs(*b) {
                        let av = MatRef::new(self.value(*a).data(), m, k);
                        let mut db = vec![0.0; k * n];
                        if *trans_b {
                            gemm(gv.t(), av, &mut db, 0.0);
                        } else {
                            gemm(av.t(), gv, &mut db, 0.0);
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::AddBias { x, bias } => {
                    if self.needs(*bias) {
                        let c = self.value(*bias).numel();
                        let mut db = vec![0.0; c];
                        for chunk in g.chunks_exact(c) {
                            for (d, v) in db.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads[bias.0], db);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Scale { x, factor } => {
                    let d = g.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads[x.0], d);
                }
                Op::Silu { x } => {
                    let xd = self.value(*x).data();
                    let d = g
                        .iter()
                        .zip(xd)
                        .map(|(gv, &xv)| {
                            let s = 1.0 / (1.0 + (-xv).exp());
                            gv * s * (1.0 + xv * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let rows = geom.rows();
                    let gv = MatRef::new(&g, rows, geom.cout);
                    if self.needs(*b) {
                        let mut db = vec![0.0; geom.cout];
                        for chunk in g.chunks_exact(geom.cout) {
                            for (d, v) in db.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0; geom.patch() * geom.cout];
                        gemm(MatRef::new(cols, rows, geom.patch()).t(), gv, &mut dw, 0.0);
                        accumulate(&mut grads[w.0], dw);
                    }
                    if self.needs(*x) {
                        let mut dcols = vec![0.0; rows * geom.patch()];
                        gemm(
                            gv,
                            MatRef::new(self.value(*w).data(), geom.patch(), geom.cout).t(),
                            &mut dcols,
                            0.0,
                        );
                        accumulate(&mut grads[x.0], col2im(&dcols, geom));
                    }
                }
                Op::AvgPool { x, ph, pw } => {
                    let s = self.shape(*x);
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let (ho, wo) = (h / ph, w / pw);
                    let inv = 1.0 / (ph * pw) as f32;
                    let mut d = vec![0.0; n * h * w * c];
                    for bi in 0..n {
                        for y in 0..h {
                            for xx in 0..w {
                                let dst = ((bi * h + y) * w + xx) * c;
                                let src = ((bi * ho + y / ph) * wo + xx / pw) * c;
                                for ch in 0..c {
                                    d[dst + ch] = g[src + ch] * inv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Upsample { x, ph, pw } => {
                    let s = self.shape(*x);
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let (ho, wo) = (h * ph, w * pw);
                    let mut d = vec![0.0; n * h * w * c];
                    for bi in 0..n {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let dst = ((bi * h + y / ph) * w + xx / pw) * c;
                                let src = ((bi * ho + y) * wo + xx) * c;
                                for ch in 0..c {
                                    d[dst + ch] += g[src + ch];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Concat { a, b } => {
                    let ca = *self.shape(*a).last().unwrap();
                    let cb = *self.shape(*b).last().unwrap();
                    let rows = g.len() / (ca + cb);
                    if self.needs(*a) {
                        let mut da = Vec::with_capacity(rows * ca);
                        for r in 0..rows {
                            da.extend_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.needs(*b) {
                        let mut db = Vec::with_capacity(rows * cb);
                        for r in 0..rows {
                            db.extend_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::AddRowBias { x, bias } => {
                    if self.needs(*bias) {
                        let s = self.shape(*x);
                        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                        let hb = self.shape(*bias)[1];
                        let mut db = vec![0.0; n * hb * c];
                        for bi in 0..n {
                            for y in 0..h {
                                let o = (bi * hb + if hb == 1 { 0 } else { y }) * c;
                                for xx in 0..w {
                                    let src = ((bi * h + y) * w + xx) * c;
                                    for ch in 0..c {
                                        db[o + ch] += g[src + ch];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[bias.0], db);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::MeanW { x } => {
                    let s = self.shape(*x);
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let inv = 1.0 / w as f32;
                    let mut d = vec![0.0; n * h * w * c];
                    for bi in 0..n {
                        for y in 0..h {
                            let src = (bi * h + y) * c;
                            for xx in 0..w {
                                let dst = ((bi * h + y) * w + xx) * c;
                                for ch in 0..c {
                                    d[dst + ch] = g[src + ch] * inv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Reshape { x } => accumulate(&mut grads[x.0], g),
                Op::L2Normalize { x, norms } => {
                    let e = node.value.shape()[1];
                    let y = node.value.data();
                    let mut d = vec![0.0; y.len()];
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * e..(r + 1) * e];
                        let gr = &g[r * e..(r + 1) * e];
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..e {
                            d[r * e + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::DivByExp {
                    x,
                    log_scale,
                    active,
                    factor,
                } => {
                    if self.needs(*log_scale) {
                        let ds = if *active {
                            -g.iter()
                                .zip(node.value.data())
                                .map(|(a, b)| a * b)
                                .sum::<f32>()
                        } else {
                            0.0
                        };
                        accumulate(&mut grads[log_scale.0], vec![ds]);
                    }
                    if self.needs(*x) {
                        let d = g.iter().map(|v| v * factor).collect();
                        accumulate(&mut grads[x.0], d);
                    }
                }
                Op::SymmetricInfoNce { logits, grad } => {
                    let d = grad.iter().map(|v| v * g[0]).collect();
                    accumulate(&mut grads[logits.0], d);
                }
                Op::WeightedMse {
                    pred,
                    target,
                    weight,
                    weight_sum,
                } => {
                    let p = self.value(*pred).data();
                    let scale = 2.0 * g[0] as f64 / weight_sum;
                    let d = p
                        .iter()
                        .zip(target)
                        .zip(weight)
                        .map(|((&pv, &tv), &wv)| (scale * wv as f64 * (pv - tv) as f64) as f32)
                        .collect();
                    accumulate(&mut grads[pred.0], d);
                }
                Op::SelectRows { x, alt, mask } => {
                    let e = node.value.shape()[1];
                    if self.needs(*alt) {
                        let mut da = vec![0.0; e];
                        for (row, &m) in g.chunks_exact(e).zip(mask) {
                            if m {
                                for (d, v) in da.iter_mut().zip(row) {
                                    *d += v;
                                }
                            }
                        }
                        accumulate(&mut grads[alt.0], da);
                    }
                    if self.needs(*x) {
                        let mut dx = g;
                        for (row, &m) in dx.chunks_exact_mut(e).zip(mask) {
                            if m {
                                row.iter_mut().for_each(|v| *v = 0.0);
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
            }
        }
        out
    }
}

/// Loss and its gradient w.r.t. the logits for the symmetric diagonal
/// cross-entropy over a `b x b` logit matrix.
pub fn symmetric_info_nce_with_grad(logits: &[f32], b: usize) -> (f64, Vec<f32>) {
    let l = |i: usize, j: usize| logits[i * b + j] as f64;
    let mut grad = vec![0.0f64; b * b];
    let mut row_loss = 0.0;
    let mut col_loss = 0.0;
    let half_inv_b = 0.5 / b as f64;
    for i in 0..b {
        let max = (0..b).map(|j| l(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..b).map(|j| (l(i, j) - max).exp()).sum();
        row_loss += -(l(i, i) - max - z.ln());
        for j in 0..b {
            let p = (l(i, j) - max).exp() / z;
            grad[i * b + j] += half_inv_b * (p - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..b {
        let max = (0..b).map(|i| l(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..b).map(|i| (l(i, j) - max).exp()).sum();
        col_loss += -(l(j, j) - max - z.ln());
        for i in 0..b {
            let p = (l(i, j) - max).exp() / z;
            grad[i * b + j] += half_inv_b * (p - if i == j { 1.0 } else { 0.0 });
        }
    }
    let loss = 0.5 * (row_loss + col_loss) / b as f64;
    (loss, grad.into_iter().map(|v| v as f32).collect())
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = row + (ky * g.kw + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let patch = g.patch();
    let mut x = vec![0.0; g.n * g.h * g.w * g.cin];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = row + (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            x[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}
