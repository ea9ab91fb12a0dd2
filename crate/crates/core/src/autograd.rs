//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! topological order, so the backward sweep is a single reverse iteration.
//! Shape errors inside the graph are programmer errors and panic; public model
//! entry points validate user input before building a graph.

use std::sync::Arc;

use crate::tensor::{col2im, gemm, im2col, ConvGeom, MatView, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    NchwToRows(Var, [usize; 4]),
    RowsToNchw(Var, [usize; 4]),
    Upsample2x(Var, [usize; 4]),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
        cols: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    MaskedXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Drops every node created after the first `len`; variables pointing
    /// past `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).numel(),
            self.value(b).numel(),
            "{what}: operand sizes differ ({:?} vs {:?})",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub");
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= y;
        }
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul");
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= y;
        }
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v += s);
        let ng = self.ng(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `x: [rows, cols] + b: [cols]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (_, cols) = self.value(x).rows_cols();
        assert_eq!(self.value(b).numel(), cols, "add_row_bias: bias width");
        let mut out = self.value(x).clone();
        let bias = self.nodes[b.0].value.data().to_vec();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::AddRowBias(x, b), ng)
    }

    /// `a: [m, k] · b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).rows_cols();
        let (k2, n) = self.value(b).rows_cols();
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            MatView::row_major(0, k),
            self.value(b).data(),
            MatView::row_major(0, n),
            0.0,
            &mut out,
            MatView::row_major(0, n),
        );
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMul(a, b), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let ng = self.ng(&[a]);
        self.push(out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(
            a,
            move |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, |v| gelu(v).0, Op::Gelu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape).expect("reshape");
        let ng = self.ng(&[a]);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Stacks `[r_i, c]` blocks vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let cols = self.value(parts[0]).rows_cols().1;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows_cols().1, cols, "concat_rows: width mismatch");
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let ng = self.ng(parts);
        self.push(
            Tensor::new(&[rows, cols], data).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    /// Selects rows of `table: [r, c]` (embedding lookup / row slicing).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let (r, c) = self.value(table).rows_cols();
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            assert!(i < r, "gather_rows: row {i} out of {r}");
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[table]);
        self.push(
            Tensor::new(&[rows.len(), c], data).unwrap(),
            Op::Gather(table, rows.to_vec()),
            ng,
        )
    }

    /// `[b, c, h, w]` → `[b·h·w, c]` (one row per spatial location).
    pub fn nchw_to_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 4, "nchw_to_rows expects 4-D input");
        let dims = [s[0], s[1], s[2], s[3]];
        let [b, c, h, w] = dims;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..h * w {
                    out[(bi * h * w + p) * c + ci] = src[(bi * c + ci) * h * w + p];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(&[b * h * w, c], out).unwrap(),
            Op::NchwToRows(x, dims),
            ng,
        )
    }

    /// Inverse of [`Graph::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, x: Var, dims: [usize; 4]) -> Var {
        let [b, c, h, w] = dims;
        assert_eq!(self.value(x).numel(), b * c * h * w, "rows_to_nchw size");
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..h * w {
                    out[(bi * c + ci) * h * w + p] = src[(bi * h * w + p) * c + ci];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(&dims, out).unwrap(),
            Op::RowsToNchw(x, dims),
            ng,
        )
    }

    /// Nearest-neighbour 2× spatial upsampling of `[b, c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let dims = [s[0], s[1], s[2], s[3]];
        let [b, c, h, w] = dims;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(plane * oh + y) * ow + xx] = src[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(&[b, c, oh, ow], out).unwrap(),
            Op::Upsample2x(x, dims),
            ng,
        )
    }

    /// 2-D convolution. `x: [b, cin, h, w]`, `w: [cout, cin, k, k]`, `bias: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be 4-D");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-D");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (batch, cout) = (xs[0], ws[0]);
        let geom = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            k: ws[2],
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let n = oh * ow;
        let rows = geom.col_rows();
        let in_sz = geom.cin * geom.h * geom.w;
        let mut cols = vec![0.0; batch * rows * n];
        let mut out = vec![0.0; batch * cout * n];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(bias).data();
        for bi in 0..batch {
            let c = &mut cols[bi * rows * n..(bi + 1) * rows * n];
            im2col(&xd[bi * in_sz..(bi + 1) * in_sz], &geom, c);
            let o = &mut out[bi * cout * n..(bi + 1) * cout * n];
            for (co, chunk) in o.chunks_mut(n).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bd[co]);
            }
            gemm(
                cout,
                rows,
                n,
                wd,
                MatView::row_major(0, rows),
                c,
                MatView::row_major(0, n),
                1.0,
                o,
                MatView::row_major(0, n),
            );
        }
        let ng = self.ng(&[x, w, bias]);
        self.push(
            Tensor::new(&[batch, cout, oh, ow], out).unwrap(),
            Op::Conv2d {
                x,
                w,
                b: bias,
                geom,
                batch,
                cols,
            },
            ng,
        )
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (rows, cols) = self.value(x).rows_cols();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gd[c] + bd[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::new(&shape, out).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of length `seq`. `q`, `k`, `v` are `[batch·seq, c]` with the
    /// heads laid side by side along `c`. `mask[i·seq + j]` permits query `i`
    /// to attend key `j`; blocked scores are treated as −∞.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        mask: &Arc<Vec<bool>>,
    ) -> Var {
        let (rows, c) = self.value(q).rows_cols();
        assert_eq!(rows, batch * seq, "attention rows");
        assert_eq!(c % heads, 0, "attention width not divisible by heads");
        assert_eq!(mask.len(), seq * seq, "attention mask size");
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * c];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * c + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(
                    seq,
                    dh,
                    seq,
                    qd,
                    MatView::row_major(off, c),
                    kd,
                    MatView::row_major(off, c).transposed(),
                    0.0,
                    p,
                    MatView::row_major(0, seq),
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let allowed = &mask[i * seq..(i + 1) * seq];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if allowed[j] {
                            row[j] *= scale;
                            mx = mx.max(row[j]);
                        }
                    }
                    assert!(mx > f64::NEG_INFINITY, "attention row {i} fully masked");
                    let mut z = 0.0;
                    for j in 0..seq {
                        if allowed[j] {
                            row[j] = (row[j] - mx).exp();
                            z += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    row.iter_mut().for_each(|v| *v /= z);
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    p,
                    MatView::row_major(0, seq),
                    vd,
                    MatView::row_major(off, c),
                    0.0,
                    &mut out,
                    MatView::row_major(off, c),
                );
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(
            Tensor::new(&[rows, c], out).unwrap(),
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Weighted cross-entropy over rows of `logits: [r, m]` restricted to the
    /// entries where `allowed[r·m + k]` holds. Returns `Σ_r w_r · −ln p_r(t_r)`.
    /// Rows with zero weight are skipped entirely.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        allowed: &[bool],
        targets: &[usize],
        weights: &[f64],
    ) -> Var {
        let (rows, m) = self.value(logits).rows_cols();
        assert_eq!(allowed.len(), rows * m, "masked_cross_entropy mask size");
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; rows * m];
        let mut total = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            assert!(allowed[r * m + t], "target {t} of row {r} is masked out");
            let row = &ld[r * m..(r + 1) * m];
            let al = &allowed[r * m..(r + 1) * m];
            let mx = (0..m)
                .filter(|&k| al[k])
                .map(|k| row[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..m).filter(|&k| al[k]).map(|k| (row[k] - mx).exp()).sum();
            let lse = mx + z.ln();
            for k in 0..m {
                if al[k] {
                    probs[r * m + k] = (row[k] - lse).exp();
                }
            }
            total += weights[r] * (lse - row[t]);
        }
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(total),
            Op::MaskedXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Backpropagates from a scalar output with seed gradient 1.
    pub fn backward(&self, out: Var) -> Grads {
        let seed = Tensor::full(self.shape(out), 1.0);
        self.backward_with(out, seed)
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Grads {
        assert_eq!(seed.numel(), self.value(out).numel(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v), data).unwrap()
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], self.like(v, gd.to_vec()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], self.like(*a, gd.to_vec()));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.like(*b, gd.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(bd).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], self.like(*a, d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(ad).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], self.like(*b, d));
                }
            }
            Op::Scale(a, s) => {
                accumulate(&mut grads[a.0], self.like(*a, gd.iter().map(|v| v * s).collect()));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(&mut grads[a.0], self.like(*a, gd.to_vec()));
            }
            Op::AddRowBias(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], self.like(*x, gd.to_vec()));
                }
                if self.wants(*b) {
                    let cols = self.value(*b).numel();
                    let mut db = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[b.0], self.like(*b, db));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).rows_cols();
                let n = self.value(*b).rows_cols().1;
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        gd,
                        MatView::row_major(0, n),
                        self.value(*b).data(),
                        MatView::row_major(0, n).transposed(),
                        0.0,
                        &mut da,
                        MatView::row_major(0, k),
                    );
                    accumulate(&mut grads[a.0], self.like(*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        MatView::row_major(0, k).transposed(),
                        gd,
                        MatView::row_major(0, n),
                        0.0,
                        &mut db,
                        MatView::row_major(0, n),
                    );
                    accumulate(&mut grads[b.0], self.like(*b, db));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], self.like(*a, d));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, v)| if *v > 0.0 { *g } else { g * slope })
                    .collect();
                accumulate(&mut grads[a.0], self.like(*a, d));
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, v)| g * gelu(*v).1).collect();
                accumulate(&mut grads[a.0], self.like(*a, d));
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, v)| {
                        if *v > 0.0 {
                            *g
                        } else if *v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(&mut grads[a.0], self.like(*a, d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(&mut grads[a.0], self.like(*a, vec![gd[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                accumulate(&mut grads[a.0], self.like(*a, vec![gd[0] / n as f64; n]));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        accumulate(&mut grads[p.0], self.like(p, gd[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::Gather(table, rows) => {
                let c = self.value(*table).rows_cols().1;
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dt[r * c + j] += gd[i * c + j];
                    }
                }
                accumulate(&mut grads[table.0], self.like(*table, dt));
            }
            Op::NchwToRows(x, [b, c, h, w]) => {
                let mut dx = vec![0.0; gd.len()];
                for bi in 0..*b {
                    for ci in 0..*c {
                        for p in 0..h * w {
                            dx[(bi * c + ci) * h * w + p] = gd[(bi * h * w + p) * c + ci];
                        }
                    }
                }
                accumulate(&mut grads[x.0], self.like(*x, dx));
            }
            Op::RowsToNchw(x, [b, c, h, w]) => {
                let mut dx = vec![0.0; gd.len()];
                for bi in 0..*b {
                    for ci in 0..*c {
                        for p in 0..h * w {
                            dx[(bi * h * w + p) * c + ci] = gd[(bi * c + ci) * h * w + p];
                        }
                    }
                }
                accumulate(&mut grads[x.0], self.like(*x, dx));
            }
            Op::Upsample2x(x, [b, c, h, w]) => {
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; b * c * h * w];
                for plane in 0..b * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[(plane * h + y / 2) * w + xx / 2] += gd[(plane * oh + y) * ow + xx];
                        }
                    }
                }
                accumulate(&mut grads[x.0], self.like(*x, dx));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cols,
            } => {
                let cout = self.shape(*w)[0];
                let (oh, ow) = geom.out_hw();
                let n = oh * ow;
                let rows = geom.col_rows();
                let in_sz = geom.cin * geom.h * geom.w;
                let wd = self.value(*w).data();
                let mut dw = vec![0.0; cout * rows];
                let mut db = vec![0.0; cout];
                let mut dx = vec![0.0; batch * in_sz];
                let mut dcols = vec![0.0; rows * n];
                for bi in 0..*batch {
                    let gb = &gd[bi * cout * n..(bi + 1) * cout * n];
                    let cb = &cols[bi * rows * n..(bi + 1) * rows * n];
                    if self.wants(*w) {
                        gemm(
                            cout,
                            n,
                            rows,
                            gb,
                            MatView::row_major(0, n),
                            cb,
                            MatView::row_major(0, n).transposed(),
                            1.0,
                            &mut dw,
                            MatView::row_major(0, rows),
                        );
                    }
                    if self.wants(*b) {
                        for (co, chunk) in gb.chunks(n).enumerate() {
                            db[co] += chunk.iter().sum::<f64>();
                        }
                    }
                    if self.wants(*x) {
                        gemm(
                            rows,
                            cout,
                            n,
                            wd,
                            MatView::row_major(0, rows).transposed(),
                            gb,
                            MatView::row_major(0, n),
                            0.0,
                            &mut dcols,
                            MatView::row_major(0, n),
                        );
                        col2im(&dcols, geom, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
                    }
                }
                if self.wants(*w) {
                    accumulate(&mut grads[w.0], self.like(*w, dw));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.like(*b, db));
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], self.like(*x, dx));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = self.value(*x).rows_cols();
                let gam = self.value(*gamma).data();
                let mut dg = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let go = &gd[r * cols..(r + 1) * cols];
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        dg[c] += go[c] * xh[c];
                        dbeta[c] += go[c];
                        let d = go[c] * gam[c];
                        mean_d += d;
                        mean_dx += d * xh[c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        let d = go[c] * gam[c];
                        dx[r * cols + c] = rstd[r] * (d - mean_d - xh[c] * mean_dx);
                    }
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], self.like(*x, dx));
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], self.like(*gamma, dg));
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], self.like(*beta, dbeta));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (rows, c) = self.value(*q).rows_cols();
                let dh = c / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; rows * c];
                let mut dk = vec![0.0; rows * c];
                let mut dv = vec![0.0; rows * c];
                let mut dp = vec![0.0; seq * seq];
                for b in 0..*batch {
                    for h in 0..*heads {
                        let off = b * seq * c + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let om = MatView::row_major(off, c);
                        let sq = MatView::row_major(0, *seq);
                        // dV = Pᵀ dO
                        gemm(*seq, *seq, dh, p, sq.transposed(), gd, om, 1.0, &mut dv, om);
                        // dP = dO Vᵀ
                        gemm(*seq, dh, *seq, gd, om, vd, om.transposed(), 0.0, &mut dp, sq);
                        for i in 0..*seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..*seq {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        // dQ = dS K, dK = dSᵀ Q
                        gemm(*seq, *seq, dh, &dp, sq, kd, om, 1.0, &mut dq, om);
                        gemm(*seq, *seq, dh, &dp, sq.transposed(), qd, om, 1.0, &mut dk, om);
                    }
                }
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if self.wants(*var) {
                        accumulate(&mut grads[var.0], self.like(*var, d));
                    }
                }
            }
            Op::MaskedXent {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (rows, m) = self.value(*logits).rows_cols();
                let mut dl = vec![0.0; rows * m];
                for r in 0..rows {
                    let w = weights[r];
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..m {
                        dl[r * m + k] = gd[0] * w * probs[r * m + k];
                    }
                    dl[r * m + targets[r]] -= gd[0] * w;
                }
                accumulate(&mut grads[logits.0], self.like(*logits, dl));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `f` w.r.t. the leaf built from `x0`.
    fn check(x0: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads.get(x).unwrap().clone();
        let eps = 1e-6;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut t = x0.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.param(t);
                let o = build(&mut g, x);
                g.value(o).item()
            };
            let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - num).abs() / (a.abs() + num.abs()).max(1e-8);
            assert!(err < 1e-5 || (a - num).abs() < 1e-9, "elem {i}: analytic {a} vs numeric {num}");
        }
    }

    fn seq_tensor(shape: &[usize], phase: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.731 + phase).sin()).collect()).unwrap()
    }

    #[test]
    fn matmul_bias_gelu_grad() {
        let w = seq_tensor(&[3, 4], 0.3);
        let b = seq_tensor(&[4], 1.1);
        check(seq_tensor(&[2, 3], 0.0), |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let y = g.matmul(x, w);
            let y = g.add_row_bias(y, b);
            let y = g.gelu(y);
            g.sum(y)
        });
        let x = seq_tensor(&[2, 3], 0.0);
        check(w.clone(), |g, w| {
            let x = g.constant(x.clone());
            let y = g.matmul(x, w);
            let y = g.leaky_relu(y, 0.2);
            let y2 = g.mul(y, y);
            g.mean(y2)
        });
    }

    #[test]
    fn conv_and_upsample_grad() {
        let w = seq_tensor(&[3, 2, 3, 3], 0.5);
        let b = seq_tensor(&[3], 0.9);
        check(seq_tensor(&[2, 2, 5, 4], 0.0), |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let y = g.conv2d(x, w, b, 2, 1);
            let y = g.upsample2x(y);
            let y = g.nchw_to_rows(y);
            let y = g.gelu(y);
            g.sum(y)
        });
        let x = seq_tensor(&[2, 2, 5, 4], 0.0);
        check(w.clone(), |g, w| {
            let x = g.constant(x.clone());
            let b = g.constant(b.clone());
            let y = g.conv2d(x, w, b, 1, 1);
            let y = g.gelu(y);
            g.sum(y)
        });
    }

    #[test]
    fn layer_norm_grad() {
        let gam = seq_tensor(&[5], 0.2);
        let bet = seq_tensor(&[5], 0.7);
        check(seq_tensor(&[3, 5], 0.0), |g, x| {
            let gm = g.constant(gam.clone());
            let bt = g.constant(bet.clone());
            let y = g.layer_norm(x, gm, bt);
            let y = g.gelu(y);
            g.sum(y)
        });
    }

    #[test]
    fn attention_grad_for_each_input() {
        let (batch, seq, heads, c) = (2, 4, 2, 6);
        let mask: Vec<bool> = (0..seq * seq).map(|i| i % seq <= i / seq).collect();
        let mask = Arc::new(mask);
        let base = [
            seq_tensor(&[batch * seq, c], 0.0),
            seq_tensor(&[batch * seq, c], 1.0),
            seq_tensor(&[batch * seq, c], 2.0),
        ];
        for which in 0..3 {
            let base = base.clone();
            let mask = mask.clone();
            check(base[which].clone(), move |g, x| {
                let vars: Vec<Var> = (0..3)
                    .map(|i| if i == which { x } else { g.constant(base[i].clone()) })
                    .collect();
                let y = g.attention(vars[0], vars[1], vars[2], batch, seq, heads, &mask);
                let y = g.gelu(y);
                g.sum(y)
            });
        }
    }

    #[test]
    fn masked_cross_entropy_grad_and_value() {
        let allowed = vec![true, false, true, false, true, true, true, true];
        let targets = [2, 1];
        let weights = [1.5, 0.5];
        check(seq_tensor(&[2, 4], 0.0), |g, x| {
            g.masked_cross_entropy(x, &allowed, &targets, &weights)
        });
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l = g.masked_cross_entropy(x, &allowed[..4], &[2], &[1.0]);
        let want = -(3f64.exp() / (1f64.exp() + 3f64.exp())).ln();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn gather_concat_abs_grad() {
        check(seq_tensor(&[4, 3], 0.4), |g, x| {
            let a = g.gather_rows(x, &[3, 0, 3]);
            let b = g.gather_rows(x, &[1]);
            let c = g.concat_rows(&[a, b]);
            let c = g.abs(c);
            let c = g.scale(c, 0.5);
            g.sum(c)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }
}
