//! Reverse-mode differentiation over row-major f64 matrices.
//!
//! Every value on the tape is a `rows × cols` matrix. Parameters are leaves
//! that borrow their storage from the parameter set; gradients for them are
//! accumulated into a [`ParamGrads`] on [`Tape::backward`].

use std::sync::Arc;

use super::params::{ModelParams, ParamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Input,
    Param(usize),
    MatMul {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// `out[i] = mean(x[index[i*k .. (i+1)*k]])`.
    Gather {
        x: Var,
        index: Arc<Vec<u32>>,
        k: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    WindowAttention {
        qkv: Var,
        bias: Var,
        heads: usize,
        window_tokens: usize,
        rel_index: Arc<Vec<u32>>,
        probs: Vec<f64>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
}

/// `c = beta·c + a·b` where `a` is `m×k` (or its transpose stored `k×m`) and
/// `b` is `k×n` (or its transpose stored `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe exactly
    // those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(i) => &self.params.tensors[i].data,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(data.len(), rows * cols, "input buffer size");
        self.push(rows, cols, data, Op::Input)
    }

    /// Leaf for parameter `index`, viewed as `rows × cols`.
    pub fn param(&mut self, index: usize) -> Var {
        let t = &self.params.tensors[index];
        let (rows, cols) = match t.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => panic!("parameter {} has unsupported rank {other:?}", t.name),
        };
        self.push(rows, cols, Vec::new(), Op::Param(index))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (n, k) = self.shape(x);
        let (k2, m) = self.shape(w);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(x), false, self.value(w), false, &mut out, 0.0);
        self.push(n, m, out, Op::MatMul { x, w })
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(self.shape(b), (1, m), "bias shape");
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(m) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        self.push(n, m, out, Op::AddBias { x, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "add shapes");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(shape.0, shape.1, out, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (n, m) = self.shape(x);
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(n, m, out, Op::Scale { x, s })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (n, m) = self.shape(x);
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(n, m, out, Op::Gelu { x })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, m));
        assert_eq!(self.shape(beta), (1, m));
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(n * m);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * m);
        for row in self.value(x).chunks_exact(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        self.push(
            n,
            m,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Element gather with optional averaging over `k` sources per output.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<u32>>, k: usize, rows: usize, cols: usize) -> Var {
        assert!(k >= 1);
        assert_eq!(index.len(), rows * cols * k, "gather index length");
        let src = self.value(x);
        let out = if k == 1 {
            index.iter().map(|&i| src[i as usize]).collect()
        } else {
            let inv = 1.0 / k as f64;
            index
                .chunks_exact(k)
                .map(|c| c.iter().map(|&i| src[i as usize]).sum::<f64>() * inv)
                .collect()
        };
        self.push(rows, cols, out, Op::Gather { x, index, k })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, rows, "concat rows");
                self.shape(p).1
            })
            .collect();
        let cols: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        self.push(rows, cols, out, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Multi-head self-attention inside consecutive groups of `window_tokens`
    /// rows. `qkv` is `[N, 3C]`; `bias` is the `[R, heads]` relative-position
    /// table addressed by `rel_index[i*T + j]`.
    pub fn window_attention(
        &mut self,
        qkv: Var,
        bias: Var,
        heads: usize,
        window_tokens: usize,
        rel_index: Arc<Vec<u32>>,
    ) -> Var {
        let (n, c3) = self.shape(qkv);
        let c = c3 / 3;
        let t = window_tokens;
        assert_eq!(c3, 3 * c);
        assert_eq!(n % t, 0, "rows must fill whole windows");
        assert_eq!(c % heads, 0);
        assert_eq!(self.shape(bias).1, heads);
        assert_eq!(rel_index.len(), t * t);
        let hd = c / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let x = self.value(qkv);
        let table = self.value(bias);
        let mut out = vec![0.0; n * c];
        let mut probs = vec![0.0; (n / t) * heads * t * t];
        let mut scores = vec![0.0; t];
        for w in 0..n / t {
            for h in 0..heads {
                let p_base = (w * heads + h) * t * t;
                for i in 0..t {
                    let qi = &x[(w * t + i) * c3 + h * hd..][..hd];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        let kj = &x[(w * t + j) * c3 + c + h * hd..][..hd];
                        let dotp: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        let s = dotp * scale + table[rel_index[i * t + j] as usize * heads + h];
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let oi = &mut out[(w * t + i) * c + h * hd..][..hd];
                    for j in 0..t {
                        let p = scores[j] / z;
                        probs[p_base + i * t + j] = p;
                        let vj = &x[(w * t + j) * c3 + 2 * c + h * hd..][..hd];
                        for (o, v) in oi.iter_mut().zip(vj) {
                            *o += p * v;
                        }
                    }
                }
            }
        }
        self.push(
            n,
            c,
            out,
            Op::WindowAttention {
                qkv,
                bias,
                heads,
                window_tokens,
                rel_index,
                probs,
            },
        )
    }

    /// Propagates `seed` (the gradient of a scalar with respect to `out`)
    /// back to every parameter leaf.
    pub fn backward(&self, out: Var, seed: &[f64]) -> ParamGrads {
        let mut grads = ParamGrads::zeros_like(self.params);
        let mut node_grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(seed.len(), self.nodes[out.0].rows * self.nodes[out.0].cols);
        node_grads[out.0] = Some(seed.to_vec());

        for id in (0..=out.0).rev() {
            let Some(g) = node_grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if let Op::Param(pi) = self.nodes[v.0].op {
                    f(&mut grads.tensors[pi]);
                } else if !matches!(self.nodes[v.0].op, Op::Input) {
                    let len = self.nodes[v.0].rows * self.nodes[v.0].cols;
                    let buf = node_grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul { x, w } => {
                    let (n, k) = self.shape(*x);
                    let m = node.cols;
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    acc(*x, &mut |dx| gemm(n, m, k, &g, false, wv, true, dx, 1.0));
                    acc(*w, &mut |dw| gemm(k, n, m, xv, true, &g, false, dw, 1.0));
                }
                Op::AddBias { x, b } => {
                    acc(*x, &mut |dx| dx.iter_mut().zip(&g).for_each(|(d, v)| *d += v));
                    let m = node.cols;
                    acc(*b, &mut |db| {
                        for row in g.chunks_exact(m) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    });
                }
                Op::Add { a, b } => {
                    acc(*a, &mut |da| da.iter_mut().zip(&g).for_each(|(d, v)| *d += v));
                    acc(*b, &mut |db| db.iter_mut().zip(&g).for_each(|(d, v)| *d += v));
                }
                Op::Scale { x, s } => {
                    acc(*x, &mut |dx| dx.iter_mut().zip(&g).for_each(|(d, v)| *d += s * v));
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    acc(*x, &mut |dx| {
                        for ((d, v), xi) in dx.iter_mut().zip(&g).zip(xv) {
                            *d += v * gelu_grad(*xi);
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let m = node.cols;
                    let gv = self.value(*gamma);
                    acc(*gamma, &mut |dg| {
                        for (row_g, row_x) in g.chunks_exact(m).zip(xhat.chunks_exact(m)) {
                            for j in 0..m {
                                dg[j] += row_g[j] * row_x[j];
                            }
                        }
                    });
                    acc(*beta, &mut |db| {
                        for row_g in g.chunks_exact(m) {
                            db.iter_mut().zip(row_g).for_each(|(d, v)| *d += v);
                        }
                    });
                    acc(*x, &mut |dx| {
                        let mut dxhat = vec![0.0; m];
                        for (r, ((row_g, row_x), row_dx)) in g
                            .chunks_exact(m)
                            .zip(xhat.chunks_exact(m))
                            .zip(dx.chunks_exact_mut(m))
                            .enumerate()
                        {
                            let mut sum = 0.0;
                            let mut sum_x = 0.0;
                            for j in 0..m {
                                dxhat[j] = row_g[j] * gv[j];
                                sum += dxhat[j];
                                sum_x += dxhat[j] * row_x[j];
                            }
                            let f = inv_std[r] / m as f64;
                            for j in 0..m {
                                row_dx[j] += f * (m as f64 * dxhat[j] - sum - row_x[j] * sum_x);
                            }
                        }
                    });
                }
                Op::Gather { x, index, k } => {
                    let inv = 1.0 / *k as f64;
                    acc(*x, &mut |dx| {
                        if *k == 1 {
                            for (gi, &src) in g.iter().zip(index.iter()) {
                                dx[src as usize] += gi;
                            }
                        } else {
                            for (gi, srcs) in g.iter().zip(index.chunks_exact(*k)) {
                                for &src in srcs {
                                    dx[src as usize] += gi * inv;
                                }
                            }
                        }
                    });
                }
                Op::ConcatCols { parts } => {
                    let total = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(p, &mut |dp| {
                            for (row_dp, row_g) in dp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                                for (d, v) in row_dp.iter_mut().zip(&row_g[offset..offset + w]) {
                                    *d += v;
                                }
                            }
                        });
                        offset += w;
                    }
                }
                Op::WindowAttention {
                    qkv,
                    bias,
                    heads,
                    window_tokens,
                    rel_index,
                    probs,
                } => {
                    let (heads, t) = (*heads, *window_tokens);
                    let n = node.rows;
                    let c = node.cols;
                    let c3 = 3 * c;
                    let hd = c / heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let x = self.value(*qkv);
                    let mut dx = vec![0.0; n * c3];
                    let mut dtable = vec![0.0; self.shape(*bias).0 * heads];
                    let mut dp = vec![0.0; t];
                    for w in 0..n / t {
                        for h in 0..heads {
                            let p_base = (w * heads + h) * t * t;
                            for i in 0..t {
                                let gi = &g[(w * t + i) * c + h * hd..][..hd];
                                let pi = &probs[p_base + i * t..][..t];
                                let mut dot_pp = 0.0;
                                for j in 0..t {
                                    let row_v = (w * t + j) * c3 + 2 * c + h * hd;
                                    let vj = &x[row_v..row_v + hd];
                                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                    dot_pp += pi[j] * dp[j];
                                    for (d, gg) in dx[row_v..row_v + hd].iter_mut().zip(gi) {
                                        *d += pi[j] * gg;
                                    }
                                }
                                let row_q = (w * t + i) * c3 + h * hd;
                                for j in 0..t {
                                    let ds = pi[j] * (dp[j] - dot_pp);
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    dtable[rel_index[i * t + j] as usize * heads + h] += ds;
                                    let row_k = (w * t + j) * c3 + c + h * hd;
                                    for e in 0..hd {
                                        dx[row_q + e] += ds * scale * x[row_k + e];
                                        dx[row_k + e] += ds * scale * x[row_q + e];
                                    }
                                }
                            }
                        }
                    }
                    acc(*qkv, &mut |d| d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                    acc(*bias, &mut |d| d.iter_mut().zip(&dtable).for_each(|(a, b)| *a += b));
                }
            }
        }
        grads
    }
}
