//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! Every operation appends a node holding its value and enough context to
//! run its adjoint. [`Tape::backward`] walks the nodes in reverse order and
//! accumulates gradients. Operations are coarse (matrix products, layer
//! norm, masked softmax, the alignment loss) so a transformer forward pass
//! stays at a few hundred nodes.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive logit applied to masked attention keys.
pub const MASKED_LOGIT: f64 = -1e9;

/// Handle to a node recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Softmax(usize),
    NormalizeRows {
        x: usize,
        denom: Vec<f64>,
    },
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    WeightedSum(Vec<(usize, f64)>),
    SumSquares(usize),
    /// Scalar node whose gradient with respect to `input` was computed
    /// during the forward pass.
    Precomputed { input: usize, grad: Mat },
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of the tape.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(Option::take)
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

pub fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

/// Row-wise numerically stable softmax. `key_mask[j] == false` adds
/// [`MASKED_LOGIT`] to column `j` before normalization.
pub fn softmax_rows(x: &Mat, key_mask: Option<&[bool]>) -> Mat {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        if let Some(mask) = key_mask {
            for (v, &keep) in row.iter_mut().zip(mask) {
                if !keep {
                    *v += MASKED_LOGIT;
                }
            }
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        v.idx
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[self.idx(v)].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value);
        self.push(v, Op::MatMul(ia, ib))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.nodes[ia].value.matmul_t(&self.nodes[ib].value);
        self.push(v, Op::MatMulT(ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let mut v = self.nodes[ia].value.clone();
        v.add_assign(&self.nodes[ib].value);
        self.push(v, Op::Add(ia, ib))
    }

    /// Adds the `1 × cols` matrix `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ia, ir) = (self.idx(a), self.idx(row));
        let r = &self.nodes[ir].value;
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.nodes[ia].value.cols(), "add_row width mismatch");
        let mut v = self.nodes[ia].value.clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(ia, ir))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(|x| x * c);
        self.push(v, Op::Scale(ia, c))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(gelu);
        self.push(v, Op::Gelu(ia))
    }

    /// Per-row layer normalization with learned `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (ix, ig, ib) = (self.idx(x), self.idx(gain), self.idx(bias));
        let xv = &self.nodes[ix].value;
        let g = self.nodes[ig].value.as_slice();
        let b = self.nodes[ib].value.as_slice();
        let cols = xv.cols();
        let mut xhat = Mat::zeros(xv.rows(), cols);
        let mut out = Mat::zeros(xv.rows(), cols);
        let mut rstd = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for j in 0..cols {
                let h = (row[j] - mean) * r;
                xhat[(i, j)] = h;
                out[(i, j)] = h * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                xhat,
                rstd,
            },
        )
    }

    /// Row-wise softmax; masked columns receive zero probability.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let ia = self.idx(a);
        let v = softmax_rows(&self.nodes[ia].value, key_mask);
        self.push(v, Op::Softmax(ia))
    }

    /// `x_i / max(‖x_i‖, eps)` for every row.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let ix = self.idx(x);
        let xv = &self.nodes[ix].value;
        let mut out = xv.clone();
        let mut denom = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let n = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            denom.push(n);
            for v in out.row_mut(i) {
                *v /= n;
            }
        }
        self.push(out, Op::NormalizeRows { x: ix, denom })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.slice_rows(start, len);
        self.push(v, Op::SliceRows(ia, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.slice_cols(start, len);
        self.push(v, Op::SliceCols(ia, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let mats: Vec<&Mat> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let v = Mat::concat_rows(&mats);
        self.push(v, Op::ConcatRows(idx))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let mats: Vec<&Mat> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let v = Mat::concat_cols(&mats);
        self.push(v, Op::ConcatCols(idx))
    }

    /// `Σ w_i · s_i` over `1 × 1` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        let mut idx = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            let i = self.idx(v);
            assert_eq!(self.nodes[i].value.shape(), (1, 1), "weighted_sum expects scalars");
            total += w * self.nodes[i].value[(0, 0)];
            idx.push((i, w));
        }
        self.push(Mat::filled(1, 1, total), Op::WeightedSum(idx))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let s = self.nodes[ia].value.sum_sq();
        self.push(Mat::filled(1, 1, s), Op::SumSquares(ia))
    }

    /// Records a scalar `value` whose gradient with respect to `input` is
    /// already known.
    pub(crate) fn precomputed_scalar(&mut self, input: Var, value: f64, grad: Mat) -> Var {
        let ii = self.idx(input);
        assert_eq!(grad.shape(), self.nodes[ii].value.shape());
        self.push(Mat::filled(1, 1, value), Op::Precomputed { input: ii, grad })
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Contract(
                "loss variable was not recorded on this tape".into(),
            ));
        }
        if self.nodes[loss.idx].value.shape() != (1, 1) {
            return Err(Error::Contract("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Mat::filled(1, 1, 1.0));

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their gradient for the caller.
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    gemm(&g, false, bv, true, 1.0, 0.0, &mut ga);
                    let mut gb = Mat::zeros(bv.rows(), bv.cols());
                    gemm(av, true, &g, false, 1.0, 0.0, &mut gb);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    gemm(&g, false, bv, false, 1.0, 0.0, &mut ga);
                    let mut gb = Mat::zeros(bv.rows(), bv.cols());
                    gemm(&g, true, av, false, 1.0, 0.0, &mut gb);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, r) => {
                    let mut gr = Mat::zeros(1, g.cols());
                    for k in 0..g.rows() {
                        for (acc, v) in gr.as_mut_slice().iter_mut().zip(g.row(k)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *r, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::Gelu(a) => {
                    let ga = self.nodes[*a].value.zip_map(&g, |x, gy| gelu_parts(x).1 * gy);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.nodes[*gain].value.as_slice();
                    let cols = g.cols();
                    let mut gg = Mat::zeros(1, cols);
                    let mut gb = Mat::zeros(1, cols);
                    let mut gx = Mat::zeros(g.rows(), cols);
                    for k in 0..g.rows() {
                        let dy = g.row(k);
                        let xh = xhat.row(k);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            gg.as_mut_slice()[j] += dy[j] * xh[j];
                            gb.as_mut_slice()[j] += dy[j];
                            let d = dy[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        let out = gx.row_mut(k);
                        for j in 0..cols {
                            let d = dy[j] * gv[j];
                            out[j] = rstd[k] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for k in 0..y.rows() {
                        let (yr, gr) = (y.row(k), g.row(k));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                        for (o, (p, d)) in ga.row_mut(k).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (d - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormalizeRows { x, denom } => {
                    let y = &node.value;
                    let xv = &self.nodes[*x].value;
                    let mut gx = Mat::zeros(y.rows(), y.cols());
                    for k in 0..y.rows() {
                        let n = denom[k];
                        let norm = xv.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (yr, gr) = (y.row(k), g.row(k));
                        let out = gx.row_mut(k);
                        if norm >= n {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..out.len() {
                                out[j] = (gr[j] - yr[j] * dot) / n;
                            }
                        } else {
                            for j in 0..out.len() {
                                out[j] = gr[j] / n;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceRows(a, start) => {
                    let av = &self.nodes[*a].value;
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    for k in 0..g.rows() {
                        ga.row_mut(start + k).copy_from_slice(g.row(k));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let av = &self.nodes[*a].value;
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    for k in 0..g.rows() {
                        ga.row_mut(k)[*start..start + g.cols()].copy_from_slice(g.row(k));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.nodes[p].value.rows();
                        accumulate(&mut grads, p, g.slice_rows(offset, r));
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.nodes[p].value.cols();
                        accumulate(&mut grads, p, g.slice_cols(offset, c));
                        offset += c;
                    }
                }
                Op::WeightedSum(terms) => {
                    let up = g[(0, 0)];
                    for &(p, w) in terms {
                        accumulate(&mut grads, p, Mat::filled(1, 1, w * up));
                    }
                }
                Op::SumSquares(a) => {
                    let up = g[(0, 0)];
                    accumulate(&mut grads, *a, self.nodes[*a].value.map(|x| 2.0 * x * up));
                }
                Op::Precomputed { input, grad } => {
                    let up = g[(0, 0)];
                    accumulate(&mut grads, *input, grad.map(|x| x * up));
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Mat>], idx: usize, g: Mat) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
