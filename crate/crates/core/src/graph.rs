//! Tape-based reverse-mode automatic differentiation over tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding the
//! result tensor plus enough information to run the adjoint. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients with respect to every
//! leaf. The op set is exactly what the moment-propagation network needs:
//! elementwise arithmetic, a few special functions, matmul, stride-1
//! convolution, gather/scatter for pooling windows, grouped weighted sums for
//! attention, and row softmax.
//!
//! Tapes created with [`Tape::inference`] evaluate the same graph without
//! recording parents, for cheap forward-only passes.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{self, Padding, Tensor};

/// Elementwise epsilon used before square roots and logarithms of variances.
pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    Erf(usize),
    Sigmoid(usize),
    Softplus(usize),
    MaxFloor(usize, f64),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        k: usize,
        pad: Padding,
    },
    /// `(R,C) + (C,)` broadcast over rows.
    AddCols {
        x: usize,
        b: usize,
    },
    /// `(R,C) * (C,)` broadcast over rows.
    ScaleCols {
        x: usize,
        s: usize,
    },
    /// Whole tensor times a rank-1 scalar variable.
    ScaleByScalar {
        x: usize,
        s: usize,
    },
    /// `x:(G,T,C), w:(G,T) -> (G,C)`, out[g,c] = sum_t w[g,t] x[g,t,c].
    WeightedSumGroups {
        x: usize,
        w: usize,
    },
    /// `(H,W,C) -> (C,)` mean over the spatial grid.
    SpatialMean(usize),
    SoftmaxRows(usize),
    /// out[i] = x[idx[i]]; an index of `usize::MAX` reads 0.0 (zero padding).
    Gather {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    Concat(Vec<usize>),
    /// Per-element choice between two tensors, mask fixed at trace time.
    Select {
        mask: Rc<Vec<bool>>,
        a: usize,
        b: usize,
    },
    /// Rank-1 scalar broadcast to `(n,)`.
    ExpandScalar {
        x: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Recording arena for one forward/backward pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a tensor on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

/// Gradients produced by [`Tape::backward`], queried per leaf.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient w.r.t. `v`, zeros if the loss did not depend on it.
    pub fn wrt(&self, v: &Var) -> Tensor {
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.shape()),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records the graph for backpropagation.
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grad_enabled: true,
            })),
        }
    }

    /// A tape that only evaluates; `backward` is not available.
    pub fn inference() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grad_enabled: false,
            })),
        }
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding a single scalar.
    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        let op = if inner.grad_enabled { op } else { Op::Leaf };
        inner.nodes.push(Node { value, op });
        Var {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    fn value_of(&self, idx: usize) -> Tensor {
        self.inner.borrow().nodes[idx].value.clone()
    }

    fn with_value<R>(&self, idx: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[idx].value)
    }

    /// Reverse pass from a scalar output. Returns a gradient per node; query
    /// with [`Grads::wrt`].
    pub fn backward(&self, output: &Var) -> Grads {
        let inner = self.inner.borrow();
        assert!(inner.grad_enabled, "backward on an inference tape");
        assert_eq!(
            inner.nodes[output.idx].value.numel(),
            1,
            "backward needs a scalar output"
        );
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[output.idx] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &inner.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let av = &inner.nodes[*a].value;
                    let bv = &inner.nodes[*b].value;
                    accumulate(&mut grads, *a, g.zip(bv, |gv, b| gv * b));
                    accumulate(&mut grads, *b, g.zip(av, |gv, a| gv * a));
                }
                Op::Div(a, b) => {
                    let av = &inner.nodes[*a].value;
                    let bv = &inner.nodes[*b].value;
                    accumulate(&mut grads, *a, g.zip(bv, |gv, b| gv / b));
                    let gb = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(av.data().iter().zip(bv.data()))
                            .map(|(&gv, (&a, &b))| -gv * a / (b * b))
                            .collect(),
                    );
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MulScalar(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::Sqrt(a) => {
                    let yv = &node.value;
                    accumulate(&mut grads, *a, g.zip(yv, |gv, y| gv / (2.0 * y)));
                }
                Op::Exp(a) => {
                    let yv = &node.value;
                    accumulate(&mut grads, *a, g.zip(yv, |gv, y| gv * y));
                }
                Op::Ln(a) => {
                    let av = &inner.nodes[*a].value;
                    accumulate(&mut grads, *a, g.zip(av, |gv, x| gv / x));
                }
                Op::Erf(a) => {
                    // d/dx erf(x) = 2/sqrt(pi) exp(-x^2)
                    let av = &inner.nodes[*a].value;
                    let c = 2.0 / std::f64::consts::PI.sqrt();
                    accumulate(&mut grads, *a, g.zip(av, |gv, x| gv * c * (-x * x).exp()));
                }
                Op::Sigmoid(a) => {
                    let yv = &node.value;
                    accumulate(&mut grads, *a, g.zip(yv, |gv, y| gv * y * (1.0 - y)));
                }
                Op::Softplus(a) => {
                    let av = &inner.nodes[*a].value;
                    accumulate(&mut grads, *a, g.zip(av, |gv, x| gv * sigmoid(x)));
                }
                Op::MaxFloor(a, floor) => {
                    let av = &inner.nodes[*a].value;
                    let floor = *floor;
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip(av, |gv, x| if x > floor { gv } else { 0.0 }),
                    );
                }
                Op::MatMul(a, b) => {
                    let av = &inner.nodes[*a].value;
                    let bv = &inner.nodes[*b].value;
                    accumulate(&mut grads, *a, tensor::matmul_transpose_b(&g, bv));
                    accumulate(&mut grads, *b, tensor::matmul_transpose_a(av, &g));
                }
                Op::Conv2d { x, k, pad } => {
                    let xv = &inner.nodes[*x].value;
                    let kv = &inner.nodes[*k].value;
                    accumulate(
                        &mut grads,
                        *x,
                        tensor::conv2d_grad_input(&g, kv, *pad, xv.shape()),
                    );
                    accumulate(
                        &mut grads,
                        *k,
                        tensor::conv2d_grad_kernel(&g, xv, *pad, kv.shape()),
                    );
                }
                Op::AddCols { x, b } => {
                    let c = inner.nodes[*b].value.numel();
                    let r = g.numel() / c;
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g.data()[i * c + j];
                        }
                    }
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *b, Tensor::new(vec![c], gb));
                }
                Op::ScaleCols { x, s } => {
                    let xv = &inner.nodes[*x].value;
                    let sv = &inner.nodes[*s].value;
                    let c = sv.numel();
                    let r = g.numel() / c;
                    let mut gx = vec![0.0; g.numel()];
                    let mut gs = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            let gv = g.data()[i * c + j];
                            gx[i * c + j] = gv * sv.data()[j];
                            gs[j] += gv * xv.data()[i * c + j];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                    accumulate(&mut grads, *s, Tensor::new(vec![c], gs));
                }
                Op::ScaleByScalar { x, s } => {
                    let xv = &inner.nodes[*x].value;
                    let sv = inner.nodes[*s].value.item();
                    let gs: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    accumulate(&mut grads, *x, g.map(|v| v * sv));
                    accumulate(&mut grads, *s, Tensor::scalar(gs));
                }
                Op::WeightedSumGroups { x, w } => {
                    let xv = &inner.nodes[*x].value;
                    let wv = &inner.nodes[*w].value;
                    let (gn, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let mut gx = vec![0.0; xv.numel()];
                    let mut gw = vec![0.0; wv.numel()];
                    for gi in 0..gn {
                        for ti in 0..t {
                            let wval = wv.data()[gi * t + ti];
                            let xrow = &xv.data()[(gi * t + ti) * c..(gi * t + ti + 1) * c];
                            let grow = &g.data()[gi * c..(gi + 1) * c];
                            let gxrow = &mut gx[(gi * t + ti) * c..(gi * t + ti + 1) * c];
                            let mut acc = 0.0;
                            for ci in 0..c {
                                gxrow[ci] = grow[ci] * wval;
                                acc += grow[ci] * xrow[ci];
                            }
                            gw[gi * t + ti] = acc;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), gw));
                }
                Op::SpatialMean(a) => {
                    let av = &inner.nodes[*a].value;
                    let (h, w, c) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let scale = 1.0 / (h * w) as f64;
                    let mut gx = vec![0.0; av.numel()];
                    for pos in 0..h * w {
                        for ci in 0..c {
                            gx[pos * c + ci] = g.data()[ci] * scale;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), gx));
                }
                Op::SoftmaxRows(a) => {
                    // dx = p * (g - <p, g>) per row
                    let pv = &node.value;
                    let (r, c) = (pv.shape()[0], pv.shape()[1]);
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let prow = &pv.data()[i * c..(i + 1) * c];
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let dot: f64 = prow.iter().zip(grow).map(|(p, gg)| p * gg).sum();
                        for j in 0..c {
                            gx[i * c + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![r, c], gx));
                }
                Op::Gather { x, idx } => {
                    let xv = &inner.nodes[*x].value;
                    let mut gx = vec![0.0; xv.numel()];
                    for (out_i, &src) in idx.iter().enumerate() {
                        if src != usize::MAX {
                            gx[src] += g.data()[out_i];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = inner.nodes[p].value.numel();
                        let piece = Tensor::new(
                            inner.nodes[p].value.shape().to_vec(),
                            g.data()[off..off + n].to_vec(),
                        );
                        accumulate(&mut grads, p, piece);
                        off += n;
                    }
                }
                Op::Select { mask, a, b } => {
                    let ga = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(mask.iter())
                            .map(|(&gv, &m)| if m { gv } else { 0.0 })
                            .collect(),
                    );
                    let gb = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(mask.iter())
                            .map(|(&gv, &m)| if m { 0.0 } else { gv })
                            .collect(),
                    );
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ExpandScalar { x } => {
                    let s: f64 = g.data().iter().sum();
                    accumulate(&mut grads, *x, Tensor::scalar(s));
                }
                Op::SumAll(a) => {
                    let av = &inner.nodes[*a].value;
                    accumulate(&mut grads, *a, Tensor::full(av.shape().to_vec(), g.item()));
                }
                Op::MeanAll(a) => {
                    let av = &inner.nodes[*a].value;
                    let scale = g.item() / av.numel() as f64;
                    accumulate(&mut grads, *a, Tensor::full(av.shape().to_vec(), scale));
                }
                Op::Reshape(a) => {
                    let av = &inner.nodes[*a].value;
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::new(av.shape().to_vec(), g.data().to_vec()),
                    );
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            let sum = existing.zip(&g, |a, b| a + b);
            *existing = sum;
        }
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) evaluated stably on both tails
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.idx, |t| t.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_value(self.idx, |t| t.numel())
    }

    /// Clone of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.idx)
    }

    /// Scalar read.
    pub fn item(&self) -> f64 {
        self.tape.with_value(self.idx, |t| t.item())
    }

    fn same_shape(&self, other: &Var, what: &str) {
        let a = self.shape();
        let b = other.shape();
        assert_eq!(a, b, "{what}: shape {a:?} vs {b:?}");
    }

    pub fn add(&self, other: &Var) -> Var {
        self.same_shape(other, "add");
        let v = self.tape.with_value(self.idx, |a| {
            other.tape.with_value(other.idx, |b| a.zip(b, |x, y| x + y))
        });
        self.tape.push(v, Op::Add(self.idx, other.idx))
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.same_shape(other, "sub");
        let v = self.tape.with_value(self.idx, |a| {
            other.tape.with_value(other.idx, |b| a.zip(b, |x, y| x - y))
        });
        self.tape.push(v, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.same_shape(other, "mul");
        let v = self.tape.with_value(self.idx, |a| {
            other.tape.with_value(other.idx, |b| a.zip(b, |x, y| x * y))
        });
        self.tape.push(v, Op::Mul(self.idx, other.idx))
    }

    pub fn div(&self, other: &Var) -> Var {
        self.same_shape(other, "div");
        let v = self.tape.with_value(self.idx, |a| {
            other.tape.with_value(other.idx, |b| a.zip(b, |x, y| x / y))
        });
        self.tape.push(v, Op::Div(self.idx, other.idx))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = self.tape.with_value(self.idx, |a| a.map(|x| x + c));
        self.tape.push(v, Op::AddScalar(self.idx))
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let v = self.tape.with_value(self.idx, |a| a.map(|x| x * c));
        self.tape.push(v, Op::MulScalar(self.idx, c))
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn sqrt(&self) -> Var {
        let v = self.tape.with_value(self.idx, |a| a.map(f64::sqrt));
        self.tape.push(v, Op::Sqrt(self.idx))
    }

    pub fn exp(&self) -> Var {
        let v = self.tape.with_value(self.idx, |a| a.map(f64::exp));
        self.tape.push(v, Op::Exp(self.idx))
    }

    pub fn ln(&self) -> Var {
        let v = self.tape.with_value(self.idx, |a| a.map(f64::ln));
        self.tape.push(v, Op::Ln(self.idx))
    }

    pub fn erf(&self) -> Var {
        let v = self.tape.with_value(self.idx, |a| a.map(libm::erf));
        self.tape.push(v, Op::Erf(self.idx))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.tape.with_value(self.idx, |a| a.map(sigmoid));
        self.tape.push(v, Op::Sigmoid(self.idx))
    }

    pub fn softplus(&self) -> Var {
        let v = self.tape.with_value(self.idx, |a| a.map(softplus));
        self.tape.push(v, Op::Softplus(self.idx))
    }

    /// Elementwise `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn max_floor(&self, floor: f64) -> Var {
        let v = self.tape.with_value(self.idx, |a| a.map(|x| x.max(floor)));
        self.tape.push(v, Op::MaxFloor(self.idx, floor))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let v = self.tape.with_value(self.idx, |a| {
            other.tape.with_value(other.idx, |b| tensor::matmul(a, b))
        });
        self.tape.push(v, Op::MatMul(self.idx, other.idx))
    }

    pub fn conv2d(&self, kernel: &Var, pad: Padding) -> Var {
        let v = self.tape.with_value(self.idx, |x| {
            kernel
                .tape
                .with_value(kernel.idx, |k| tensor::conv2d(x, k, pad))
        });
        self.tape.push(
            v,
            Op::Conv2d {
                x: self.idx,
                k: kernel.idx,
                pad,
            },
        )
    }

    /// `(R,C) + (C,)` row-broadcast bias add.
    pub fn add_cols(&self, bias: &Var) -> Var {
        let v = self.tape.with_value(self.idx, |x| {
            bias.tape.with_value(bias.idx, |b| {
                let c = b.numel();
                assert_eq!(
                    x.numel() % c,
                    0,
                    "add_cols: {:?} + {:?}",
                    x.shape(),
                    b.shape()
                );
                let mut out = x.data().to_vec();
                for (i, v) in out.iter_mut().enumerate() {
                    *v += b.data()[i % c];
                }
                Tensor::new(x.shape().to_vec(), out)
            })
        });
        self.tape.push(
            v,
            Op::AddCols {
                x: self.idx,
                b: bias.idx,
            },
        )
    }

    /// `(R,C) * (C,)` row-broadcast scale.
    pub fn scale_cols(&self, s: &Var) -> Var {
        let v = self.tape.with_value(self.idx, |x| {
            s.tape.with_value(s.idx, |sv| {
                let c = sv.numel();
                assert_eq!(
                    x.numel() % c,
                    0,
                    "scale_cols: {:?} * {:?}",
                    x.shape(),
                    sv.shape()
                );
                let mut out = x.data().to_vec();
                for (i, v) in out.iter_mut().enumerate() {
                    *v *= sv.data()[i % c];
                }
                Tensor::new(x.shape().to_vec(), out)
            })
        });
        self.tape.push(
            v,
            Op::ScaleCols {
                x: self.idx,
                s: s.idx,
            },
        )
    }

    /// Multiply a whole tensor by a rank-1 scalar variable.
    pub fn scale_by_scalar(&self, s: &Var) -> Var {
        assert_eq!(s.numel(), 1, "scale_by_scalar takes a scalar var");
        let sv = s.item();
        let v = self.tape.with_value(self.idx, |x| x.map(|e| e * sv));
        self.tape.push(
            v,
            Op::ScaleByScalar {
                x: self.idx,
                s: s.idx,
            },
        )
    }

    /// Grouped weighted sum: `self (G,T,C)`, `w (G,T)` -> `(G,C)`.
    pub fn weighted_sum_groups(&self, w: &Var) -> Var {
        let v = self.tape.with_value(self.idx, |x| {
            w.tape.with_value(w.idx, |wv| {
                let (g, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                assert_eq!(wv.shape(), &[g, t], "weighted_sum_groups weights");
                let mut out = vec![0.0; g * c];
                for gi in 0..g {
                    let orow = &mut out[gi * c..(gi + 1) * c];
                    for ti in 0..t {
                        let wval = wv.data()[gi * t + ti];
                        let xrow = &x.data()[(gi * t + ti) * c..(gi * t + ti + 1) * c];
                        for ci in 0..c {
                            orow[ci] += wval * xrow[ci];
                        }
                    }
                }
                Tensor::new(vec![g, c], out)
            })
        });
        self.tape.push(
            v,
            Op::WeightedSumGroups {
                x: self.idx,
                w: w.idx,
            },
        )
    }

    /// `(H,W,C) -> (C,)` spatial mean.
    pub fn spatial_mean(&self) -> Var {
        let v = self.tape.with_value(self.idx, |x| {
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = vec![0.0; c];
            for pos in 0..h * w {
                for ci in 0..c {
                    out[ci] += x.data()[pos * c + ci];
                }
            }
            let scale = 1.0 / (h * w) as f64;
            for v in out.iter_mut() {
                *v *= scale;
            }
            Tensor::new(vec![c], out)
        });
        self.tape.push(v, Op::SpatialMean(self.idx))
    }

    pub fn softmax_rows(&self) -> Var {
        let v = self.tape.with_value(self.idx, tensor::softmax_rows);
        self.tape.push(v, Op::SoftmaxRows(self.idx))
    }

    /// Gather into `out_shape`; `usize::MAX` entries read zero.
    pub fn gather(&self, idx: Rc<Vec<usize>>, out_shape: Vec<usize>) -> Var {
        let v = self.tape.with_value(self.idx, |x| {
            let n: usize = out_shape.iter().product();
            assert_eq!(n, idx.len(), "gather index count");
            let data = idx
                .iter()
                .map(|&i| if i == usize::MAX { 0.0 } else { x.data()[i] })
                .collect();
            Tensor::new(out_shape.clone(), data)
        });
        self.tape.push(v, Op::Gather { x: self.idx, idx })
    }

    /// Concatenate rank-1 vars into one vector.
    pub fn concat(parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let tape = parts[0].tape.clone();
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        let n = data.len();
        tape.push(
            Tensor::new(vec![n], data),
            Op::Concat(parts.iter().map(|p| p.idx).collect()),
        )
    }

    /// Elementwise select with a trace-time mask: `mask ? a : b`.
    pub fn select(mask: Rc<Vec<bool>>, a: &Var, b: &Var) -> Var {
        a.same_shape(b, "select");
        let v = a.tape.with_value(a.idx, |av| {
            b.tape.with_value(b.idx, |bv| {
                assert_eq!(mask.len(), av.numel(), "select mask length");
                let data = mask
                    .iter()
                    .enumerate()
                    .map(|(i, &m)| if m { av.data()[i] } else { bv.data()[i] })
                    .collect();
                Tensor::new(av.shape().to_vec(), data)
            })
        });
        a.tape.push(
            v,
            Op::Select {
                mask,
                a: a.idx,
                b: b.idx,
            },
        )
    }

    /// Broadcast a rank-1 scalar to an `(n,)` vector.
    pub fn expand_scalar(&self, n: usize) -> Var {
        assert_eq!(self.numel(), 1, "expand_scalar takes a scalar var");
        let v = Tensor::full(vec![n], self.item());
        self.tape.push(v, Op::ExpandScalar { x: self.idx })
    }

    pub fn sum_all(&self) -> Var {
        let v = self
            .tape
            .with_value(self.idx, |x| Tensor::scalar(x.data().iter().sum()));
        self.tape.push(v, Op::SumAll(self.idx))
    }

    pub fn mean_all(&self) -> Var {
        let v = self.tape.with_value(self.idx, |x| {
            Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
        });
        self.tape.push(v, Op::MeanAll(self.idx))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Var {
        let v = self
            .tape
            .with_value(self.idx, |x| x.reshaped(shape.clone()));
        self.tape.push(v, Op::Reshape(self.idx))
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences on a scalar-valued builder.
    fn fd_check(build: impl Fn(&Tape, &[Var]) -> Var, leaves: Vec<Tensor>, tol: f64) {
        let tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&tape, &vars);
        let grads = tape.backward(&out);
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.wrt(&vars[li]);
            for ei in 0..leaf.numel() {
                let eval = |delta: f64| -> f64 {
                    let t2 = Tape::inference();
                    let vs: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == li {
                                t.data_mut()[ei] += delta;
                            }
                            t2.leaf(t)
                        })
                        .collect();
                    build(&t2, &vs).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let got = g.data()[ei];
                assert!(
                    (fd - got).abs() <= tol * (1.0 + fd.abs()),
                    "leaf {li} elem {ei}: fd {fd} vs ad {got}"
                );
            }
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        )
    }

    #[test]
    fn elementwise_chain_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, vec![6]);
        let b = rand_tensor(&mut rng, vec![6]).map(|x| x + 2.5); // keep positive for ln/sqrt
        fd_check(
            |_, vs| {
                let x = vs[0].mul(&vs[1]).add(&vs[0].sigmoid()).sub(&vs[1].sqrt());
                let y = x
                    .softplus()
                    .add(&vs[0].erf())
                    .mul_scalar(0.7)
                    .add_scalar(0.1);
                y.mean_all()
            },
            vec![a, b],
            1e-5,
        );
    }

    #[test]
    fn exp_ln_div_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, vec![5]).map(|x| x + 3.0);
        let b = rand_tensor(&mut rng, vec![5]).map(|x| x + 3.0);
        fd_check(
            |_, vs| {
                vs[0]
                    .ln()
                    .add(&vs[0].div(&vs[1]))
                    .add(&vs[1].exp().mul_scalar(0.01))
                    .sum_all()
            },
            vec![a, b],
            1e-5,
        );
    }

    #[test]
    fn matmul_and_bias_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let w = rand_tensor(&mut rng, vec![4, 2]);
        let b = rand_tensor(&mut rng, vec![2]);
        fd_check(
            |_, vs| vs[0].matmul(&vs[1]).add_cols(&vs[2]).square().sum_all(),
            vec![x, w, b],
            1e-4,
        );
    }

    #[test]
    fn conv_scale_pool_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, vec![4, 4, 2]);
        let k = rand_tensor(&mut rng, vec![3, 3, 2, 3]);
        let s = rand_tensor(&mut rng, vec![3]);
        fd_check(
            |_, vs| {
                let y = vs[0].conv2d(&vs[1], Padding::Same);
                let scaled = y
                    .reshape(vec![16, 3])
                    .scale_cols(&vs[2])
                    .reshape(vec![4, 4, 3]);
                scaled.spatial_mean().sum_all()
            },
            vec![x, k, s],
            1e-4,
        );
    }

    #[test]
    fn softmax_weighted_sum_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![2, 3, 4]);
        let e = rand_tensor(&mut rng, vec![2, 3]);
        fd_check(
            |_, vs| {
                let p = vs[1].softmax_rows();
                vs[0].weighted_sum_groups(&p).square().sum_all()
            },
            vec![x, e],
            1e-4,
        );
    }

    #[test]
    fn gather_select_concat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, vec![6]);
        let y = rand_tensor(&mut rng, vec![4]);
        let idx = Rc::new(vec![0usize, 2, 5, usize::MAX]);
        let mask = Rc::new(vec![true, false, true, false]);
        fd_check(
            |_, vs| {
                let g = vs[0].gather(idx.clone(), vec![4]);
                let sel = Var::select(mask.clone(), &g, &vs[1]);
                Var::concat(&[sel, vs[1].clone()]).square().sum_all()
            },
            vec![x, y],
            1e-5,
        );
    }

    #[test]
    fn scalar_expansion_grads() {
        let s = Tensor::scalar(0.7);
        let u = Tensor::from_slice(&[0.3, -1.0, 2.0]);
        fd_check(
            |_, vs| {
                let z = vs[0]
                    .expand_scalar(3)
                    .mul(&vs[1])
                    .add(&vs[0].expand_scalar(3));
                z.mean_all()
            },
            vec![s, u],
            1e-6,
        );
    }

    #[test]
    fn max_floor_blocks_gradient_below_floor() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[-1.0, 0.5]));
        let y = x.max_floor(0.0).sum_all();
        let g = tape.backward(&y).wrt(&x);
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn inference_tape_matches_grad_tape_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, vec![3, 3, 1]);
        let k = rand_tensor(&mut rng, vec![3, 3, 1, 2]);
        let run = |tape: &Tape| -> Tensor {
            let xv = tape.leaf(x.clone());
            let kv = tape.leaf(k.clone());
            xv.conv2d(&kv, Padding::Same).sigmoid().value()
        };
        let a = run(&Tape::new());
        let b = run(&Tape::inference());
        assert_eq!(a, b);
    }
}
