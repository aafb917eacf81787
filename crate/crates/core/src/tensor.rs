//! Dense row-major `f64` tensors and the raw compute kernels used by the
//! autodiff graph.
//!
//! The tensor type is deliberately small: shape vector plus flat data. All
//! heavy kernels (matmul, 2-D convolution and its adjoints, softmax rows)
//! live here as free functions so that both the taped forward pass and its
//! backward pass share one implementation.

use crate::error::{Error, Result};

/// Zero-padding mode for 2-D convolution. Stride is always 1; subsampling is
/// done by the pooling stages instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size equals input spatial size (zero padding).
    Same,
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
}

/// A dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// A rank-1 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single-element read; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of {} elements",
            self.data.len()
        );
        self.data[0]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        Tensor {
            shape,
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on mismatched shapes"
        );
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Require identical shapes, as an `Error` rather than a panic.
    pub fn check_same_shape(&self, other: &Tensor, ctx: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{ctx}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// `a (m,k) x b (k,n) -> (m,n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a (m,k) x b^T` where `b` is `(n,k)`.
pub fn matmul_transpose_b(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (n, k2) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul_transpose_b inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a^T x b` where `a` is `(k,m)` and `b` is `(k,n)`.
pub fn matmul_transpose_a(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul_transpose_a inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &a.data[kk * m..(kk + 1) * m];
        let brow = &b.data[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn pad_offsets(kh: usize, kw: usize, pad: Padding) -> (isize, isize) {
    match pad {
        Padding::Same => ((kh as isize - 1) / 2, (kw as isize - 1) / 2),
        Padding::Valid => (0, 0),
    }
}

/// Output spatial size of a stride-1 convolution.
pub fn conv_out_shape(h: usize, w: usize, kh: usize, kw: usize, pad: Padding) -> (usize, usize) {
    match pad {
        Padding::Same => (h, w),
        Padding::Valid => (h + 1 - kh, w + 1 - kw),
    }
}

/// 2-D convolution: input `(H,W,Cin)`, kernel `(kh,kw,Cin,Cout)`, stride 1.
pub fn conv2d(x: &Tensor, k: &Tensor, pad: Padding) -> Tensor {
    let (h, w, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw, kcin, cout) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    assert_eq!(cin, kcin, "conv2d channel mismatch {cin} vs {kcin}");
    let (oh, ow) = conv_out_shape(h, w, kh, kw, pad);
    let (ph, pw) = pad_offsets(kh, kw, pad);
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let iy = oy as isize + ky as isize - ph;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ox as isize + kx as isize - pw;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xbase = ((iy as usize * w) + ix as usize) * cin;
                    let kbase = ((ky * kw) + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x.data[xbase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &k.data[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for co in 0..cout {
                            orow[co] += xv * krow[co];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

/// Adjoint of [`conv2d`] with respect to the input.
pub fn conv2d_grad_input(grad: &Tensor, k: &Tensor, pad: Padding, x_shape: &[usize]) -> Tensor {
    let (h, w, cin) = (x_shape[0], x_shape[1], x_shape[2]);
    let (kh, kw, _, cout) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    let (oh, ow) = (grad.shape[0], grad.shape[1]);
    let (ph, pw) = pad_offsets(kh, kw, pad);
    let mut gx = vec![0.0; h * w * cin];
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &grad.data[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let iy = oy as isize + ky as isize - ph;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ox as isize + kx as isize - pw;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xbase = ((iy as usize * w) + ix as usize) * cin;
                    let kbase = ((ky * kw) + kx) * cin * cout;
                    for ci in 0..cin {
                        let krow = &k.data[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            acc += grow[co] * krow[co];
                        }
                        gx[xbase + ci] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

/// Adjoint of [`conv2d`] with respect to the kernel.
pub fn conv2d_grad_kernel(grad: &Tensor, x: &Tensor, pad: Padding, k_shape: &[usize]) -> Tensor {
    let (h, w, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw, _, cout) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    let (oh, ow) = (grad.shape[0], grad.shape[1]);
    let (ph, pw) = pad_offsets(kh, kw, pad);
    let mut gk = vec![0.0; kh * kw * cin * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &grad.data[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let iy = oy as isize + ky as isize - ph;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ox as isize + kx as isize - pw;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xbase = ((iy as usize * w) + ix as usize) * cin;
                    let kbase = ((ky * kw) + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x.data[xbase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for co in 0..cout {
                            krow[co] += xv * grow[co];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(k_shape.to_vec(), gk)
}

/// Row-wise softmax of a `(R,C)` matrix, computed with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * c..(i + 1) * c];
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            orow[j] = e;
            z += e;
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(vec![r, c], out)
}
