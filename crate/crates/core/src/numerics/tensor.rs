//! Dense row-major `f64` arrays and the forward kernels the model graph uses.
//!
//! Every kernel here is a plain function of its inputs. The tape in
//! [`super::graph`] records calls to these kernels and supplies the adjoints.

use std::fmt;

use crate::error::{Error, Result};

/// Guard added under every square root and to the phase denominator.
pub const SQRT_EPS: f64 = 1e-12;

/// Dense n-dimensional array of 64-bit floats, row-major and contiguous.
///
/// A rank-0 tensor (`shape == []`) holds exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {} values, got {}",
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel_of(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel_of(shape);
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a rank-2 tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric fault naming `what` if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what} has non-finite value {} at flat index {i} (shape {:?})",
                self.data[i], self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// In-place `self += other` for identical shapes.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Rank-1 operands are read as a row (left) or column (right) and the
/// corresponding extent is dropped from the result.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q, a_vec) = match a.shape.as_slice() {
        [p, q] => (*p, *q, false),
        [q] => (1, *q, true),
        _ => return Err(mm_err(a, b)),
    };
    let (q2, r, b_vec) = match b.shape.as_slice() {
        [q2, r] => (*q2, *r, false),
        [q2] => (*q2, 1, true),
        _ => return Err(mm_err(a, b)),
    };
    if q != q2 {
        return Err(mm_err(a, b));
    }
    let mut out = vec![0.0; p * r];
    matmul_into(&a.data, &b.data, &mut out, p, q, r);
    let shape = match (a_vec, b_vec) {
        (false, false) => vec![p, r],
        (false, true) => vec![p],
        (true, false) => vec![r],
        (true, true) => vec![],
    };
    Ok(Tensor { shape, data: out })
}

fn mm_err(a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension(format!(
        "matmul cannot combine {:?} with {:?}",
        a.shape, b.shape
    ))
}

/// `out[p,r] += a[p,q] * b[q,r]`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[q,r] += a[p,q]^T * g[p,r]`
pub(crate) fn matmul_at_b_into(a: &[f64], g: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

/// `out[p,q] += g[p,r] * b[q,r]^T`
pub(crate) fn matmul_a_bt_into(g: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let brow = &b[k * r..(k + 1) * r];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * q + k] += acc;
        }
    }
}

pub fn outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 1 || b.rank() != 1 {
        return Err(Error::Dimension(format!(
            "outer needs two rank-1 tensors, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (s, v) = (a.numel(), b.numel());
    let mut data = Vec::with_capacity(s * v);
    for &x in &a.data {
        data.extend(b.data.iter().map(|&y| x * y));
    }
    Ok(Tensor {
        shape: vec![s, v],
        data,
    })
}

// ---------------------------------------------------------------------------
// Broadcasting elementwise binaries
// ---------------------------------------------------------------------------

/// The broadcast patterns the model needs. Anything else is rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// Left operand is a single value.
    ScalarLeft,
    ScalarRight,
    /// Right operand is `[V]` or `[1,V]` against a left `[S,V]`.
    RowRight,
    RowLeft,
    /// Right operand is `[S,1]` against a left `[S,V]`.
    ColRight,
    ColLeft,
}

fn is_scalar_shape(s: &[usize]) -> bool {
    s.is_empty() || s == [1]
}

fn row_of(big: &[usize], small: &[usize]) -> bool {
    matches!(big, [_, v] if small == [*v] || small == [1, *v])
}

fn col_of(big: &[usize], small: &[usize]) -> bool {
    matches!(big, [s, _] if small == [*s, 1])
}

pub fn classify_broadcast(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if is_scalar_shape(b) {
        Ok(Broadcast::ScalarRight)
    } else if is_scalar_shape(a) {
        Ok(Broadcast::ScalarLeft)
    } else if row_of(a, b) {
        Ok(Broadcast::RowRight)
    } else if row_of(b, a) {
        Ok(Broadcast::RowLeft)
    } else if col_of(a, b) {
        Ok(Broadcast::ColRight)
    } else if col_of(b, a) {
        Ok(Broadcast::ColLeft)
    } else {
        Err(Error::Dimension(format!(
            "shapes {a:?} and {b:?} are not broadcast-compatible"
        )))
    }
}

impl Broadcast {
    pub fn out_shape<'a>(self, a: &'a [usize], b: &'a [usize]) -> &'a [usize] {
        match self {
            Broadcast::Same | Broadcast::ScalarRight | Broadcast::RowRight | Broadcast::ColRight => a,
            _ => b,
        }
    }

    /// Flat index into (left, right) for output flat index `i` given the output column count.
    #[inline]
    pub fn index(self, i: usize, cols: usize) -> (usize, usize) {
        match self {
            Broadcast::Same => (i, i),
            Broadcast::ScalarRight => (i, 0),
            Broadcast::ScalarLeft => (0, i),
            Broadcast::RowRight => (i, i % cols),
            Broadcast::RowLeft => (i % cols, i),
            Broadcast::ColRight => (i, i / cols),
            Broadcast::ColLeft => (i / cols, i),
        }
    }
}

pub(crate) fn last_extent(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

pub fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let bc = classify_broadcast(&a.shape, &b.shape)?;
    let shape = bc.out_shape(&a.shape, &b.shape).to_vec();
    let cols = last_extent(&shape);
    let n = numel_of(&shape);
    let data = if bc == Broadcast::Same {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n)
            .map(|i| {
                let (ia, ib) = bc.index(i, cols);
                f(a.data[ia], b.data[ib])
            })
            .collect()
    };
    Ok(Tensor { shape, data })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast(a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast(a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast(a, b, |x, y| x * y)
}

// ---------------------------------------------------------------------------
// Unary functions
// ---------------------------------------------------------------------------

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

/// Subgradient at zero is zero.
pub fn relu(a: &Tensor) -> Tensor {
    a.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// `sqrt(x + eps)`; inputs below `-eps` are a domain error.
pub fn sqrt_eps(a: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = a.data.iter().find(|&&x| x < -SQRT_EPS) {
        return Err(Error::Domain(format!("sqrt of negative value {bad}")));
    }
    Ok(a.map(|x| (x + SQRT_EPS).sqrt()))
}

pub fn square(a: &Tensor) -> Tensor {
    a.map(|x| x * x)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x * c)
}

/// Real part fed to the phase arctangent: magnitude at least `SQRT_EPS`, sign kept
/// (zero counts as positive).
#[inline]
pub fn guard_re(re: f64) -> f64 {
    if re.abs() >= SQRT_EPS {
        re
    } else if re < 0.0 {
        -SQRT_EPS
    } else {
        SQRT_EPS
    }
}

/// Elementwise `arctan(im / re)` with a sign-preserving guard on `re`; values lie in
/// `[-pi/2, pi/2]`.
pub fn phase(re: &Tensor, im: &Tensor) -> Result<Tensor> {
    if re.shape != im.shape {
        return Err(Error::Dimension(format!(
            "phase needs equal shapes, got {:?} and {:?}",
            re.shape, im.shape
        )));
    }
    let data = re
        .data
        .iter()
        .zip(&im.data)
        .map(|(&r, &i)| (i / guard_re(r)).atan())
        .collect();
    Ok(Tensor {
        shape: re.shape.clone(),
        data,
    })
}

// ---------------------------------------------------------------------------
// Reductions and layout
// ---------------------------------------------------------------------------

/// Sum along `axis`, removing it.
pub fn reduce_sum(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {:?}",
            a.shape
        )));
    }
    let outer: usize = a.shape[..axis].iter().product();
    let len = a.shape[axis];
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let base = (o * len + k) * inner;
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (d, &x) in dst.iter_mut().zip(&a.data[base..base + inner]) {
                *d += x;
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.remove(axis);
    Ok(Tensor { shape, data })
}

/// Reads `out[i] = a[index[i]]`.
pub fn gather(a: &Tensor, index: &[usize], shape: &[usize]) -> Result<Tensor> {
    if numel_of(shape) != index.len() {
        return Err(Error::Dimension(format!(
            "gather of {} indices into shape {shape:?}",
            index.len()
        )));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= a.numel()) {
        return Err(Error::Dimension(format!(
            "gather index {bad} out of range for {:?}",
            a.shape
        )));
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data: index.iter().map(|&i| a.data[i]).collect(),
    })
}

/// Concatenates the flat data of `parts` and views it as `shape`.
pub fn concat(parts: &[&Tensor], shape: &[usize]) -> Result<Tensor> {
    let total: usize = parts.iter().map(|t| t.numel()).sum();
    if total != numel_of(shape) {
        return Err(Error::Dimension(format!(
            "concat of {total} values into shape {shape:?}"
        )));
    }
    let mut data = Vec::with_capacity(total);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Row of `x` read at time `t` under replicate padding.
#[inline]
pub(crate) fn clamp_time(t: isize, len: usize) -> usize {
    t.clamp(0, len as isize - 1) as usize
}

/// Channel-mixing 1-D convolution along time with replicate padding.
///
/// `out[t,d] = sum_{j,e} kernel[j,e,d] * x[clamp(t + j - k/2), e]` for `x: [T,D]`,
/// `kernel: [k,D,D]`.
pub fn conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (t_len, d) = conv_dims(x, kernel)?;
    let k = kernel.shape[0];
    let half = (k / 2) as isize;
    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        let orow = &mut out[t * d..(t + 1) * d];
        for j in 0..k {
            let src = clamp_time(t as isize + j as isize - half, t_len);
            let xrow = &x.data[src * d..(src + 1) * d];
            for (e, &xv) in xrow.iter().enumerate() {
                let krow = &kernel.data[(j * d + e) * d..(j * d + e + 1) * d];
                for (o, &kv) in orow.iter_mut().zip(krow) {
                    *o += kv * xv;
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![t_len, d],
        data: out,
    })
}

pub(crate) fn conv_dims(x: &Tensor, kernel: &Tensor) -> Result<(usize, usize)> {
    let [t_len, d] = x.shape[..] else {
        return Err(Error::Dimension(format!(
            "conv1d input must be [T,D], got {:?}",
            x.shape
        )));
    };
    let [k, d1, d2] = kernel.shape[..] else {
        return Err(Error::Dimension(format!(
            "conv1d kernel must be [k,D,D], got {:?}",
            kernel.shape
        )));
    };
    if d1 != d || d2 != d {
        return Err(Error::Dimension(format!(
            "conv1d kernel {:?} does not match input {:?}",
            kernel.shape, x.shape
        )));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("conv1d kernel size {k} must be odd")));
    }
    Ok((t_len, d))
}
