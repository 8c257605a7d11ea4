//! Dense row-major f64 arrays with trailing-dimension broadcasting.
//!
//! This is the value type everything else computes on. Shapes are plain
//! `Vec<usize>`; scalars are shape `[1]`. Broadcasting follows one rule:
//! shapes are right-aligned, the shorter one is padded with leading 1s, and
//! a dimension may differ only where one side is 1. Anything else is a
//! shape error — silent expansion is how numerical bugs hide.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Mismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(!shape.is_empty(), "shape must have at least one dimension");
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} values",
            shape,
            data.len()
        );
        Array { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: f64) -> Self {
        Array::new(vec![1], vec![v])
    }

    pub fn vector(values: &[f64]) -> Self {
        Array::new(vec![values.len()], values.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Array::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Number of rows for a rank-2 array.
    pub fn nrows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns for a rank-2 array.
    pub fn ncols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Array, ShapeError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() {
            return Err(ShapeError::Invalid {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Array {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn transpose2(&self) -> Result<Array, ShapeError> {
        if self.rank() != 2 {
            return Err(ShapeError::Rank {
                op: "transpose",
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Array::new(vec![c, r], out))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }
}

/// Right-aligned broadcast of two shapes. Returns the output shape.
pub fn broadcast_shapes(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, ShapeError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for k in 0..rank {
        let da = if k < rank - a.len() { 1 } else { a[k - (rank - a.len())] };
        let db = if k < rank - b.len() { 1 } else { b[k - (rank - b.len())] };
        out[k] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(ShapeError::Mismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

fn strides_for(shape: &[usize], out_rank: usize) -> Vec<usize> {
    // Stride 0 marks a broadcast dimension.
    let mut strides = vec![0usize; out_rank];
    let offset = out_rank - shape.len();
    let mut s = 1usize;
    for k in (0..shape.len()).rev() {
        strides[offset + k] = if shape[k] == 1 { 0 } else { s };
        s *= shape[k];
    }
    strides
}

/// Elementwise binary op with trailing broadcast.
pub fn binary_op(
    op: &'static str,
    a: &Array,
    b: &Array,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array, ShapeError> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Array {
            shape: a.shape.clone(),
            data,
        });
    }
    if b.is_scalar() {
        let y = b.data[0];
        return Ok(Array {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| f(x, y)).collect(),
        });
    }
    if a.is_scalar() {
        let x = a.data[0];
        return Ok(Array {
            shape: b.shape.clone(),
            data: b.data.iter().map(|&y| f(x, y)).collect(),
        });
    }
    let out_shape = broadcast_shapes(op, &a.shape, &b.shape)?;
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let sa = strides_for(&a.shape, rank);
    let sb = strides_for(&b.shape, rank);
    let mut idx = vec![0usize; rank];
    let mut data = Vec::with_capacity(n);
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..n {
        data.push(f(a.data[ia], b.data[ib]));
        // Odometer increment over the output index space.
        for k in (0..rank).rev() {
            idx[k] += 1;
            ia += sa[k];
            ib += sb[k];
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
            ia -= sa[k] * out_shape[k];
            ib -= sb[k] * out_shape[k];
        }
    }
    Ok(Array {
        shape: out_shape,
        data,
    })
}

/// Collapse `adj` (shaped like a broadcast output) back onto `target` by
/// summing over every expanded dimension. Inverse of broadcasting for
/// gradient flow.
pub fn reduce_to_shape(adj: &Array, target: &[usize]) -> Array {
    if adj.shape() == target {
        return adj.clone();
    }
    let out_rank = adj.rank();
    let strides = strides_for(target, out_rank);
    let n_target: usize = target.iter().product();
    let mut acc = vec![0.0f64; n_target];
    let mut idx = vec![0usize; out_rank];
    let mut it = 0usize;
    for &v in adj.data() {
        acc[it] += v;
        for k in (0..out_rank).rev() {
            idx[k] += 1;
            it += strides[k];
            if idx[k] < adj.shape()[k] {
                break;
            }
            idx[k] = 0;
            it -= strides[k] * adj.shape()[k];
        }
    }
    Array::new(target.to_vec(), acc)
}

pub fn concat(op: &'static str, parts: &[&Array], axis: usize) -> Result<Array, ShapeError> {
    if parts.is_empty() {
        return Err(ShapeError::Invalid {
            op,
            msg: "empty concat".into(),
        });
    }
    let rank = parts[0].rank();
    if axis >= rank {
        return Err(ShapeError::Axis {
            op,
            axis,
            shape: parts[0].shape().to_vec(),
        });
    }
    let mut out_shape = parts[0].shape().to_vec();
    for p in &parts[1..] {
        if p.rank() != rank {
            return Err(ShapeError::Mismatch {
                op,
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for k in 0..rank {
            if k != axis && p.shape()[k] != out_shape[k] {
                return Err(ShapeError::Mismatch {
                    op,
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        out_shape[axis] += p.shape()[axis];
    }
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let ax = p.shape()[axis];
            let chunk = ax * inner;
            let start = o * chunk;
            data.extend_from_slice(&p.data()[start..start + chunk]);
        }
    }
    Ok(Array::new(out_shape, data))
}

/// Slice `len` elements starting at `start` along `axis`.
pub fn slice(
    op: &'static str,
    a: &Array,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Array, ShapeError> {
    if axis >= a.rank() {
        return Err(ShapeError::Axis {
            op,
            axis,
            shape: a.shape().to_vec(),
        });
    }
    if start + len > a.shape()[axis] || len == 0 {
        return Err(ShapeError::Invalid {
            op,
            msg: format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                a.shape()
            ),
        });
    }
    let mut out_shape = a.shape().to_vec();
    out_shape[axis] = len;
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let ax = a.shape()[axis];
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ax + start) * inner;
        data.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    Ok(Array::new(out_shape, data))
}

/// Scatter a slice adjoint back into a zero array of the source shape.
pub fn slice_backward(adj: &Array, src_shape: &[usize], axis: usize, start: usize) -> Array {
    let mut out = Array::zeros(src_shape);
    let outer: usize = src_shape[..axis].iter().product();
    let inner: usize = src_shape[axis + 1..].iter().product();
    let ax = src_shape[axis];
    let len = adj.shape()[axis];
    for o in 0..outer {
        let src_base = o * len * inner;
        let dst_base = (o * ax + start) * inner;
        out.data_mut()[dst_base..dst_base + len * inner]
            .copy_from_slice(&adj.data()[src_base..src_base + len * inner]);
    }
    out
}
