use std::sync::Arc;

use crate::tape::Var;
use crate::tensor::{numel, Tensor};

impl<'t> Var<'t> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let shape = shape.into();
        let old = self.shape().to_vec();
        let out = self.value.as_ref().clone().reshape(shape);
        self.tape
            .record(out, &[self], move |g, _| vec![Some(g.clone().reshape(old))])
    }

    /// Rows `start..start+len` along the first axis.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Var<'t> {
        let shape = self.shape().to_vec();
        assert!(!shape.is_empty() && start + len <= shape[0], "narrow_rows out of range");
        let inner = numel(&shape[1..]);
        let data = self.value.data()[start * inner..(start + len) * inner].to_vec();
        let mut oshape = shape.clone();
        oshape[0] = len;
        self.tape.record(Tensor::from_vec(oshape, data), &[self], move |g, _| {
            let mut gx = Tensor::zeros(shape);
            gx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![Some(gx)]
        })
    }

    /// Columns `start..start+width` of a `[rows, cols]` matrix.
    pub fn narrow_cols(&self, start: usize, width: usize) -> Var<'t> {
        assert_eq!(self.value.rank(), 2, "narrow_cols expects a matrix");
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        assert!(start + width <= cols, "narrow_cols out of range");
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.value.data()[r * cols + start..r * cols + start + width]);
        }
        self.tape
            .record(Tensor::from_vec([rows, width], data), &[self], move |g, _| {
                let mut gx = Tensor::zeros([rows, cols]);
                for r in 0..rows {
                    gx.data_mut()[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                }
                vec![Some(gx)]
            })
    }

    /// Output element `i` is `self.flat[index[i]]`; the result takes `shape`.
    /// Gradients scatter-add back, so repeated indices are allowed.
    pub fn gather_flat(&self, index: Arc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let shape = shape.into();
        assert_eq!(numel(&shape), index.len(), "gather_flat output shape");
        let src = self.value.data();
        let data = index.iter().map(|&i| src[i]).collect();
        let in_shape = self.shape().to_vec();
        self.tape.record(Tensor::from_vec(shape, data), &[self], move |g, _| {
            let mut gx = Tensor::zeros(in_shape);
            let gd = gx.data_mut();
            for (&i, &v) in index.iter().zip(g.data()) {
                gd[i] += v;
            }
            vec![Some(gx)]
        })
    }

    /// Embedding lookup: rows `ids` of a `[K, D]` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Var<'t> {
        assert_eq!(self.value.rank(), 2, "gather_rows expects a table");
        let (k, d) = (self.shape()[0], self.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < k, "row {id} out of range {k}");
            data.extend_from_slice(&self.value.data()[id * d..(id + 1) * d]);
        }
        let ids = ids.to_vec();
        self.tape
            .record(Tensor::from_vec([ids.len(), d], data), &[self], move |g, _| {
                let mut gt = Tensor::zeros([k, d]);
                let gd = gt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gd[id * d + j] += g.data()[r * d + j];
                    }
                }
                vec![Some(gt)]
            })
    }

    /// Forward value is `replacement`; the gradient passes to `self` unchanged
    /// (straight-through estimator).
    pub fn straight_through(&self, replacement: Tensor) -> Var<'t> {
        assert_eq!(replacement.shape(), self.shape(), "straight_through shape");
        self.tape.record(replacement, &[self], |g, _| vec![Some(g.clone())])
    }
}

/// Concatenation along the first axis.
pub fn concat_rows<'t>(vars: &[Var<'t>]) -> Var<'t> {
    assert!(!vars.is_empty(), "concat of nothing");
    let tape = vars[0].tape;
    let inner_shape = vars[0].shape()[1..].to_vec();
    let mut rows = Vec::with_capacity(vars.len());
    let mut data = Vec::new();
    for v in vars {
        assert_eq!(&v.shape()[1..], inner_shape.as_slice(), "concat_rows inner shape");
        rows.push(v.shape()[0]);
        data.extend_from_slice(v.value.data());
    }
    let inner = numel(&inner_shape);
    let mut shape = vec![rows.iter().sum()];
    shape.extend_from_slice(&inner_shape);
    let refs: Vec<&Var<'t>> = vars.iter().collect();
    tape.record(Tensor::from_vec(shape, data), &refs, move |g, needs| {
        let mut offset = 0;
        rows.iter()
            .enumerate()
            .map(|(i, &r)| {
                let start = offset;
                offset += r * inner;
                needs[i].then(|| {
                    let mut s = inner_shape.clone();
                    s.insert(0, r);
                    Tensor::from_vec(s, g.data()[start..start + r * inner].to_vec())
                })
            })
            .collect()
    })
}

/// Elementwise arithmetic mean, accumulated in slice order.
pub fn mean_of<'t>(vars: &[Var<'t>]) -> Var<'t> {
    let n = vars.len();
    crate::ops::sum_all(vars).scale(1.0 / n as f32)
}
