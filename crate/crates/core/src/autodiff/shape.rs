use super::{check_shape, strides, Accumulator, Op, Real, Tape, Var};
use crate::error::{Error, Result};

/// Source offset for every output offset of a permutation.
fn permute_sources(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; perm.len()];
    let mut s = 0usize;
    for _ in 0..total {
        out.push(s);
        for ax in (0..perm.len()).rev() {
            idx[ax] += 1;
            s += src_stride[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            s -= src_stride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape, self.value(x).len())?;
        let data = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, data, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis i is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let src = permute_sources(&shape, perm);
        let xv = self.value(x);
        let data = src.iter().map(|&s| xv[s]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(out_shape, data, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Reverses the order of elements along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("flip axis {axis} for {shape:?}")));
        }
        let data = flip_data(self.value(x), &shape, axis);
        let rg = self.requires_grad(x);
        Ok(self.push(shape, data, Op::Flip { x, axis }, rg))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!("slice [{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(out_shape, data, Op::Slice { x, axis, start }, rg))
    }
}

fn flip_data<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(x.len());
    for o in 0..outer {
        for i in (0..n).rev() {
            let base = (o * n + i) * inner;
            out.extend_from_slice(&x[base..base + inner]);
        }
    }
    out
}

pub(super) fn permute_backward<T: Real>(acc: &mut Accumulator<'_, T>, x: Var, perm: &[usize], g: &[T]) {
    let src = permute_sources(acc.shape(x), perm);
    acc.add(x, |dx| {
        for (o, &s) in src.iter().enumerate() {
            dx[s] += g[o];
        }
    });
}

pub(super) fn flip_backward<T: Real>(acc: &mut Accumulator<'_, T>, x: Var, axis: usize, g: &[T]) {
    let shape = acc.shape(x).to_vec();
    let flipped = flip_data(g, &shape, axis);
    acc.add(x, |dx| super::add_into(dx, &flipped));
}

pub(super) fn slice_backward<T: Real>(
    acc: &mut Accumulator<'_, T>,
    x: Var,
    axis: usize,
    start: usize,
    out_shape: &[usize],
    g: &[T],
) {
    let shape = acc.shape(x).to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = out_shape[axis];
    acc.add(x, |dx| {
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            let src = &g[o * len * inner..(o + 1) * len * inner];
            super::add_into(&mut dx[base..base + len * inner], src);
        }
    });
}
