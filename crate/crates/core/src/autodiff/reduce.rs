use super::{strides, Accumulator, Op, Real, Tape, Var};
use crate::error::{Error, Result};

/// For each input offset, the offset of the reduced output element it feeds.
fn reduce_targets(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
    let out_strides = strides(&out_shape);
    // stride of each input axis in the output (0 for reduced axes)
    let mut ax_stride = vec![0; shape.len()];
    let mut k = 0;
    for (i, s) in ax_stride.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *s = out_strides[k];
            k += 1;
        }
    }
    let total: usize = shape.iter().product();
    let mut targets = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut o = 0usize;
    for _ in 0..total {
        targets.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            o += ax_stride[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            o -= ax_stride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    (out_shape, targets)
}

impl<T: Real> Tape<T> {
    /// Arithmetic mean over `axes`; those axes are removed from the shape
    /// (a full reduction yields shape `[1]`).
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::shape(format!("invalid reduction axes {axes:?} for {shape:?}")));
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        if count == 0 {
            return Err(Error::shape("empty reduction extent"));
        }
        let (out_shape, targets) = reduce_targets(&shape, &axes);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&t, &v) in targets.iter().zip(self.value(x)) {
            out[t] += v;
        }
        let inv = T::one() / T::lit(count as f64);
        for v in &mut out {
            *v *= inv;
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out_shape, out, Op::Mean { x, axes }, rg))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], Op::Sum { x }, rg)
    }
}

pub(super) fn mean_backward<T: Real>(acc: &mut Accumulator<'_, T>, x: Var, axes: &[usize], g: &[T]) {
    let shape = acc.shape(x).to_vec();
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    let inv = T::one() / T::lit(count as f64);
    let (_, targets) = reduce_targets(&shape, axes);
    acc.add(x, |dx| {
        for (d, &t) in dx.iter_mut().zip(&targets) {
            *d += g[t] * inv;
        }
    });
}

pub(super) fn sum_backward<T: Real>(acc: &mut Accumulator<'_, T>, x: Var, g: &[T]) {
    acc.add(x, |dx| {
        for d in dx.iter_mut() {
            *d += g[0];
        }
    });
}
