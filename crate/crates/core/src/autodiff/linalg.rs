use super::kernels::{gemm, gemm_nt_acc, gemm_tn_acc};
use super::{Accumulator, Op, Real, Tape, Var};
use crate::error::{Error, Result};

impl<T: Real> Tape<T> {
    /// Matrix product of `[M×K]` and `[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm(self.value(a), self.value(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Applies `w: [K×N]` to the last axis of `x: [..., K]`, plus an optional
    /// bias of length N.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| Error::shape("linear on rank-0 input"))?;
        let rows = shape.iter().product::<usize>() / k;
        let flat = self.reshape(x, vec![rows, k])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = bias {
            y = self.add(y, b)?;
        }
        let n = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = n;
        self.reshape(y, out_shape)
    }
}

pub(super) fn matmul_backward<T: Real>(
    acc: &mut Accumulator<'_, T>,
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
    g: &[T],
) {
    let tape = acc.tape;
    // dA = G · Bᵀ
    acc.add(a, |da| gemm_nt_acc(g, tape.value(b), da, m, n, k));
    // dB = Aᵀ · G
    acc.add(b, |db| gemm_tn_acc(tape.value(a), g, db, k, m, n));
}
