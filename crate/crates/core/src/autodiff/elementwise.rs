use super::kernels::{sigmoid, silu, softplus};
use super::{strides, Accumulator, Op, Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind<T> {
    Sigmoid,
    Silu,
    Softplus,
    Exp,
    Neg,
    Scale(T),
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl<T: Real> UnaryKind<T> {
    fn apply(&self, x: T) -> T {
        match *self {
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Silu => silu(x),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Neg => -x,
            UnaryKind::Scale(s) => s * x,
            UnaryKind::Square => x * x,
        }
    }

    /// dy/dx given the input and the recorded output.
    fn derivative(&self, x: T, y: T) -> T {
        match *self {
            UnaryKind::Sigmoid => y * (T::one() - y),
            UnaryKind::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Exp => y,
            UnaryKind::Neg => -T::one(),
            UnaryKind::Scale(s) => s,
            UnaryKind::Square => x + x,
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn unary(&mut self, x: Var, kind: UnaryKind<T>) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, out, Op::Unary { x, kind }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Neg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, UnaryKind::Scale(s))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }

    /// Elementwise binary op with size-1 axis broadcasting (shapes are
    /// right-aligned; missing leading axes count as size 1).
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out = if self.shape(a) == self.shape(b) {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); out_shape.iter().product()];
            let map = BroadcastMap::new(&out_shape, self.shape(a), self.shape(b));
            map.for_each(|o, ia, ib| out[o] = f(av[ia], bv[ib]));
            out
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out_shape, out, Op::Binary { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// Maps each output offset to the source offsets of both operands.
struct BroadcastMap {
    out_shape: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl BroadcastMap {
    fn new(out_shape: &[usize], a: &[usize], b: &[usize]) -> Self {
        BroadcastMap {
            out_shape: out_shape.to_vec(),
            sa: broadcast_strides(a, out_shape),
            sb: broadcast_strides(b, out_shape),
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let total: usize = self.out_shape.iter().product();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..total {
            f(o, ia, ib);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                ia += self.sa[ax];
                ib += self.sb[ax];
                if idx[ax] < self.out_shape[ax] {
                    break;
                }
                ia -= self.sa[ax] * idx[ax];
                ib -= self.sb[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
}

fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let base = strides(src);
    let off = out.len() - src.len();
    (0..out.len()).map(|i| if i < off || src[i - off] == 1 { 0 } else { base[i - off] }).collect()
}

pub(super) fn unary_backward<T: Real>(acc: &mut Accumulator<'_, T>, x: Var, kind: &UnaryKind<T>, y: &[T], g: &[T]) {
    let tape = acc.tape;
    let xv = tape.value(x);
    acc.add(x, |dx| {
        for i in 0..dx.len() {
            dx[i] += g[i] * kind.derivative(xv[i], y[i]);
        }
    });
}

pub(super) fn binary_backward<T: Real>(
    acc: &mut Accumulator<'_, T>,
    a: Var,
    b: Var,
    kind: BinaryKind,
    out_shape: &[usize],
    g: &[T],
) {
    let tape = acc.tape;
    let (av, bv) = (tape.value(a), tape.value(b));
    let same = tape.shape(a) == tape.shape(b);
    let map = BroadcastMap::new(out_shape, tape.shape(a), tape.shape(b));
    let sign_b = if kind == BinaryKind::Sub { -T::one() } else { T::one() };

    acc.add(a, |da| {
        let term = |o: usize, ib: usize| match kind {
            BinaryKind::Mul => g[o] * bv[ib],
            _ => g[o],
        };
        if same {
            for o in 0..g.len() {
                da[o] += term(o, o);
            }
        } else {
            map.for_each(|o, ia, ib| da[ia] += term(o, ib));
        }
    });
    acc.add(b, |db| {
        let term = |o: usize, ia: usize| match kind {
            BinaryKind::Mul => g[o] * av[ia],
            _ => sign_b * g[o],
        };
        if same {
            for o in 0..g.len() {
                db[o] += term(o, o);
            }
        } else {
            map.for_each(|o, ia, ib| db[ib] += term(o, ia));
        }
    });
}
