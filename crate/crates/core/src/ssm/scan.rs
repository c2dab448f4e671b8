//! Selective state-space scan.
//!
//! Recurrence, per channel c and state index n:
//!
//! ```text
//! Ā_t = exp(Δ_t · A)          (zero-order hold)
//! B̄_t = Δ_t · B_t             (Euler)
//! h_t = Ā_t ⊙ h_{t−1} + B̄_t ⊙ x_t
//! y_t = ⟨C_t, h_t⟩ + D ⊙ x_t
//! ```
//!
//! The scan is a single sequential pass: O(L·C·N) time and O(C·N) live state.

use crate::autodiff::{Accumulator, Op, Real, ScanSaved, Tape, Var};
use crate::error::{Error, Result};

/// Extents of a single-sequence scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Discretized transition and input matrices, each `[L×C×N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized<T> {
    pub dims: ScanDims,
    pub abar: Vec<T>,
    pub bbar: Vec<T>,
}

/// Zero-order hold on A, Euler on B.
///
/// `delta: [L×C]`, `a: [C×N]`, `b: [L×N]`. Every Δ must be strictly positive.
pub fn discretize<T: Real>(delta: &[T], a: &[T], b: &[T], dims: ScanDims) -> Result<Discretized<T>> {
    let ScanDims { len, channels, state } = dims;
    if delta.len() != len * channels || a.len() != channels * state || b.len() != len * state {
        return Err(Error::shape(format!(
            "discretize: delta {}, A {}, B {} for dims {dims:?}",
            delta.len(),
            a.len(),
            b.len()
        )));
    }
    if let Some(bad) = delta.iter().find(|&&d| !(d > T::zero())) {
        return Err(Error::Contract(format!("non-positive delta {bad:?}")));
    }
    let mut abar = Vec::with_capacity(len * channels * state);
    let mut bbar = Vec::with_capacity(len * channels * state);
    for t in 0..len {
        for c in 0..channels {
            let dt = delta[t * channels + c];
            for n in 0..state {
                abar.push((dt * a[c * state + n]).exp());
                bbar.push(dt * b[t * state + n]);
            }
        }
    }
    Ok(Discretized { dims, abar, bbar })
}

/// Carried hidden state, `[C×N]`. Scanning a sequence in consecutive chunks
/// through one `ScanState` gives exactly the same output as one full scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanState<T> {
    channels: usize,
    state: usize,
    h: Vec<T>,
}

impl<T: Real> ScanState<T> {
    pub fn new(channels: usize, state: usize) -> Self {
        ScanState { channels, state, h: vec![T::zero(); channels * state] }
    }

    pub fn hidden(&self) -> &[T] {
        &self.h
    }

    /// Advances over `len` steps. `x: [len×C]`, `abar`/`bbar: [len×C×N]`,
    /// `c_seq: [len×N]`, `d_skip: [C]`.
    pub fn scan(&mut self, x: &[T], abar: &[T], bbar: &[T], c_seq: &[T], d_skip: &[T], len: usize) -> Result<Vec<T>> {
        let (ch, ns) = (self.channels, self.state);
        if x.len() != len * ch
            || abar.len() != len * ch * ns
            || bbar.len() != len * ch * ns
            || c_seq.len() != len * ns
            || d_skip.len() != ch
        {
            return Err(Error::shape(format!(
                "selective_scan: inconsistent operand sizes for L={len}, C={ch}, N={ns}"
            )));
        }
        let mut y = vec![T::zero(); len * ch];
        for t in 0..len {
            let ct = &c_seq[t * ns..(t + 1) * ns];
            for c in 0..ch {
                let xt = x[t * ch + c];
                let base = (t * ch + c) * ns;
                let h = &mut self.h[c * ns..(c + 1) * ns];
                let mut acc = T::zero();
                for n in 0..ns {
                    h[n] = abar[base + n] * h[n] + bbar[base + n] * xt;
                    acc += ct[n] * h[n];
                }
                y[t * ch + c] = acc + d_skip[c] * xt;
            }
        }
        Ok(y)
    }
}

/// Full scan from a zero initial state. An empty sequence yields an empty
/// output.
pub fn selective_scan<T: Real>(x: &[T], disc: &Discretized<T>, c_seq: &[T], d_skip: &[T]) -> Result<Vec<T>> {
    let ScanDims { len, channels, state } = disc.dims;
    ScanState::new(channels, state).scan(x, &disc.abar, &disc.bbar, c_seq, d_skip, len)
}

/// Memory actually held by a fused scan: live state plus output, in floats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanFootprint {
    pub state_floats: usize,
    pub output_floats: usize,
}

/// Discretize-and-scan in one pass without materialising Ā or B̄.
///
/// `u, delta: [L×C]`, `a: [C×N]`, `b, c: [L×N]`, `d: [C]`. When `states`
/// is given, every h_t is written to it (`[L×C×N]`) for use by backward.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fused_scan<T: Real>(
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    dims: ScanDims,
    y: &mut [T],
    mut states: Option<&mut [T]>,
) -> ScanFootprint {
    let ScanDims { len, channels: ch, state: ns } = dims;
    let mut h = vec![T::zero(); ch * ns];
    for t in 0..len {
        let bt = &b[t * ns..(t + 1) * ns];
        let ct = &c[t * ns..(t + 1) * ns];
        for ci in 0..ch {
            let xt = u[t * ch + ci];
            let dt = delta[t * ch + ci];
            let ac = &a[ci * ns..(ci + 1) * ns];
            let hc = &mut h[ci * ns..(ci + 1) * ns];
            let mut acc = T::zero();
            for n in 0..ns {
                let abar = (dt * ac[n]).exp();
                let bbar = dt * bt[n];
                hc[n] = abar * hc[n] + bbar * xt;
                acc += ct[n] * hc[n];
            }
            y[t * ch + ci] = acc + d[ci] * xt;
            if let Some(s) = states.as_deref_mut() {
                s[(t * ch + ci) * ns..(t * ch + ci + 1) * ns].copy_from_slice(hc);
            }
        }
    }
    ScanFootprint { state_floats: h.len(), output_floats: y.len() }
}

/// Inference-only fused scan; returns the output and the floats it allocated.
#[allow(clippy::too_many_arguments)]
pub fn scan_sequence<T: Real>(
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    dims: ScanDims,
) -> Result<(Vec<T>, ScanFootprint)> {
    let ScanDims { len, channels, state } = dims;
    if u.len() != len * channels
        || delta.len() != len * channels
        || a.len() != channels * state
        || b.len() != len * state
        || c.len() != len * state
        || d.len() != channels
    {
        return Err(Error::shape(format!("scan_sequence: operand sizes do not match {dims:?}")));
    }
    let mut y = vec![T::zero(); len * channels];
    let fp = fused_scan(u, delta, a, b, c, d, dims, &mut y, None);
    Ok((y, fp))
}

impl<T: Real> Tape<T> {
    /// Batched selective scan recorded on the tape.
    ///
    /// `u, delta: [B×L×C]`, `a: [C×N]` (already negative), `b, c: [B×L×N]`,
    /// `d: [C]`; output `[B×L×C]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let su = self.shape(u).to_vec();
        let sa = self.shape(a).to_vec();
        if su.len() != 3 || sa.len() != 2 || sa[0] != su[2] {
            return Err(Error::shape(format!("selective_scan: u {su:?}, A {sa:?}")));
        }
        let (bsz, len, ch, ns) = (su[0], su[1], su[2], sa[1]);
        if self.shape(delta) != su.as_slice()
            || self.shape(b) != [bsz, len, ns]
            || self.shape(c) != [bsz, len, ns]
            || self.shape(d) != [ch]
        {
            return Err(Error::shape(format!(
                "selective_scan: delta {:?}, B {:?}, C {:?}, D {:?} inconsistent with u {su:?}, A {sa:?}",
                self.shape(delta),
                self.shape(b),
                self.shape(c),
                self.shape(d)
            )));
        }
        let dims = ScanDims { len, channels: ch, state: ns };
        let rg = self.any_grad(&[u, delta, a, b, c, d]);
        let mut y = vec![T::zero(); bsz * len * ch];
        let mut states = if rg { vec![T::zero(); bsz * len * ch * ns] } else { Vec::new() };
        {
            let (uv, dv, av, bv, cv, dd) =
                (self.value(u), self.value(delta), self.value(a), self.value(b), self.value(c), self.value(d));
            for bi in 0..bsz {
                let seq = bi * len * ch..(bi + 1) * len * ch;
                let sq = bi * len * ns..(bi + 1) * len * ns;
                let st = if rg { Some(&mut states[bi * len * ch * ns..(bi + 1) * len * ch * ns]) } else { None };
                fused_scan(&uv[seq.clone()], &dv[seq.clone()], av, &bv[sq.clone()], &cv[sq], dd, dims, &mut y[seq], st);
            }
        }
        let saved = Box::new(ScanSaved { batch: bsz, len, channels: ch, state: ns, states });
        Ok(self.push(su, y, Op::Scan { inputs: [u, delta, a, b, c, d], saved }, rg))
    }
}

pub(crate) fn scan_backward<T: Real>(acc: &mut Accumulator<'_, T>, inputs: &[Var; 6], saved: &ScanSaved<T>, gy: &[T]) {
    let [u, delta, a, b, c, d] = *inputs;
    let tape = acc.tape;
    let (uv, dv, av, bv, cv, dd) =
        (tape.value(u), tape.value(delta), tape.value(a), tape.value(b), tape.value(c), tape.value(d));
    let ScanSaved { batch, len, channels: ch, state: ns, ref states } = *saved;

    let mut du = vec![T::zero(); uv.len()];
    let mut ddelta = vec![T::zero(); dv.len()];
    let mut da = vec![T::zero(); av.len()];
    let mut db = vec![T::zero(); bv.len()];
    let mut dc = vec![T::zero(); cv.len()];
    let mut dd_skip = vec![T::zero(); dd.len()];

    let mut carry = vec![T::zero(); ch * ns];
    for bi in 0..batch {
        carry.iter_mut().for_each(|v| *v = T::zero());
        let hs = &states[bi * len * ch * ns..(bi + 1) * len * ch * ns];
        for t in (0..len).rev() {
            let row = bi * len + t;
            let bt = &bv[row * ns..(row + 1) * ns];
            let ct = &cv[row * ns..(row + 1) * ns];
            for ci in 0..ch {
                let idx = row * ch + ci;
                let g = gy[idx];
                let xt = uv[idx];
                let dt = dv[idx];
                dd_skip[ci] += g * xt;
                du[idx] += g * dd[ci];
                let h_t = &hs[(t * ch + ci) * ns..(t * ch + ci + 1) * ns];
                let h_prev =
                    if t > 0 { Some(&hs[((t - 1) * ch + ci) * ns..((t - 1) * ch + ci + 1) * ns]) } else { None };
                for n in 0..ns {
                    let an = av[ci * ns + n];
                    dc[row * ns + n] += g * h_t[n];
                    let gh = g * ct[n] + carry[ci * ns + n];
                    let abar = (dt * an).exp();
                    let hp = h_prev.map_or(T::zero(), |h| h[n]);
                    // through Ā = exp(Δ·A)
                    let g_abar = gh * hp * abar;
                    ddelta[idx] += g_abar * an;
                    da[ci * ns + n] += g_abar * dt;
                    // through B̄·x = Δ·B·x
                    ddelta[idx] += gh * bt[n] * xt;
                    db[row * ns + n] += gh * dt * xt;
                    du[idx] += gh * dt * bt[n];
                    carry[ci * ns + n] = gh * abar;
                }
            }
        }
    }
    for (v, grad) in [(u, du), (delta, ddelta), (a, da), (b, db), (c, dc), (d, dd_skip)] {
        acc.add(v, |buf| crate::autodiff::add_into(buf, &grad));
    }
}
