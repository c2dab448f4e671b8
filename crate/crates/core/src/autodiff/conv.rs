use super::kernels::{col2im_acc, gemm_acc, gemm_nt_acc, gemm_tn_acc, im2col, PlaneGeom};
use super::{Accumulator, Op, Real, Tape, Var};
use crate::error::{Error, Result};

/// Resolved geometry of a 2-D convolution, NCHW layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }

    fn depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn plane(&self) -> PlaneGeom {
        PlaneGeom {
            channels: self.cin_g(),
            h: self.h,
            w: self.w,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            out_h: self.out_h,
            out_w: self.out_w,
        }
    }
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `x: [B×C×H×W]` with `k: [O×(C/g)×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let geom = conv2d_geometry(self.shape(x), self.shape(k), stride, pad, groups)?;
        let out = conv2d_forward(self.value(x), self.value(k), &geom);
        let rg = self.any_grad(&[x, k]);
        Ok(self.push(vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w], out, Op::Conv2d { x, k, geom }, rg))
    }

    /// Depthwise causal 1-D convolution of `x: [B×D×L]` with `k: [D×kw]`,
    /// left-padded with `kw − 1` zeros so position t sees only inputs ≤ t.
    pub fn conv1d_causal(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 2 || sk[0] != sx[1] {
            return Err(Error::shape(format!("conv1d_causal of {sx:?} with kernel {sk:?}")));
        }
        let (b, d, l, kw) = (sx[0], sx[1], sx[2], sk[1]);
        if kw < 1 {
            return Err(Error::shape("conv1d_causal kernel width must be ≥ 1"));
        }
        let (xv, kv) = (self.value(x), self.value(k));
        let mut out = vec![T::zero(); b * d * l];
        for bi in 0..b {
            for di in 0..d {
                let row = &xv[(bi * d + di) * l..(bi * d + di + 1) * l];
                let taps = &kv[di * kw..(di + 1) * kw];
                let dst = &mut out[(bi * d + di) * l..(bi * d + di + 1) * l];
                for (t, o) in dst.iter_mut().enumerate() {
                    let mut s = T::zero();
                    for (j, &kj) in taps.iter().enumerate() {
                        // tap j reads x[t - (kw-1) + j]
                        if let Some(src) = (t + j).checked_sub(kw - 1) {
                            s += kj * row[src];
                        }
                    }
                    *o = s;
                }
            }
        }
        let rg = self.any_grad(&[x, k]);
        Ok(self.push(sx, out, Op::Conv1dCausal { x, k }, rg))
    }
}

pub(crate) fn conv2d_geometry(
    sx: &[usize],
    sk: &[usize],
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Conv2dGeometry> {
    if sx.len() != 4 || sk.len() != 4 {
        return Err(Error::shape(format!("conv2d needs rank-4 input and kernel, got {sx:?} and {sk:?}")));
    }
    if groups == 0 || stride == 0 {
        return Err(Error::shape("conv2d stride and groups must be positive"));
    }
    let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
    let (o, cg, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
    if c % groups != 0 || o % groups != 0 {
        return Err(Error::shape(format!("channels {c} → {o} not divisible by {groups} groups")));
    }
    if cg != c / groups {
        return Err(Error::shape(format!("kernel expects {cg} channels per group, input provides {}", c / groups)));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape(format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * pad, w + 2 * pad)));
    }
    Ok(Conv2dGeometry {
        batch,
        in_channels: c,
        out_channels: o,
        groups,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        out_h: (h + 2 * pad - kh) / stride + 1,
        out_w: (w + 2 * pad - kw) / stride + 1,
    })
}

fn conv2d_forward<T: Real>(x: &[T], k: &[T], g: &Conv2dGeometry) -> Vec<T> {
    let (hw, ohw) = (g.h * g.w, g.out_h * g.out_w);
    let mut out = vec![T::zero(); g.batch * g.out_channels * ohw];
    if g.depthwise() {
        for b in 0..g.batch {
            for c in 0..g.in_channels {
                let plane = &x[(b * g.in_channels + c) * hw..][..hw];
                let taps = &k[c * g.kh * g.kw..][..g.kh * g.kw];
                let dst = &mut out[(b * g.out_channels + c) * ohw..][..ohw];
                depthwise_plane(plane, taps, dst, g);
            }
        }
        return out;
    }
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let kcols = cin_g * g.kh * g.kw;
    let plane = g.plane();
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let xs = &x[(b * g.in_channels + grp * cin_g) * hw..][..cin_g * hw];
            let ks = &k[grp * cout_g * kcols..][..cout_g * kcols];
            let dst = &mut out[(b * g.out_channels + grp * cout_g) * ohw..][..cout_g * ohw];
            if g.pointwise() {
                gemm_acc(ks, xs, dst, cout_g, kcols, ohw);
            } else {
                let cols = im2col(xs, &plane);
                gemm_acc(ks, &cols, dst, cout_g, kcols, ohw);
            }
        }
    }
    out
}

fn depthwise_plane<T: Real>(plane: &[T], taps: &[T], dst: &mut [T], g: &Conv2dGeometry) {
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let mut s = T::zero();
            for i in 0..g.kh {
                let iy = (oy * g.stride + i) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for j in 0..g.kw {
                    let ix = (ox * g.stride + j) as isize - g.pad as isize;
                    if ix >= 0 && (ix as usize) < g.w {
                        s += taps[i * g.kw + j] * plane[iy as usize * g.w + ix as usize];
                    }
                }
            }
            dst[oy * g.out_w + ox] = s;
        }
    }
}

pub(super) fn conv2d_backward<T: Real>(acc: &mut Accumulator<'_, T>, x: Var, k: Var, g: &Conv2dGeometry, gout: &[T]) {
    let tape = acc.tape;
    let (xv, kv) = (tape.value(x), tape.value(k));
    let (hw, ohw) = (g.h * g.w, g.out_h * g.out_w);

    if g.depthwise() {
        acc.add(k, |dk| {
            for b in 0..g.batch {
                for c in 0..g.in_channels {
                    let plane = &xv[(b * g.in_channels + c) * hw..][..hw];
                    let go = &gout[(b * g.out_channels + c) * ohw..][..ohw];
                    let dtaps = &mut dk[c * g.kh * g.kw..][..g.kh * g.kw];
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            let gv = go[oy * g.out_w + ox];
                            for i in 0..g.kh {
                                let iy = (oy * g.stride + i) as isize - g.pad as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                for j in 0..g.kw {
                                    let ix = (ox * g.stride + j) as isize - g.pad as isize;
                                    if ix >= 0 && (ix as usize) < g.w {
                                        dtaps[i * g.kw + j] += gv * plane[iy as usize * g.w + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        acc.add(x, |dx| {
            for b in 0..g.batch {
                for c in 0..g.in_channels {
                    let taps = &kv[c * g.kh * g.kw..][..g.kh * g.kw];
                    let go = &gout[(b * g.out_channels + c) * ohw..][..ohw];
                    let dplane = &mut dx[(b * g.in_channels + c) * hw..][..hw];
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            let gv = go[oy * g.out_w + ox];
                            for i in 0..g.kh {
                                let iy = (oy * g.stride + i) as isize - g.pad as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                for j in 0..g.kw {
                                    let ix = (ox * g.stride + j) as isize - g.pad as isize;
                                    if ix >= 0 && (ix as usize) < g.w {
                                        dplane[iy as usize * g.w + ix as usize] += gv * taps[i * g.kw + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        return;
    }

    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let kcols = cin_g * g.kh * g.kw;
    let plane = g.plane();
    acc.add(k, |dk| {
        for b in 0..g.batch {
            for grp in 0..g.groups {
                let xs = &xv[(b * g.in_channels + grp * cin_g) * hw..][..cin_g * hw];
                let go = &gout[(b * g.out_channels + grp * cout_g) * ohw..][..cout_g * ohw];
                let dks = &mut dk[grp * cout_g * kcols..][..cout_g * kcols];
                // dK = G · colsᵀ
                if g.pointwise() {
                    gemm_nt_acc(go, xs, dks, cout_g, ohw, kcols);
                } else {
                    let cols = im2col(xs, &plane);
                    gemm_nt_acc(go, &cols, dks, cout_g, ohw, kcols);
                }
            }
        }
    });
    acc.add(x, |dx| {
        for b in 0..g.batch {
            for grp in 0..g.groups {
                let ks = &kv[grp * cout_g * kcols..][..cout_g * kcols];
                let go = &gout[(b * g.out_channels + grp * cout_g) * ohw..][..cout_g * ohw];
                let dxs = &mut dx[(b * g.in_channels + grp * cin_g) * hw..][..cin_g * hw];
                // dcols = Kᵀ · G
                if g.pointwise() {
                    gemm_tn_acc(ks, go, dxs, kcols, cout_g, ohw);
                } else {
                    let mut dcols = vec![T::zero(); kcols * ohw];
                    gemm_tn_acc(ks, go, &mut dcols, kcols, cout_g, ohw);
                    col2im_acc(&dcols, &plane, dxs);
                }
            }
        }
    });
}

pub(super) fn conv1d_backward<T: Real>(acc: &mut Accumulator<'_, T>, x: Var, k: Var, g: &[T]) {
    let tape = acc.tape;
    let sx = tape.shape(x);
    let (b, d, l) = (sx[0], sx[1], sx[2]);
    let kw = tape.shape(k)[1];
    let (xv, kv) = (tape.value(x), tape.value(k));
    acc.add(k, |dk| {
        for bi in 0..b {
            for di in 0..d {
                let row = &xv[(bi * d + di) * l..][..l];
                let go = &g[(bi * d + di) * l..][..l];
                for t in 0..l {
                    for j in 0..kw {
                        if let Some(src) = (t + j).checked_sub(kw - 1) {
                            dk[di * kw + j] += go[t] * row[src];
                        }
                    }
                }
            }
        }
    });
    acc.add(x, |dx| {
        for bi in 0..b {
            for di in 0..d {
                let taps = &kv[di * kw..][..kw];
                let go = &g[(bi * d + di) * l..][..l];
                let drow = &mut dx[(bi * d + di) * l..][..l];
                for t in 0..l {
                    for (j, &kj) in taps.iter().enumerate() {
                        if let Some(src) = (t + j).checked_sub(kw - 1) {
                            drow[src] += go[t] * kj;
                        }
                    }
                }
            }
        }
    });
}
