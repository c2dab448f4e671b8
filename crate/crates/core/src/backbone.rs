//! EfficientNetV2-style convolutional feature extractor.
//!
//! Early stages use Fused-MBConv blocks (one 3×3 expansion convolution in
//! place of the 1×1 expand + depthwise pair), later stages use MBConv with
//! squeeze-excitation. Batch normalisation is replaced by a learnable
//! per-channel scale and bias; activations are SiLU throughout.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffArray, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{he_uniform, uniform, Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    FusedMbconv,
    Mbconv,
}

/// One stage: `repeats` blocks of the same kind; only the first may stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub block_kind: BlockKind,
    pub repeats: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub expansion: f64,
    pub se_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Width of the final 1×1 convolution.
    pub head_channels: usize,
}

/// Fully resolved geometry of a single block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockGeometry {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub expanded: usize,
    pub stride: usize,
    /// Squeeze-excitation bottleneck width, if enabled.
    pub se_width: Option<usize>,
}

impl BlockGeometry {
    pub fn residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

fn stage(kind: BlockKind, repeats: usize, out: usize, stride: usize, expansion: f64, se: f64) -> StageSpec {
    StageSpec { block_kind: kind, repeats, out_channels: out, stride, expansion, se_ratio: se }
}

/// Squeeze-excitation width: `max(1, round(ratio·C))`.
pub fn se_width(channels: usize, ratio: f64) -> usize {
    ((ratio * channels as f64).round() as usize).max(1)
}

impl BackboneConfig {
    /// Stage widths and repeats of EfficientNetV2-M; total stride 32, head 1280.
    pub fn m_like() -> Self {
        use BlockKind::*;
        BackboneConfig {
            stem_channels: 24,
            stages: vec![
                stage(FusedMbconv, 3, 24, 1, 1.0, 0.0),
                stage(FusedMbconv, 5, 48, 2, 4.0, 0.0),
                stage(FusedMbconv, 5, 80, 2, 4.0, 0.0),
                stage(Mbconv, 7, 160, 2, 4.0, 0.25),
                stage(Mbconv, 14, 176, 1, 6.0, 0.25),
                stage(Mbconv, 18, 304, 2, 6.0, 0.25),
                stage(Mbconv, 5, 512, 1, 6.0, 0.25),
            ],
            head_channels: 1280,
        }
    }

    /// Four-stage miniature; total stride 16, head 128.
    pub fn tiny() -> Self {
        use BlockKind::*;
        BackboneConfig {
            stem_channels: 16,
            stages: vec![
                stage(FusedMbconv, 1, 16, 1, 1.0, 0.0),
                stage(FusedMbconv, 1, 24, 2, 2.0, 0.0),
                stage(Mbconv, 1, 32, 2, 2.0, 0.25),
                stage(Mbconv, 1, 48, 2, 2.0, 0.25),
            ],
            head_channels: 128,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "m-like" => Ok(Self::m_like()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown backbone preset `{other}` (expected m-like or tiny)"))),
        }
    }

    /// Caps every stage at `max` repeats.
    pub fn truncate_repeats(mut self, max: usize) -> Self {
        for s in &mut self.stages {
            s.repeats = s.repeats.min(max.max(1));
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.head_channels == 0 || self.stages.is_empty() {
            return Err(Error::Config("backbone needs a stem, stages and a head".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.repeats == 0 || s.out_channels == 0 {
                return Err(Error::Config(format!("stage {i}: repeats and channels must be ≥ 1")));
            }
            if s.stride != 1 && s.stride != 2 {
                return Err(Error::Config(format!("stage {i}: stride must be 1 or 2")));
            }
            if s.expansion < 1.0 || !(0.0..=1.0).contains(&s.se_ratio) {
                return Err(Error::Config(format!("stage {i}: expansion ≥ 1 and se_ratio in [0,1] required")));
            }
        }
        Ok(())
    }

    /// `2^(number of stride-2 layers, stem included)`.
    pub fn total_stride(&self) -> usize {
        2 * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn blocks(&self) -> Vec<BlockGeometry> {
        let mut out = Vec::new();
        let mut c = self.stem_channels;
        for s in &self.stages {
            for r in 0..s.repeats {
                let expanded = ((c as f64) * s.expansion).round() as usize;
                out.push(BlockGeometry {
                    kind: s.block_kind,
                    in_channels: c,
                    out_channels: s.out_channels,
                    expanded,
                    stride: if r == 0 { s.stride } else { 1 },
                    se_width: (s.se_ratio > 0.0).then(|| se_width(expanded, s.se_ratio)),
                });
                c = s.out_channels;
            }
        }
        out
    }

    pub fn last_stage_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.out_channels)
    }

    /// Scalar parameter count, computed from the configuration alone.
    pub fn param_count(&self) -> usize {
        let conv_bn = |cin: usize, cout: usize, k: usize| cout * cin * k * k + 2 * cout;
        let mut n = conv_bn(3, self.stem_channels, 3);
        for b in self.blocks() {
            n += match b.kind {
                BlockKind::FusedMbconv => conv_bn(b.in_channels, b.expanded, 3),
                BlockKind::Mbconv => conv_bn(b.in_channels, b.expanded, 1) + b.expanded * 9 + 2 * b.expanded,
            };
            if let Some(r) = b.se_width {
                n += b.expanded * r + r + r * b.expanded + b.expanded;
            }
            n += conv_bn(b.expanded, b.out_channels, 1);
        }
        n + conv_bn(self.last_stage_channels(), self.head_channels, 1)
    }

    /// He-uniform convolutions, unit scales (zero for the projection of
    /// residual blocks), zero biases.
    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.validate()?;
        let mut conv_bn =
            |store: &mut ParamStore<T>, prefix: &str, cin_g: usize, cout: usize, k: usize| -> Result<()> {
                store.insert(format!("{prefix}.conv"), he_uniform(&[cout, cin_g, k, k], cin_g * k * k, rng))?;
                store.insert(format!("{prefix}.scale"), DiffArray::full(&[cout], T::one()))?;
                store.insert(format!("{prefix}.bias"), DiffArray::zeros(&[cout]))
            };
        conv_bn(store, "stem.0", 3, self.stem_channels, 3)?;
        let blocks = self.blocks();
        for (i, b) in blocks.iter().enumerate() {
            let p = format!("backbone.{i}");
            match b.kind {
                BlockKind::FusedMbconv => conv_bn(store, &format!("{p}.expand"), b.in_channels, b.expanded, 3)?,
                BlockKind::Mbconv => {
                    conv_bn(store, &format!("{p}.expand"), b.in_channels, b.expanded, 1)?;
                    conv_bn(store, &format!("{p}.dw"), 1, b.expanded, 3)?;
                }
            }
            conv_bn(store, &format!("{p}.project"), b.expanded, b.out_channels, 1)?;
            // Without normalisation, residual branches at full scale compound
            // the activation variance block over block; start them at zero.
            if b.residual() {
                *store.get_mut(&format!("{p}.project.scale")).expect("just inserted") =
                    DiffArray::zeros(&[b.out_channels]);
            }
        }
        conv_bn(store, "backbone_head.0", self.last_stage_channels(), self.head_channels, 1)?;
        // SE layers use the default linear initialisation.
        for (i, b) in blocks.iter().enumerate() {
            if let Some(r) = b.se_width {
                let p = format!("backbone.{i}.se");
                let (e, rb, eb) = (b.expanded, 1.0 / (b.expanded as f64).sqrt(), 1.0 / (r as f64).sqrt());
                store.insert(format!("{p}.reduce_w"), uniform(&[e, r], rb, rng))?;
                store.insert(format!("{p}.reduce_b"), DiffArray::zeros(&[r]))?;
                store.insert(format!("{p}.expand_w"), uniform(&[r, e], eb, rng))?;
                store.insert(format!("{p}.expand_b"), DiffArray::zeros(&[e]))?;
            }
        }
        Ok(())
    }
}

/// Tape handles of a convolution followed by per-channel scale and bias.
#[derive(Debug, Clone, Copy)]
pub struct ConvAffineVars {
    pub conv: Var,
    pub scale: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SeVars {
    pub reduce_w: Var,
    pub reduce_b: Var,
    pub expand_w: Var,
    pub expand_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MbBlockVars {
    pub expand: ConvAffineVars,
    /// Depthwise stage; MBConv only.
    pub depthwise: Option<ConvAffineVars>,
    pub se: Option<SeVars>,
    pub project: ConvAffineVars,
}

impl ConvAffineVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(ConvAffineVars {
            conv: bound.get(&format!("{prefix}.conv"))?,
            scale: bound.get(&format!("{prefix}.scale"))?,
            bias: bound.get(&format!("{prefix}.bias"))?,
        })
    }
}

impl SeVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(SeVars {
            reduce_w: bound.get(&format!("{prefix}.reduce_w"))?,
            reduce_b: bound.get(&format!("{prefix}.reduce_b"))?,
            expand_w: bound.get(&format!("{prefix}.expand_w"))?,
            expand_b: bound.get(&format!("{prefix}.expand_b"))?,
        })
    }
}

impl MbBlockVars {
    pub fn from_bound(bound: &Bound, index: usize, geom: &BlockGeometry) -> Result<Self> {
        let p = format!("backbone.{index}");
        Ok(MbBlockVars {
            expand: ConvAffineVars::from_bound(bound, &format!("{p}.expand"))?,
            depthwise: match geom.kind {
                BlockKind::Mbconv => Some(ConvAffineVars::from_bound(bound, &format!("{p}.dw"))?),
                BlockKind::FusedMbconv => None,
            },
            se: match geom.se_width {
                Some(_) => Some(SeVars::from_bound(bound, &format!("{p}.se"))?),
                None => None,
            },
            project: ConvAffineVars::from_bound(bound, &format!("{p}.project"))?,
        })
    }
}

/// `x ⊙ scale[c] + bias[c]` over `[B×C×H×W]`.
pub fn channel_affine<T: Real>(tape: &mut Tape<T>, x: Var, scale: Var, bias: Var) -> Result<Var> {
    let c = tape.shape(x)[1];
    let s = tape.reshape(scale, vec![c, 1, 1])?;
    let b = tape.reshape(bias, vec![c, 1, 1])?;
    let y = tape.mul(x, s)?;
    tape.add(y, b)
}

fn conv_affine<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    v: &ConvAffineVars,
    stride: usize,
    groups: usize,
    act: bool,
) -> Result<Var> {
    let k = tape.shape(v.conv)[2];
    let y = tape.conv2d(x, v.conv, stride, k / 2, groups)?;
    let y = channel_affine(tape, y, v.scale, v.bias)?;
    Ok(if act { tape.silu(y) } else { y })
}

/// Squeeze-excitation: `x ⊙ σ(W₂·silu(W₁·GAP(x) + b₁) + b₂)` per channel.
pub fn se_block<T: Real>(tape: &mut Tape<T>, x: Var, v: &SeVars) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("se_block expects [B, C, H, W], got {shape:?}")));
    }
    let pooled = tape.mean(x, &[2, 3])?;
    let h = tape.linear(pooled, v.reduce_w, Some(v.reduce_b))?;
    let h = tape.silu(h);
    let g = tape.linear(h, v.expand_w, Some(v.expand_b))?;
    let g = tape.sigmoid(g);
    let g = tape.reshape(g, vec![shape[0], shape[1], 1, 1])?;
    tape.mul(x, g)
}

fn check_block_input<T: Real>(tape: &Tape<T>, x: Var, geom: &BlockGeometry) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] != geom.in_channels {
        return Err(Error::shape(format!("block expects [B, {}, H, W], got {s:?}", geom.in_channels)));
    }
    Ok(())
}

/// 3×3 expansion conv → SiLU → [SE] → 1×1 projection, plus the residual
/// when stride is 1 and widths match.
pub fn fused_mbconv<T: Real>(tape: &mut Tape<T>, x: Var, v: &MbBlockVars, geom: &BlockGeometry) -> Result<Var> {
    check_block_input(tape, x, geom)?;
    let mut h = conv_affine(tape, x, &v.expand, geom.stride, 1, true)?;
    if let Some(se) = &v.se {
        h = se_block(tape, h, se)?;
    }
    let y = conv_affine(tape, h, &v.project, 1, 1, false)?;
    if geom.residual() {
        tape.add(y, x)
    } else {
        Ok(y)
    }
}

/// 1×1 expand → depthwise 3×3 → [SE] → 1×1 projection, plus the residual
/// when stride is 1 and widths match.
pub fn mbconv<T: Real>(tape: &mut Tape<T>, x: Var, v: &MbBlockVars, geom: &BlockGeometry) -> Result<Var> {
    check_block_input(tape, x, geom)?;
    let dw = v.depthwise.as_ref().ok_or_else(|| Error::Config("mbconv block without depthwise parameters".into()))?;
    let h = conv_affine(tape, x, &v.expand, 1, 1, true)?;
    let mut h = conv_affine(tape, h, dw, geom.stride, geom.expanded, true)?;
    if let Some(se) = &v.se {
        h = se_block(tape, h, se)?;
    }
    let y = conv_affine(tape, h, &v.project, 1, 1, false)?;
    if geom.residual() {
        tape.add(y, x)
    } else {
        Ok(y)
    }
}

/// Stem → blocks → 1×1 head conv. Input `[B×3×H×W]` with H, W divisible by
/// the total stride s; output `[B×head_channels×H/s×W/s]`.
pub fn backbone_forward<T: Real>(tape: &mut Tape<T>, images: Var, cfg: &BackboneConfig, bound: &Bound) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    let stride = cfg.total_stride();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(format!("backbone expects [B, 3, H, W], got {s:?}")));
    }
    if !s[2].is_multiple_of(stride) || !s[3].is_multiple_of(stride) {
        return Err(Error::shape(format!("input {}×{} not divisible by total stride {stride}", s[2], s[3])));
    }
    let stem = ConvAffineVars::from_bound(bound, "stem.0")?;
    let mut x = conv_affine(tape, images, &stem, 2, 1, true)?;
    for (i, geom) in cfg.blocks().iter().enumerate() {
        let v = MbBlockVars::from_bound(bound, i, geom)?;
        x = match geom.kind {
            BlockKind::FusedMbconv => fused_mbconv(tape, x, &v, geom)?,
            BlockKind::Mbconv => mbconv(tape, x, &v, geom)?,
        };
    }
    let head = ConvAffineVars::from_bound(bound, "backbone_head.0")?;
    conv_affine(tape, x, &head, 1, 1, true)
}

/// True for parameters that belong to the convolutional backbone.
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("stem.") || name.starts_with("backbone.") || name.starts_with("backbone_head.")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn rand(shape: &[usize], seed: u64) -> DiffArray<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(shape, 1.0, &mut rng)
    }

    fn geometry(
        kind: BlockKind,
        c: usize,
        out: usize,
        expansion: usize,
        stride: usize,
        se: Option<usize>,
    ) -> BlockGeometry {
        BlockGeometry { kind, in_channels: c, out_channels: out, expanded: c * expansion, stride, se_width: se }
    }

    /// Parameters of block 0 with the given geometry, filled by `fill(name, shape)`.
    fn block_store(g: &BlockGeometry, mut fill: impl FnMut(&str, &[usize]) -> DiffArray<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut conv = |s: &mut ParamStore<f64>, p: &str, shape: [usize; 4]| {
            s.insert(format!("backbone.0.{p}.conv"), fill("conv", &shape)).unwrap();
            s.insert(format!("backbone.0.{p}.scale"), fill("scale", &[shape[0]])).unwrap();
            s.insert(format!("backbone.0.{p}.bias"), fill("bias", &[shape[0]])).unwrap();
        };
        match g.kind {
            BlockKind::FusedMbconv => conv(&mut s, "expand", [g.expanded, g.in_channels, 3, 3]),
            BlockKind::Mbconv => {
                conv(&mut s, "expand", [g.expanded, g.in_channels, 1, 1]);
                conv(&mut s, "dw", [g.expanded, 1, 3, 3]);
            }
        }
        conv(&mut s, "project", [g.out_channels, g.expanded, 1, 1]);
        if let Some(r) = g.se_width {
            for (n, shape) in [
                ("reduce_w", vec![g.expanded, r]),
                ("reduce_b", vec![r]),
                ("expand_w", vec![r, g.expanded]),
                ("expand_b", vec![g.expanded]),
            ] {
                s.insert(format!("backbone.0.se.{n}"), fill(n, &shape)).unwrap();
            }
        }
        s
    }

    fn identity_fill(name: &str, shape: &[usize]) -> DiffArray<f64> {
        match name {
            "conv" => DiffArray::from_fn(shape, |i| {
                let (kh, kw) = (shape[2], shape[3]);
                let (o, c, y, x) = (i / (shape[1] * kh * kw), (i / (kh * kw)) % shape[1], (i / kw) % kh, i % kw);
                let same = o == c || shape[1] == 1;
                if same && y == kh / 2 && x == kw / 2 {
                    1.0
                } else {
                    0.0
                }
            }),
            "scale" => DiffArray::full(shape, 1.0),
            _ => DiffArray::zeros(shape),
        }
    }

    fn run_block(g: &BlockGeometry, store: &ParamStore<f64>, x: &DiffArray<f64>) -> DiffArray<f64> {
        let mut t = Tape::new();
        let bound = store.bind(&mut t, |_| false);
        let v = MbBlockVars::from_bound(&bound, 0, g).unwrap();
        let xv = t.leaf(x);
        let y = match g.kind {
            BlockKind::FusedMbconv => fused_mbconv(&mut t, xv, &v, g),
            BlockKind::Mbconv => mbconv(&mut t, xv, &v, g),
        }
        .unwrap();
        t.to_array(y)
    }

    fn silu(v: f64) -> f64 {
        v / (1.0 + (-v).exp())
    }

    #[test]
    fn identity_fused_block_is_silu_plus_residual() {
        let g = geometry(BlockKind::FusedMbconv, 3, 3, 1, 1, None);
        let x = rand(&[2, 3, 5, 5], 1);
        let y = run_block(&g, &block_store(&g, identity_fill), &x);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (silu(*b) + b)).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_mbconv_block_is_double_silu_plus_residual() {
        let g = geometry(BlockKind::Mbconv, 4, 4, 1, 1, None);
        let x = rand(&[1, 4, 6, 6], 2);
        let y = run_block(&g, &block_store(&g, identity_fill), &x);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (silu(silu(*b)) + b)).abs() < 1e-14);
        }
    }

    #[test]
    fn stride_two_halves_spatial_extent() {
        for kind in [BlockKind::FusedMbconv, BlockKind::Mbconv] {
            let g = geometry(kind, 4, 6, 2, 2, Some(2));
            let mut seed = 0;
            let store = block_store(&g, |_, s| {
                seed += 1;
                rand(s, seed)
            });
            assert_eq!(run_block(&g, &store, &rand(&[1, 4, 8, 8], 3)).shape(), &[1, 6, 4, 4]);
        }
    }

    #[test]
    fn zero_weights_reduce_residual_blocks_to_the_identity() {
        for kind in [BlockKind::FusedMbconv, BlockKind::Mbconv] {
            let g = geometry(kind, 4, 4, 2, 1, Some(2));
            let store = block_store(&g, |_, s| DiffArray::zeros(s));
            let x = rand(&[1, 4, 5, 5], 4);
            assert_eq!(run_block(&g, &store, &x), x);
        }
    }

    #[test]
    fn random_blocks_match_primitive_composition() {
        let g = geometry(BlockKind::Mbconv, 3, 3, 2, 1, Some(2));
        let mut seed = 10;
        let store = block_store(&g, |_, s| {
            seed += 1;
            rand(s, seed)
        });
        let x = rand(&[2, 3, 5, 5], 5);
        let got = run_block(&g, &store, &x);

        let mut t = Tape::new();
        let p = |t: &mut Tape<f64>, n: &str| t.leaf(store.get(&format!("backbone.0.{n}")).unwrap());
        let xv = t.leaf(&x);
        let affine = |t: &mut Tape<f64>, y: Var, n: &str| {
            let c = t.shape(y)[1];
            let s = p(t, &format!("{n}.scale"));
            let s = t.reshape(s, vec![c, 1, 1]).unwrap();
            let b = p(t, &format!("{n}.bias"));
            let b = t.reshape(b, vec![c, 1, 1]).unwrap();
            let y = t.mul(y, s).unwrap();
            t.add(y, b).unwrap()
        };
        let k = p(&mut t, "expand.conv");
        let h = t.conv2d(xv, k, 1, 0, 1).unwrap();
        let h = affine(&mut t, h, "expand");
        let h = t.silu(h);
        let k = p(&mut t, "dw.conv");
        let h = t.conv2d(h, k, 1, 1, 6).unwrap();
        let h = affine(&mut t, h, "dw");
        let h = t.silu(h);
        // squeeze-excitation written out with matmuls
        let pooled = t.mean(h, &[2, 3]).unwrap();
        let w1 = p(&mut t, "se.reduce_w");
        let b1 = p(&mut t, "se.reduce_b");
        let z = t.matmul(pooled, w1).unwrap();
        let z = t.add(z, b1).unwrap();
        let z = t.silu(z);
        let w2 = p(&mut t, "se.expand_w");
        let b2 = p(&mut t, "se.expand_b");
        let z = t.matmul(z, w2).unwrap();
        let z = t.add(z, b2).unwrap();
        let z = t.sigmoid(z);
        let z = t.reshape(z, vec![2, 6, 1, 1]).unwrap();
        let h = t.mul(h, z).unwrap();
        let k = p(&mut t, "project.conv");
        let y = t.conv2d(h, k, 1, 0, 1).unwrap();
        let y = affine(&mut t, y, "project");
        let y = t.add(y, xv).unwrap();
        for (a, b) in got.data().iter().zip(t.value(y)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn se_store(c: usize, r: usize, zero_gate: bool) -> ParamStore<f64> {
        let g = geometry(BlockKind::FusedMbconv, c, c, 1, 1, Some(r));
        let mut seed = 20;
        block_store(&g, |n, s| {
            seed += 1;
            if zero_gate && n.starts_with("expand_") {
                DiffArray::zeros(s)
            } else {
                rand(s, seed)
            }
        })
    }

    fn run_se(store: &ParamStore<f64>, x: &DiffArray<f64>) -> DiffArray<f64> {
        let mut t = Tape::new();
        let bound = store.bind(&mut t, |_| false);
        let v = SeVars::from_bound(&bound, "backbone.0.se").unwrap();
        let xv = t.leaf(x);
        let y = se_block(&mut t, xv, &v).unwrap();
        t.to_array(y)
    }

    #[test]
    fn zero_gate_halves_the_input() {
        let x = rand(&[2, 4, 3, 3], 6);
        let y = run_se(&se_store(4, 1, true), &x);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b / 2.0);
        }
    }

    #[test]
    fn constant_channel_gets_a_spatially_uniform_gate() {
        let x = DiffArray::from_fn(&[1, 3, 4, 4], |i| (i / 16) as f64 + 0.5);
        let y = run_se(&se_store(3, 2, false), &x);
        for c in 0..3 {
            let ratio = y.at(&[0, c, 0, 0]) / x.at(&[0, c, 0, 0]);
            assert!(ratio > 0.0 && ratio < 1.0);
            for i in 0..16 {
                assert_eq!(y.data()[c * 16 + i], y.at(&[0, c, 0, 0]));
            }
        }
    }

    #[test]
    fn se_width_rounds_with_a_floor_of_one() {
        assert_eq!(se_width(96, 0.25), 24);
        assert_eq!(se_width(2, 0.25), 1);
        assert_eq!(se_width(10, 0.25), 3);
    }

    #[test]
    fn presets_have_the_documented_stride_and_head() {
        let m = BackboneConfig::m_like();
        assert_eq!((m.total_stride(), m.head_channels), (32, 1280));
        let t = BackboneConfig::tiny();
        assert_eq!((t.total_stride(), t.head_channels, t.stages.len()), (16, 128, 4));
        for cfg in [m, t] {
            let mut idx = 0;
            for s in &cfg.stages {
                for r in 0..s.repeats {
                    let b = cfg.blocks()[idx];
                    assert_eq!(b.stride, if r == 0 { s.stride } else { 1 });
                    idx += 1;
                }
            }
        }
        assert!(BackboneConfig::preset("l-like").is_err());
    }

    #[test]
    fn param_count_matches_initialised_store() {
        for cfg in [BackboneConfig::tiny(), BackboneConfig::m_like(), BackboneConfig::m_like().truncate_repeats(1)] {
            let mut store = ParamStore::<f32>::new();
            cfg.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(store.num_scalars(), cfg.param_count());
            assert!(store.names().iter().all(|n| is_backbone_param(n)));
        }
        assert_eq!(BackboneConfig::tiny().param_count(), BackboneConfig::tiny().param_count());
    }

    fn run_backbone(cfg: &BackboneConfig, x: &DiffArray<f32>, zero: bool) -> Result<DiffArray<f32>> {
        let mut store = ParamStore::<f32>::new();
        cfg.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1))?;
        if zero {
            for (name, a) in store.iter_mut() {
                if name.ends_with(".bias") || name.ends_with("_b") {
                    a.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let mut t = Tape::new();
        let bound = store.bind(&mut t, |_| false);
        let xv = t.leaf(x);
        let y = backbone_forward(&mut t, xv, cfg, &bound)?;
        Ok(t.to_array(y))
    }

    #[test]
    fn output_grid_is_input_over_stride() {
        let x = DiffArray::full(&[2, 3, 64, 64], 0.3f32);
        assert_eq!(run_backbone(&BackboneConfig::tiny(), &x, false).unwrap().shape(), &[2, 128, 4, 4]);
        let x = DiffArray::full(&[1, 3, 96, 32], 0.3f32);
        assert_eq!(run_backbone(&BackboneConfig::tiny(), &x, false).unwrap().shape(), &[1, 128, 6, 2]);
        let bad = DiffArray::full(&[1, 3, 72, 64], 0.3f32);
        assert!(matches!(run_backbone(&BackboneConfig::tiny(), &bad, false), Err(Error::Shape(_))));
    }

    #[test]
    fn m_like_at_224_gives_a_7x7_grid_of_1280() {
        let cfg = BackboneConfig::m_like().truncate_repeats(1);
        let x = DiffArray::full(&[1, 3, 224, 224], 0.1f32);
        assert_eq!(run_backbone(&cfg, &x, false).unwrap().shape(), &[1, 1280, 7, 7]);
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_features() {
        let x = DiffArray::zeros(&[1, 3, 32, 32]);
        let y = run_backbone(&BackboneConfig::tiny(), &x, true).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
