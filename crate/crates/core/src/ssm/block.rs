//! Bidirectional selective-scan block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffArray, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamStore};

/// Hyperparameters of a stack of scan blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    /// Model (token) width D. Inside a model config, 0 inherits
    /// `token_dim`.
    #[serde(default)]
    pub d_model: usize,
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    #[serde(default = "default_state")]
    pub state_dim: usize,
    #[serde(default = "default_conv_width")]
    pub conv_width: usize,
    /// Δ bottleneck rank; `None` means ⌈D/16⌉.
    #[serde(default)]
    pub dt_rank: Option<usize>,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
}

fn default_expansion() -> usize {
    2
}
fn default_state() -> usize {
    16
}
fn default_conv_width() -> usize {
    4
}
fn default_blocks() -> usize {
    2
}

impl ScanConfig {
    pub fn new(d_model: usize) -> Self {
        ScanConfig {
            d_model,
            expansion: default_expansion(),
            state_dim: default_state(),
            conv_width: default_conv_width(),
            dt_rank: None,
            blocks: default_blocks(),
        }
    }

    pub fn inner(&self) -> usize {
        self.expansion * self.d_model
    }

    pub fn rank(&self) -> usize {
        self.dt_rank.unwrap_or_else(|| self.d_model.div_ceil(16))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.expansion == 0 || self.state_dim == 0 || self.conv_width == 0 || self.rank() == 0 {
            return Err(Error::Config(format!("scan config fields must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Per-direction parameters of a scan block.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionParams<T = f32> {
    /// Depthwise causal kernel, `[E·D × kw]`.
    pub conv: DiffArray<T>,
    /// Δ bottleneck, `[E·D × r]` then `[r × E·D]` plus bias `[E·D]`.
    pub dt_down: DiffArray<T>,
    pub dt_up: DiffArray<T>,
    pub dt_bias: DiffArray<T>,
    /// Input-dependent B and C projections, `[E·D × N]`.
    pub b_proj: DiffArray<T>,
    pub c_proj: DiffArray<T>,
    /// `A = −exp(a_log)`, `[E·D × N]`.
    pub a_log: DiffArray<T>,
    /// Per-channel skip, `[E·D]`.
    pub d_skip: DiffArray<T>,
}

/// All learnable quantities of one bidirectional scan block.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmBlockParams<T = f32> {
    /// `[D × 2·E·D]`, producing the main path x and the gate z.
    pub in_proj: DiffArray<T>,
    /// `[E·D × D]`.
    pub out_proj: DiffArray<T>,
    pub fwd: DirectionParams<T>,
    pub bwd: DirectionParams<T>,
}

const DIR_FIELDS: [&str; 8] = ["conv", "dt_down", "dt_up", "dt_bias", "b_proj", "c_proj", "a_log", "d_skip"];

impl<T: Real> DirectionParams<T> {
    fn init(cfg: &ScanConfig, rng: &mut ChaCha8Rng) -> Self {
        let (e, n, r, kw) = (cfg.inner(), cfg.state_dim, cfg.rank(), cfg.conv_width);
        // Δ initialised log-uniform in [1e-3, 1e-1]; bias is softplus⁻¹(Δ).
        let dt_bias = DiffArray::from_fn(&[e], |_| {
            let log_dt = rng.random_range(1e-3f64.ln()..=1e-1f64.ln());
            let dt = log_dt.exp();
            T::lit(dt + (-(-dt).exp_m1()).ln())
        });
        DirectionParams {
            conv: uniform(&[e, kw], 1.0 / (kw as f64).sqrt(), rng),
            dt_down: uniform(&[e, r], 1.0 / (e as f64).sqrt(), rng),
            dt_up: uniform(&[r, e], 1.0 / (r as f64).sqrt(), rng),
            dt_bias,
            b_proj: uniform(&[e, n], 1.0 / (e as f64).sqrt(), rng),
            c_proj: uniform(&[e, n], 1.0 / (e as f64).sqrt(), rng),
            // −A rows are 1..N
            a_log: DiffArray::from_fn(&[e, n], |i| T::lit(((i % n) as f64 + 1.0).ln())),
            d_skip: DiffArray::full(&[e], T::one()),
        }
    }

    fn fields(&self) -> [&DiffArray<T>; 8] {
        [&self.conv, &self.dt_down, &self.dt_up, &self.dt_bias, &self.b_proj, &self.c_proj, &self.a_log, &self.d_skip]
    }

    fn from_store(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let get = |f: &str| store.get(&format!("{prefix}.{f}")).cloned();
        Ok(DirectionParams {
            conv: get("conv")?,
            dt_down: get("dt_down")?,
            dt_up: get("dt_up")?,
            dt_bias: get("dt_bias")?,
            b_proj: get("b_proj")?,
            c_proj: get("c_proj")?,
            a_log: get("a_log")?,
            d_skip: get("d_skip")?,
        })
    }

    fn validate(&self, cfg: &ScanConfig, which: &str) -> Result<()> {
        let (e, n, r, kw) = (cfg.inner(), cfg.state_dim, cfg.rank(), cfg.conv_width);
        let expected: [&[usize]; 8] = [&[e, kw], &[e, r], &[r, e], &[e], &[e, n], &[e, n], &[e, n], &[e]];
        for ((field, arr), want) in DIR_FIELDS.iter().zip(self.fields()).zip(expected) {
            if arr.shape() != want {
                return Err(Error::shape(format!("{which}.{field}: expected {want:?}, got {:?}", arr.shape())));
            }
        }
        Ok(())
    }
}

impl<T: Real> SsmBlockParams<T> {
    pub fn init(cfg: &ScanConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, e) = (cfg.d_model, cfg.inner());
        SsmBlockParams {
            in_proj: uniform(&[d, 2 * e], 1.0 / (d as f64).sqrt(), rng),
            out_proj: uniform(&[e, d], 1.0 / (e as f64).sqrt(), rng),
            fwd: DirectionParams::init(cfg, rng),
            bwd: DirectionParams::init(cfg, rng),
        }
    }

    pub fn validate(&self, cfg: &ScanConfig) -> Result<()> {
        let (d, e) = (cfg.d_model, cfg.inner());
        if self.in_proj.shape() != [d, 2 * e] || self.out_proj.shape() != [e, d] {
            return Err(Error::shape(format!(
                "block projections {:?}/{:?} do not match D={d}, E·D={e}",
                self.in_proj.shape(),
                self.out_proj.shape()
            )));
        }
        self.fwd.validate(cfg, "fwd")?;
        self.bwd.validate(cfg, "bwd")
    }

    /// Same block with forward and backward direction parameters exchanged.
    pub fn swapped(&self) -> Self {
        SsmBlockParams {
            in_proj: self.in_proj.clone(),
            out_proj: self.out_proj.clone(),
            fwd: self.bwd.clone(),
            bwd: self.fwd.clone(),
        }
    }

    /// Adds the block's tensors under `prefix` (e.g. `vim.0`).
    pub fn register(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.in_proj"), self.in_proj.clone())?;
        store.insert(format!("{prefix}.out_proj"), self.out_proj.clone())?;
        for (dir, p) in [("fwd", &self.fwd), ("bwd", &self.bwd)] {
            for (field, arr) in DIR_FIELDS.iter().zip(p.fields()) {
                store.insert(format!("{prefix}.{dir}.{field}"), arr.clone())?;
            }
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(SsmBlockParams {
            in_proj: store.get(&format!("{prefix}.in_proj"))?.clone(),
            out_proj: store.get(&format!("{prefix}.out_proj"))?.clone(),
            fwd: DirectionParams::from_store(store, &format!("{prefix}.fwd"))?,
            bwd: DirectionParams::from_store(store, &format!("{prefix}.bwd"))?,
        })
    }
}

/// Tape handles of one direction.
#[derive(Debug, Clone, Copy)]
pub struct DirectionVars {
    pub conv: Var,
    pub dt_down: Var,
    pub dt_up: Var,
    pub dt_bias: Var,
    pub b_proj: Var,
    pub c_proj: Var,
    pub a_log: Var,
    pub d_skip: Var,
}

/// Tape handles of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub in_proj: Var,
    pub out_proj: Var,
    pub fwd: DirectionVars,
    pub bwd: DirectionVars,
}

impl DirectionVars {
    fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        let get = |f: &str| bound.get(&format!("{prefix}.{f}"));
        Ok(DirectionVars {
            conv: get("conv")?,
            dt_down: get("dt_down")?,
            dt_up: get("dt_up")?,
            dt_bias: get("dt_bias")?,
            b_proj: get("b_proj")?,
            c_proj: get("c_proj")?,
            a_log: get("a_log")?,
            d_skip: get("d_skip")?,
        })
    }

    fn record<T: Real>(tape: &mut Tape<T>, p: &DirectionParams<T>, grad: bool) -> Self {
        let mut leaf = |a: &DiffArray<T>| tape.leaf(&a.clone().with_grad(grad));
        DirectionVars {
            conv: leaf(&p.conv),
            dt_down: leaf(&p.dt_down),
            dt_up: leaf(&p.dt_up),
            dt_bias: leaf(&p.dt_bias),
            b_proj: leaf(&p.b_proj),
            c_proj: leaf(&p.c_proj),
            a_log: leaf(&p.a_log),
            d_skip: leaf(&p.d_skip),
        }
    }
}

impl BlockVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(BlockVars {
            in_proj: bound.get(&format!("{prefix}.in_proj"))?,
            out_proj: bound.get(&format!("{prefix}.out_proj"))?,
            fwd: DirectionVars::from_bound(bound, &format!("{prefix}.fwd"))?,
            bwd: DirectionVars::from_bound(bound, &format!("{prefix}.bwd"))?,
        })
    }

    /// Records a standalone block's parameters as tape leaves.
    pub fn record<T: Real>(tape: &mut Tape<T>, p: &SsmBlockParams<T>, grad: bool) -> Self {
        let in_proj = tape.leaf(&p.in_proj.clone().with_grad(grad));
        let out_proj = tape.leaf(&p.out_proj.clone().with_grad(grad));
        BlockVars {
            in_proj,
            out_proj,
            fwd: DirectionVars::record(tape, &p.fwd, grad),
            bwd: DirectionVars::record(tape, &p.bwd, grad),
        }
    }
}

/// One scan direction over `x: [B×L×E·D]`. `x` is already in scan order.
pub fn scan_direction<T: Real>(tape: &mut Tape<T>, x: Var, p: &DirectionVars) -> Result<Var> {
    let xt = tape.permute(x, &[0, 2, 1])?;
    let conv = tape.conv1d_causal(xt, p.conv)?;
    let conv = tape.permute(conv, &[0, 2, 1])?;
    let u = tape.silu(conv);

    let low = tape.linear(u, p.dt_down, None)?;
    let dt = tape.linear(low, p.dt_up, Some(p.dt_bias))?;
    let delta = tape.softplus(dt);
    let b = tape.linear(u, p.b_proj, None)?;
    let c = tape.linear(u, p.c_proj, None)?;
    let a = tape.exp(p.a_log);
    let a = tape.neg(a);
    tape.selective_scan(u, delta, a, b, c, p.d_skip)
}

/// Bidirectional block over `tokens: [B×L×D]`:
///
/// ```text
/// x, z   = split(in_proj(tokens))
/// y_fwd  = scan_fwd(x)
/// y_bwd  = reverse(scan_bwd(reverse(x)))
/// out    = out_proj(((y_fwd + y_bwd) / 2) ⊙ silu(z)) + tokens
/// ```
pub fn mamba_block_forward<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    vars: &BlockVars,
    cfg: &ScanConfig,
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model {
        return Err(Error::shape(format!("scan block expects [B, L, {}] tokens, got {shape:?}", cfg.d_model)));
    }
    let e = cfg.inner();
    let xz = tape.linear(tokens, vars.in_proj, None)?;
    let x = tape.slice(xz, 2, 0, e)?;
    let z = tape.slice(xz, 2, e, e)?;

    let y_fwd = scan_direction(tape, x, &vars.fwd)?;
    let x_rev = tape.flip(x, 1)?;
    let y_bwd = scan_direction(tape, x_rev, &vars.bwd)?;
    let y_bwd = tape.flip(y_bwd, 1)?;

    let y = tape.add(y_fwd, y_bwd)?;
    let y = tape.scale(y, T::lit(0.5));
    let gate = tape.silu(z);
    let gated = tape.mul(y, gate)?;
    let out = tape.linear(gated, vars.out_proj, None)?;
    tape.add(out, tokens)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::grad_check;

    fn cfg(d: usize) -> ScanConfig {
        ScanConfig { d_model: d, expansion: 2, state_dim: 3, conv_width: 3, dt_rank: Some(2), blocks: 1 }
    }

    fn params(c: &ScanConfig, seed: u64) -> SsmBlockParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SsmBlockParams::init(c, &mut rng);
        // Non-trivial skip and decay so both directions differ.
        p.fwd.d_skip = uniform(&[c.inner()], 1.0, &mut rng);
        p.bwd.a_log = uniform(&[c.inner(), c.state_dim], 1.0, &mut rng);
        p
    }

    fn tokens(b: usize, l: usize, d: usize, seed: u64) -> DiffArray<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&[b, l, d], 1.0, &mut rng)
    }

    fn forward(p: &SsmBlockParams<f64>, x: &DiffArray<f64>, c: &ScanConfig) -> DiffArray<f64> {
        let mut t = Tape::new();
        let vars = BlockVars::record(&mut t, p, false);
        let xv = t.leaf(x);
        let y = mamba_block_forward(&mut t, xv, &vars, c).unwrap();
        t.to_array(y)
    }

    fn silu(v: f64) -> f64 {
        v / (1.0 + (-v).exp())
    }

    /// Plain-loop reference of one direction over `x: [L][E]`.
    fn direction_oracle(x: &[Vec<f64>], p: &DirectionParams<f64>, c: &ScanConfig) -> Vec<Vec<f64>> {
        let (e, n, r, kw) = (c.inner(), c.state_dim, c.rank(), c.conv_width);
        let l = x.len();
        let at = |a: &DiffArray<f64>, i: usize, j: usize| a.data()[i * a.shape()[1] + j];
        let u: Vec<Vec<f64>> = (0..l)
            .map(|t| {
                (0..e)
                    .map(|ch| {
                        let mut s = 0.0;
                        for j in 0..kw {
                            if t + j >= kw - 1 {
                                s += at(&p.conv, ch, j) * x[t + j - (kw - 1)][ch];
                            }
                        }
                        silu(s)
                    })
                    .collect()
            })
            .collect();
        let mut h = vec![vec![0.0; n]; e];
        let mut y = vec![vec![0.0; e]; l];
        for t in 0..l {
            let low: Vec<f64> = (0..r).map(|k| (0..e).map(|i| u[t][i] * at(&p.dt_down, i, k)).sum()).collect();
            let bt: Vec<f64> = (0..n).map(|k| (0..e).map(|i| u[t][i] * at(&p.b_proj, i, k)).sum()).collect();
            let ct: Vec<f64> = (0..n).map(|k| (0..e).map(|i| u[t][i] * at(&p.c_proj, i, k)).sum()).collect();
            for ch in 0..e {
                let pre: f64 = (0..r).map(|k| low[k] * at(&p.dt_up, k, ch)).sum::<f64>() + p.dt_bias.data()[ch];
                let dt = pre.exp().ln_1p();
                let mut out = p.d_skip.data()[ch] * u[t][ch];
                for k in 0..n {
                    let a = -at(&p.a_log, ch, k).exp();
                    h[ch][k] = (dt * a).exp() * h[ch][k] + dt * bt[k] * u[t][ch];
                    out += ct[k] * h[ch][k];
                }
                y[t][ch] = out;
            }
        }
        y
    }

    fn block_oracle(p: &SsmBlockParams<f64>, tok: &[Vec<f64>], c: &ScanConfig) -> Vec<Vec<f64>> {
        let (d, e) = (c.d_model, c.inner());
        let l = tok.len();
        let ip = |i: usize, j: usize| p.in_proj.data()[i * 2 * e + j];
        let xz: Vec<Vec<f64>> =
            tok.iter().map(|v| (0..2 * e).map(|j| (0..d).map(|i| v[i] * ip(i, j)).sum()).collect()).collect();
        let x: Vec<Vec<f64>> = xz.iter().map(|v| v[..e].to_vec()).collect();
        let yf = direction_oracle(&x, &p.fwd, c);
        let rev: Vec<Vec<f64>> = x.iter().rev().cloned().collect();
        let yb = direction_oracle(&rev, &p.bwd, c);
        (0..l)
            .map(|t| {
                let g: Vec<f64> =
                    (0..e).map(|ch| 0.5 * (yf[t][ch] + yb[l - 1 - t][ch]) * silu(xz[t][e + ch])).collect();
                (0..d).map(|j| tok[t][j] + (0..e).map(|i| g[i] * p.out_proj.data()[i * d + j]).sum::<f64>()).collect()
            })
            .collect()
    }

    #[test]
    fn matches_the_plain_loop_oracle() {
        let c = cfg(4);
        let p = params(&c, 1);
        let x = tokens(2, 7, 4, 2);
        let got = forward(&p, &x, &c);
        for b in 0..2 {
            let tok: Vec<Vec<f64>> = (0..7).map(|t| (0..4).map(|j| x.at(&[b, t, j])).collect()).collect();
            let want = block_oracle(&p, &tok, &c);
            for t in 0..7 {
                for j in 0..4 {
                    assert!((got.at(&[b, t, j]) - want[t][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_out_projection_is_the_identity() {
        let c = cfg(4);
        let mut p = params(&c, 3);
        p.out_proj = DiffArray::zeros(&[c.inner(), 4]);
        let x = tokens(1, 5, 4, 4);
        assert_eq!(forward(&p, &x, &c), x);
    }

    fn reverse_tokens(x: &DiffArray<f64>) -> DiffArray<f64> {
        let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        DiffArray::from_fn(&[b, l, d], |i| {
            let (bi, t, j) = (i / (l * d), (i / d) % l, i % d);
            x.at(&[bi, l - 1 - t, j])
        })
    }

    #[test]
    fn reversal_with_swapped_directions_is_symmetric() {
        let c = cfg(4);
        let p = params(&c, 5);
        let x = tokens(2, 9, 4, 6);
        let lhs = forward(&p.swapped(), &reverse_tokens(&x), &c);
        let rhs = reverse_tokens(&forward(&p, &x, &c));
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn palindrome_with_tied_directions_stays_palindromic() {
        let c = cfg(4);
        let mut p = params(&c, 7);
        p.bwd = p.fwd.clone();
        let half = tokens(1, 4, 4, 8);
        let x = DiffArray::from_fn(&[1, 7, 4], |i| {
            let (t, j) = (i / 4, i % 4);
            half.at(&[0, t.min(6 - t), j])
        });
        let y = forward(&p, &x, &c);
        assert_eq!(y, reverse_tokens(&y));
    }

    #[test]
    fn block_passes_grad_check() {
        // Some coordinates have near-zero gradients, where the 1e-6 floor
        // would magnify rounding noise of a smaller step.
        let c = cfg(4);
        let p = params(&c, 9);
        let x = tokens(1, 6, 4, 10);
        let err = grad_check(
            |t, v| {
                let vars = BlockVars::record(t, &p, false);
                let y = mamba_block_forward(t, v, &vars, &c)?;
                let y = t.square(y);
                Ok(t.sum(y))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let err = grad_check(
            |t, v| {
                let mut vars = BlockVars::record(t, &p, false);
                vars.bwd.a_log = v;
                let xv = t.leaf(&x);
                let y = mamba_block_forward(t, xv, &vars, &c)?;
                let y = t.square(y);
                Ok(t.sum(y))
            },
            &p.bwd.a_log,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn initial_decay_is_negative_and_step_sizes_in_range() {
        let c = ScanConfig::new(32);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = SsmBlockParams::<f64>::init(&c, &mut rng);
        assert!(p.fwd.a_log.data().iter().all(|&v| -v.exp() < 0.0));
        for &b in p.fwd.dt_bias.data() {
            let dt = b.exp().ln_1p();
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
        assert_eq!(c.rank(), 2);
        p.validate(&c).unwrap();
        assert!(p.validate(&ScanConfig::new(16)).is_err());
    }

    #[test]
    fn store_round_trip_and_token_width_check() {
        let c = cfg(4);
        let p = params(&c, 12);
        let mut store = ParamStore::new();
        p.register(&mut store, "vim.0").unwrap();
        assert_eq!(store.len(), 2 + 2 * DIR_FIELDS.len());
        assert!(store.contains("vim.0.bwd.a_log"));
        assert_eq!(SsmBlockParams::from_store(&store, "vim.0").unwrap(), p);
        let mut t = Tape::new();
        let vars = BlockVars::record(&mut t, &p, false);
        let bad = t.leaf(&tokens(1, 3, 5, 0));
        assert!(matches!(mamba_block_forward(&mut t, bad, &vars, &c), Err(Error::Shape(_))));
    }
}
