//! Empirical complexity probe: selective scan vs naive softmax attention.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::scan::{scan_sequence, ScanDims};
use crate::autodiff::kernels::softplus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Scan channels C.
    pub channels: usize,
    /// Scan state size N.
    pub state: usize,
    /// Head width of the attention reference.
    pub attn_dim: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { channels: 64, state: 16, attn_dim: 32, repeats: 5, warmup: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeRow {
    pub length: usize,
    pub scan_median_s: f64,
    pub attention_median_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    /// Least-squares slope of ln(time) against ln(L).
    pub scan_slope: f64,
    pub attention_slope: f64,
}

impl ProbeReport {
    /// CSV with header `length,scan_median_s,attention_median_s`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "length,scan_median_s,attention_median_s")?;
        for r in &self.rows {
            writeln!(out, "{},{:e},{:e}", r.length, r.scan_median_s, r.attention_median_s)?;
        }
        Ok(())
    }
}

/// Floating point operations of one scan over `dims`: eight per state
/// element (discretize, update, read-out) and two per channel (skip term).
pub fn scan_flops(dims: ScanDims) -> u64 {
    (dims.len * dims.channels * (8 * dims.state + 2)) as u64
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Naive single-head attention `softmax(QKᵀ/√d)·V` with a materialised
/// `L×L` score matrix. `q, k, v: [L×d]`.
pub fn naive_attention(q: &[f32], k: &[f32], v: &[f32], len: usize, dim: usize) -> Vec<f32> {
    let scale = 1.0 / (dim as f32).sqrt();
    let mut scores = vec![0.0f32; len * len];
    for i in 0..len {
        let qi = &q[i * dim..(i + 1) * dim];
        let row = &mut scores[i * len..(i + 1) * len];
        for (j, s) in row.iter_mut().enumerate() {
            let kj = &k[j * dim..(j + 1) * dim];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        for s in row.iter_mut() {
            *s /= z;
        }
    }
    let mut out = vec![0.0f32; len * dim];
    for i in 0..len {
        let orow = &mut out[i * dim..(i + 1) * dim];
        for j in 0..len {
            let p = scores[i * len + j];
            for (o, &vj) in orow.iter_mut().zip(&v[j * dim..(j + 1) * dim]) {
                *o += p * vj;
            }
        }
    }
    out
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_median(warmup: usize, repeats: usize, mut f: impl FnMut() -> f32) -> f64 {
    let mut sink = 0.0f32;
    for _ in 0..warmup {
        sink += f();
    }
    let times = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            sink += f();
            start.elapsed().as_secs_f64()
        })
        .collect();
    std::hint::black_box(sink);
    median(times)
}

/// Times the scan and the attention reference at each length (median of
/// `repeats` after `warmup` discarded runs) and fits log-log slopes.
pub fn complexity_probe(cfg: &ProbeConfig, lengths: &[usize]) -> Result<ProbeReport> {
    if lengths.len() < 3 {
        return Err(Error::Config("complexity probe needs at least 3 lengths".into()));
    }
    if cfg.repeats == 0 {
        return Err(Error::Config("complexity probe needs repeats ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rand_vec = |n: usize, lo: f32, hi: f32| -> Vec<f32> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let (ch, ns, d) = (cfg.channels, cfg.state, cfg.attn_dim);
    let a: Vec<f32> = (0..ch * ns).map(|i| -((i % ns) as f32 + 1.0)).collect();
    let dskip = vec![1.0f32; ch];

    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let dims = ScanDims { len, channels: ch, state: ns };
        let u = rand_vec(len * ch, -1.0, 1.0);
        let delta: Vec<f32> = rand_vec(len * ch, -4.0, 0.0).into_iter().map(softplus).collect();
        let b = rand_vec(len * ns, -1.0, 1.0);
        let c = rand_vec(len * ns, -1.0, 1.0);
        let scan_t = time_median(cfg.warmup, cfg.repeats, || {
            let (y, _) = scan_sequence(&u, &delta, &a, &b, &c, &dskip, dims).expect("consistent dims");
            y[len * ch - 1]
        });

        let q = rand_vec(len * d, -1.0, 1.0);
        let k = rand_vec(len * d, -1.0, 1.0);
        let v = rand_vec(len * d, -1.0, 1.0);
        let attn_t = time_median(cfg.warmup, cfg.repeats, || naive_attention(&q, &k, &v, len, d)[0]);
        log::info!("L={len}: scan {scan_t:.3e}s, attention {attn_t:.3e}s");
        rows.push(ProbeRow { length: len, scan_median_s: scan_t, attention_median_s: attn_t });
    }
    let ls: Vec<f64> = rows.iter().map(|r| r.length as f64).collect();
    let scan_slope = loglog_slope(&ls, &rows.iter().map(|r| r.scan_median_s).collect::<Vec<_>>());
    let attention_slope = loglog_slope(&ls, &rows.iter().map(|r| r.attention_median_s).collect::<Vec<_>>());
    Ok(ProbeReport { rows, scan_slope, attention_slope })
}
