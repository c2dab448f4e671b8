//! The full classifier: backbone → patchify → token projection → positional
//! embedding → scan blocks → token average → linear head → sigmoid.
//!
//! Two ablation variants share the same pieces: `backbone_only` pools the
//! feature map straight into the head, `vim_only` tokenizes raw pixels into
//! 16×16 patches and skips the backbone.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels::sigmoid, DiffArray, Real, Tape, Var};
use crate::backbone::{backbone_forward, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::{normal, uniform, Bound, ParamStore};
use crate::ssm::{mamba_block_forward, BlockVars, ScanConfig, SsmBlockParams};

/// Raw-pixel patch size of the `vim_only` variant.
pub const VIM_ONLY_PATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Hybrid,
    BackboneOnly,
    VimOnly,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Hybrid => "hybrid",
            Architecture::BackboneOnly => "backbone_only",
            Architecture::VimOnly => "vim_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Backbone preset name, `m-like` or `tiny`.
    pub preset: String,
    pub architecture: Architecture,
    /// Patch size P over the feature grid.
    pub patch_size: usize,
    /// Token width D after projection.
    pub token_dim: usize,
    /// Scan stack; `d_model` must equal `token_dim`.
    pub scan: ScanConfig,
    /// Square input resolution.
    pub image_size: usize,
    /// Optional cap on backbone stage repeats.
    pub max_stage_repeats: Option<usize>,
    /// Checkpoint directory whose backbone tensors replace the random
    /// initialisation (matched by name).
    pub backbone_weights: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: "m-like".into(),
            architecture: Architecture::Hybrid,
            patch_size: 1,
            token_dim: 256,
            scan: ScanConfig::new(0),
            image_size: 224,
            max_stage_repeats: None,
            backbone_weights: None,
        }
    }
}

impl ModelConfig {
    pub fn tiny(image_size: usize, token_dim: usize) -> Self {
        ModelConfig {
            preset: "tiny".into(),
            architecture: Architecture::Hybrid,
            patch_size: 1,
            token_dim,
            scan: ScanConfig::new(token_dim),
            image_size,
            max_stage_repeats: None,
            backbone_weights: None,
        }
    }

    /// Fills an unset scan width from `token_dim`.
    pub fn resolved(mut self) -> Self {
        if self.scan.d_model == 0 {
            self.scan.d_model = self.token_dim;
        }
        self
    }

    pub fn with_architecture(mut self, arch: Architecture) -> Self {
        self.architecture = arch;
        self
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let cfg = BackboneConfig::preset(&self.preset)?;
        Ok(match self.max_stage_repeats {
            Some(m) => cfg.truncate_repeats(m),
            None => cfg,
        })
    }

    /// Side length of the token grid.
    pub fn grid(&self) -> Result<usize> {
        let (side, patch) = match self.architecture {
            Architecture::VimOnly => (self.image_size, VIM_ONLY_PATCH),
            _ => {
                let s = self.backbone()?.total_stride();
                if !self.image_size.is_multiple_of(s) {
                    return Err(Error::Config(format!(
                        "image size {} not divisible by backbone stride {s}",
                        self.image_size
                    )));
                }
                (self.image_size / s, self.patch_size)
            }
        };
        if patch == 0 || side % patch != 0 {
            return Err(Error::Config(format!("grid {side} not divisible by patch size {patch}")));
        }
        Ok(side / patch)
    }

    /// Token count T = (H/(s·P))·(W/(s·P)).
    pub fn token_count(&self) -> Result<usize> {
        let g = self.grid()?;
        Ok(g * g)
    }

    /// Width of a flattened patch before projection.
    pub fn patch_dim(&self) -> Result<usize> {
        Ok(match self.architecture {
            Architecture::VimOnly => 3 * VIM_ONLY_PATCH * VIM_ONLY_PATCH,
            _ => self.backbone()?.head_channels * self.patch_size * self.patch_size,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture != Architecture::VimOnly {
            self.backbone()?.validate()?;
        }
        if self.architecture != Architecture::BackboneOnly {
            self.scan.validate()?;
            if self.scan.d_model != self.token_dim {
                return Err(Error::Config(format!(
                    "scan d_model {} differs from token_dim {}",
                    self.scan.d_model, self.token_dim
                )));
            }
        }
        self.token_count().map(|_| ())
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if self.architecture != Architecture::VimOnly {
            self.backbone()?.init_params(&mut store, &mut rng)?;
        }
        let head_in = match self.architecture {
            Architecture::BackboneOnly => self.backbone()?.head_channels,
            _ => {
                let (pd, d) = (self.patch_dim()?, self.token_dim);
                store.insert("tok_proj.0.weight", uniform(&[pd, d], 1.0 / (pd as f64).sqrt(), &mut rng))?;
                store.insert("pos_embed.0.table", normal(&[self.token_count()?, d], 0.02, &mut rng))?;
                for i in 0..self.scan.blocks {
                    SsmBlockParams::<T>::init(&self.scan, &mut rng).register(&mut store, &format!("vim.{i}"))?;
                }
                d
            }
        };
        store.insert("classifier.0.weight", uniform(&[head_in, 1], 1.0 / (head_in as f64).sqrt(), &mut rng))?;
        store.insert("classifier.0.bias", DiffArray::zeros(&[1]))?;
        Ok(store)
    }
}

/// Splits `[B×C×h×w]` into non-overlapping P×P patches in row-major patch
/// order, each flattened channel-first: `[B × (h/P·w/P) × (C·P²)]`.
pub fn patchify<T: Real>(tape: &mut Tape<T>, fmap: Var, p: usize) -> Result<Var> {
    let s = tape.shape(fmap).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("patchify expects [B, C, h, w], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("grid {h}×{w} not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    // [B, C, gh, P, gw, P] → [B, gh, gw, C, P, P]
    let x = tape.reshape(fmap, vec![b, c, gh, p, gw, p])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(x, vec![b, gh * gw, c * p * p])
}

/// Per-token linear map `[B×T×K] · [K×D]`.
pub fn project_tokens<T: Real>(tape: &mut Tape<T>, tokens: Var, w: Var) -> Result<Var> {
    let (st, sw) = (tape.shape(tokens).to_vec(), tape.shape(w).to_vec());
    if st.len() != 3 || sw.len() != 2 || st[2] != sw[0] {
        return Err(Error::shape(format!("project_tokens: tokens {st:?}, weight {sw:?}")));
    }
    tape.linear(tokens, w, None)
}

/// Broadcast addition of a `[T×D]` table over the batch.
pub fn add_positional<T: Real>(tape: &mut Tape<T>, tokens: Var, pos: Var) -> Result<Var> {
    let (st, sp) = (tape.shape(tokens).to_vec(), tape.shape(pos).to_vec());
    if st.len() != 3 || sp.len() != 2 || st[1..] != sp[..] {
        return Err(Error::shape(format!("positional table {sp:?} does not match tokens {st:?}")));
    }
    tape.add(tokens, pos)
}

fn stack_forward<T: Real>(tape: &mut Tape<T>, tokens: Var, cfg: &ModelConfig, bound: &Bound) -> Result<Var> {
    let proj = project_tokens(tape, tokens, bound.get("tok_proj.0.weight")?)?;
    let mut x = add_positional(tape, proj, bound.get("pos_embed.0.table")?)?;
    for i in 0..cfg.scan.blocks {
        let vars = BlockVars::from_bound(bound, &format!("vim.{i}"))?;
        x = mamba_block_forward(tape, x, &vars, &cfg.scan)?;
    }
    Ok(x)
}

/// Pre-sigmoid scores `[B]` for `images: [B×3×H×W]`.
pub fn logits_forward<T: Real>(tape: &mut Tape<T>, images: Var, cfg: &ModelConfig, bound: &Bound) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::shape(format!("model expects [B, 3, {0}, {0}], got {s:?}", cfg.image_size)));
    }
    let batch = s[0];
    let pooled = match cfg.architecture {
        Architecture::Hybrid => {
            let fmap = backbone_forward(tape, images, &cfg.backbone()?, bound)?;
            let tokens = patchify(tape, fmap, cfg.patch_size)?;
            let x = stack_forward(tape, tokens, cfg, bound)?;
            tape.mean(x, &[1])?
        }
        Architecture::BackboneOnly => {
            let fmap = backbone_forward(tape, images, &cfg.backbone()?, bound)?;
            tape.mean(fmap, &[2, 3])?
        }
        Architecture::VimOnly => {
            let tokens = patchify(tape, images, VIM_ONLY_PATCH)?;
            let x = stack_forward(tape, tokens, cfg, bound)?;
            tape.mean(x, &[1])?
        }
    };
    let z = tape.linear(pooled, bound.get("classifier.0.weight")?, Some(bound.get("classifier.0.bias")?))?;
    tape.reshape(z, vec![batch])
}

/// Malignancy probabilities `[B]` in (0, 1).
pub fn model_forward<T: Real>(tape: &mut Tape<T>, images: Var, cfg: &ModelConfig, bound: &Bound) -> Result<Var> {
    let z = logits_forward(tape, images, cfg, bound)?;
    Ok(tape.sigmoid(z))
}

/// Inference convenience: probabilities for a batch of preprocessed images.
pub fn predict(params: &ParamStore<f32>, cfg: &ModelConfig, images: &DiffArray<f32>) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let x = tape.leaf(images);
    let z = logits_forward(&mut tape, x, cfg, &bound)?;
    Ok(tape.value(z).iter().map(|&v| sigmoid(v)).collect())
}
