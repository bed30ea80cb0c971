//! Small vision-transformer backbone with adapter injection points.
//!
//! Pre-norm blocks (norm → attention → residual; norm → MLP → residual),
//! a class token at index 0, full attention, learned position embeddings,
//! and a final layer norm applied before feature extraction. Low-rank
//! adapters participate inside every block when enabled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{adapted_linear, BlockAdapters, InjectionPlan, LinearSlot, LoraLayer, NormDelta};
use crate::rng::{trunc_normal_tensor, Stream};
use crate::tensor::{ops, GradTape, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// 0 disables adapter injection.
    pub adapter_rank: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 2.0,
            adapter_rank: 4,
        }
    }
}

impl BackboneConfig {
    /// Geometry of the full-size configuration: ViT-L at 768² with patch 16
    /// and rank-64 adapters. Constructible for shape arithmetic; not meant
    /// to be trained here.
    pub fn paper_scale() -> Self {
        BackboneConfig {
            image_size: 768,
            patch_size: 16,
            embed_dim: 1024,
            num_blocks: 24,
            num_heads: 16,
            mlp_ratio: 4.0,
            adapter_rank: 64,
        }
    }

    /// Smallest configuration that exercises every code path.
    pub fn tiny() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            adapter_rank: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("at least one block required".into()));
        }
        if self.mlp_dim() == 0 {
            return Err(Error::Config("mlp_ratio too small".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    pub adapters: BlockAdapters,
}

#[derive(Clone, Debug)]
pub struct BackboneState {
    /// [embed_dim × 3·p·p]
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    /// [(tokens + 1) × embed_dim], class position at row 0
    pub pos_embed: Tensor,
    /// [1 × embed_dim]
    pub cls_token: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_norm_gamma: Tensor,
    pub final_norm_beta: Tensor,
}

impl BackboneState {
    pub fn init(cfg: &BackboneConfig, rng: &mut Stream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let dm = cfg.mlp_dim();
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockWeights {
                norm1_gamma: Tensor::full(&[d], 1.0),
                norm1_beta: Tensor::zeros(&[d]),
                wq: trunc_normal_tensor(&[d, d], INIT_STD, rng),
                bq: Tensor::zeros(&[d]),
                wk: trunc_normal_tensor(&[d, d], INIT_STD, rng),
                bk: Tensor::zeros(&[d]),
                wv: trunc_normal_tensor(&[d, d], INIT_STD, rng),
                bv: Tensor::zeros(&[d]),
                wo: trunc_normal_tensor(&[d, d], INIT_STD, rng),
                bo: Tensor::zeros(&[d]),
                norm2_gamma: Tensor::full(&[d], 1.0),
                norm2_beta: Tensor::zeros(&[d]),
                fc1_w: trunc_normal_tensor(&[dm, d], INIT_STD, rng),
                fc1_b: Tensor::zeros(&[dm]),
                fc2_w: trunc_normal_tensor(&[d, dm], INIT_STD, rng),
                fc2_b: Tensor::zeros(&[d]),
                adapters: BlockAdapters::default(),
            })
            .collect();
        Ok(BackboneState {
            patch_weight: trunc_normal_tensor(&[d, cfg.patch_dim()], INIT_STD, rng),
            patch_bias: Tensor::zeros(&[d]),
            pos_embed: trunc_normal_tensor(&[cfg.num_patches() + 1, d], INIT_STD, rng),
            cls_token: trunc_normal_tensor(&[1, d], INIT_STD, rng),
            blocks,
            final_norm_gamma: Tensor::full(&[d], 1.0),
            final_norm_beta: Tensor::zeros(&[d]),
        })
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks.iter().any(|b| !b.adapters.is_empty())
    }

    pub fn adapter_param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.adapters.param_count()).sum()
    }
}

/// Wrap every planned site of every block. Backbone weights are untouched;
/// the adapter delta path starts at exactly zero.
pub fn inject(
    state: &mut BackboneState,
    cfg: &BackboneConfig,
    plan: &InjectionPlan,
    rank: usize,
    rng: &mut Stream,
) -> Result<()> {
    if rank == 0 {
        return Ok(());
    }
    if state.has_adapters() {
        return Err(Error::Config("adapters already injected".into()));
    }
    let slots = plan.linear_slots()?;
    let d = cfg.embed_dim;
    let dm = cfg.mlp_dim();
    for block in &mut state.blocks {
        for slot in &slots {
            let (d_in, d_out, target) = match slot {
                LinearSlot::Query => (d, d, &mut block.adapters.query),
                LinearSlot::Key => (d, d, &mut block.adapters.key),
                LinearSlot::Value => (d, d, &mut block.adapters.value),
                LinearSlot::Proj => (d, d, &mut block.adapters.proj),
                LinearSlot::MlpFc1 => (d, dm, &mut block.adapters.mlp_fc1),
                LinearSlot::MlpFc2 => (dm, d, &mut block.adapters.mlp_fc2),
            };
            *target = Some(LoraLayer::init(d_in, d_out, rank, rng)?);
        }
        if plan.norms_injected() {
            block.adapters.norm1 = Some(NormDelta::init(d));
            block.adapters.norm2 = Some(NormDelta::init(d));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// [N × embed_dim]
    pub patch_tokens: Tensor,
    /// [embed_dim]
    pub cls_token: Tensor,
    pub grid: (usize, usize),
}

/// Row-major non-overlapping patch extraction: [3×H×W] → [N × 3·p·p].
/// Pure data movement; the result is a constant w.r.t. the tape.
pub fn extract_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if c != 3 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(
            "extract_patches",
            format!("image {:?} with patch {}", image.shape(), patch),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = 3 * patch * patch;
    let mut data = vec![0.0; gh * gw * pd];
    for py in 0..gh {
        for px in 0..gw {
            let t = py * gw + px;
            for ch in 0..3 {
                for y in 0..patch {
                    for x in 0..patch {
                        data[t * pd + ch * patch * patch + y * patch + x] =
                            image.data()[ch * h * w + (py * patch + y) * w + (px * patch + x)];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[gh * gw, pd], data)
}

/// Patch projection plus position embedding, token order row-major over the
/// patch grid.
pub fn patchify(
    image: &Tensor,
    state: &BackboneState,
    cfg: &BackboneConfig,
    tape: &mut GradTape,
) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::dim(
            "patchify",
            format!("image {}x{}, config expects {}", h, w, cfg.image_size),
        ));
    }
    let patches = extract_patches(image, cfg.patch_size)?;
    let projected = ops::linear(&patches, &state.patch_weight, Some(&state.patch_bias), tape)?;
    let pos = ops::slice_rows(&state.pos_embed, 1, cfg.num_patches(), tape)?;
    ops::add(&projected, &pos, tape)
}

fn norm_params(
    gamma: &Tensor,
    beta: &Tensor,
    delta: Option<&NormDelta>,
    enabled: bool,
    tape: &mut GradTape,
) -> Result<(Tensor, Tensor)> {
    match delta {
        Some(d) if enabled => Ok((
            ops::add(gamma, &d.dgamma, tape)?,
            ops::add(beta, &d.dbeta, tape)?,
        )),
        _ => Ok((gamma.clone(), beta.clone())),
    }
}

fn enabled_ref(l: &Option<LoraLayer>, enabled: bool) -> Option<&LoraLayer> {
    if enabled {
        l.as_ref()
    } else {
        None
    }
}

fn attention(
    h: &Tensor,
    block: &BlockWeights,
    cfg: &BackboneConfig,
    adapters_enabled: bool,
    tape: &mut GradTape,
) -> Result<Tensor> {
    let q = adapted_linear(h, &block.wq, Some(&block.bq), enabled_ref(&block.adapters.query, adapters_enabled), tape)?;
    let k = adapted_linear(h, &block.wk, Some(&block.bk), enabled_ref(&block.adapters.key, adapters_enabled), tape)?;
    let v = adapted_linear(h, &block.wv, Some(&block.bv), enabled_ref(&block.adapters.value, adapters_enabled), tape)?;

    let hd = cfg.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for hi in 0..cfg.num_heads {
        let qh = ops::slice_cols(&q, hi * hd, hd, tape)?;
        let kh = ops::slice_cols(&k, hi * hd, hd, tape)?;
        let vh = ops::slice_cols(&v, hi * hd, hd, tape)?;
        let scores = ops::matmul_bt(&qh, &kh, tape)?;
        let scaled = ops::scale(&scores, inv_sqrt, tape)?;
        let probs = ops::softmax_rows(&scaled, tape)?;
        heads.push(ops::matmul(&probs, &vh, tape)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let cat = ops::concat_cols(&refs, tape)?;
    adapted_linear(&cat, &block.wo, Some(&block.bo), enabled_ref(&block.adapters.proj, adapters_enabled), tape)
}

/// Full backbone pass. Deterministic; with adapters at zero initialisation
/// the output is bit-identical to `adapters_enabled = false`.
pub fn forward(
    image: &Tensor,
    state: &BackboneState,
    cfg: &BackboneConfig,
    adapters_enabled: bool,
    tape: &mut GradTape,
) -> Result<BackboneOutput> {
    let tokens = patchify(image, state, cfg, tape)?;
    let pos0 = ops::slice_rows(&state.pos_embed, 0, 1, tape)?;
    let cls = ops::add(&state.cls_token, &pos0, tape)?;
    let mut seq = ops::concat_rows(&cls, &tokens, tape)?;

    for block in &state.blocks {
        let (g1, b1) = norm_params(
            &block.norm1_gamma,
            &block.norm1_beta,
            block.adapters.norm1.as_ref(),
            adapters_enabled,
            tape,
        )?;
        let h = ops::layernorm(&seq, &g1, &b1, NORM_EPS, tape)?;
        let attn = attention(&h, block, cfg, adapters_enabled, tape)?;
        seq = ops::add(&seq, &attn, tape)?;

        let (g2, b2) = norm_params(
            &block.norm2_gamma,
            &block.norm2_beta,
            block.adapters.norm2.as_ref(),
            adapters_enabled,
            tape,
        )?;
        let h2 = ops::layernorm(&seq, &g2, &b2, NORM_EPS, tape)?;
        let m1 = adapted_linear(&h2, &block.fc1_w, Some(&block.fc1_b), enabled_ref(&block.adapters.mlp_fc1, adapters_enabled), tape)?;
        let act = ops::gelu(&m1, tape)?;
        let m2 = adapted_linear(&act, &block.fc2_w, Some(&block.fc2_b), enabled_ref(&block.adapters.mlp_fc2, adapters_enabled), tape)?;
        seq = ops::add(&seq, &m2, tape)?;
    }

    let normed = ops::layernorm(&seq, &state.final_norm_gamma, &state.final_norm_beta, NORM_EPS, tape)?;
    let n = cfg.num_patches();
    let cls_row = ops::slice_rows(&normed, 0, 1, tape)?;
    let cls_token = ops::reshape(&cls_row, &[cfg.embed_dim])?;
    let patch_tokens = ops::slice_rows(&normed, 1, n, tape)?;
    Ok(BackboneOutput {
        patch_tokens,
        cls_token,
        grid: cfg.grid(),
    })
}
