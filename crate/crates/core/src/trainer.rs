//! Optimisation loop: AdamW with decoupled weight decay, joint training of
//! adapters, decoder, and score head over generated triplets, an optional
//! self-supervised warm-up of the backbone, and few-shot finetuning.
//!
//! Each batch draws triplets independently with replacement and picks the
//! normal or anomalous half per draw with probability ½. Parameters are
//! re-quantized to the f32 lattice after every update so checkpoints
//! round-trip bit-exactly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::datagen::{LoadedTriplet, SampleTriplet};
use crate::error::{Error, Result};
use crate::lora::InjectionPlan;
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::model::{forward_train, ModelState};
use crate::rng::{derive_stream, uniform_int, Stream};
use crate::tensor::{ops, GradTape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub freeze_backbone: bool,
    /// Self-supervised masked-patch warm-up steps before freezing; 0 skips.
    pub warmup_steps: usize,
    /// Global-norm gradient clip; `None` disables.
    pub grad_clip: Option<f64>,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.01,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            freeze_backbone: true,
            warmup_steps: 0,
            grad_clip: Some(1.0),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.loss.validate()
    }
}

/// Bias-corrected AdamW with decoupled weight decay. Moment slots are laid
/// out in parameter-visit order.
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, betas: (f64, f64), eps: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            betas,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.weight_decay, cfg.adam_betas, cfg.adam_eps)
    }

    /// Advance the shared step counter; call once per batch before
    /// [`update_param`](Self::update_param).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter in its slot. Slots must be visited in a fixed
    /// order with matching shapes across steps.
    pub fn update_param(&mut self, slot: usize, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        if param.numel() != grad.len() {
            return Err(Error::dim(
                "adamw",
                format!("param {} vs grad {}", param.numel(), grad.len()),
            ));
        }
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[slot].is_empty() {
            self.m[slot] = vec![0.0; grad.len()];
            self.v[slot] = vec![0.0; grad.len()];
        }
        let (b1, b2) = self.betas;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        let data = param.make_data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[slot][i] = b1 * self.m[slot][i] + (1.0 - b1) * g;
            self.v[slot][i] = b2 * self.v[slot][i] + (1.0 - b2) * g * g;
            let m_hat = self.m[slot][i] / bias1;
            let v_hat = self.v[slot][i] / bias2;
            data[i] -= self.lr * self.weight_decay * data[i];
            data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        param.quantize_f32();
        Ok(())
    }
}

/// Scale factor bringing the global gradient norm under `clip`.
pub fn clip_scale(grads: &[Tensor], clip: f64) -> f64 {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > clip && norm > 0.0 {
        clip / norm
    } else {
        1.0
    }
}

/// One training triplet: both halves plus the mask for the anomalous one.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub normal: Tensor,
    pub anomalous: Tensor,
    pub mask: Tensor,
}

impl TrainItem {
    pub fn from_generated(samples: &[SampleTriplet]) -> Vec<TrainItem> {
        samples
            .iter()
            .filter(|s| s.accepted)
            .map(|s| TrainItem {
                id: crate::datagen::sample_id(s.id),
                normal: s.normal.clone(),
                anomalous: s.anomalous.clone(),
                mask: s.mask.clone(),
            })
            .collect()
    }

    pub fn from_loaded(samples: &[LoadedTriplet]) -> Vec<TrainItem> {
        samples
            .iter()
            .map(|s| TrainItem {
                id: s.id.clone(),
                normal: s.normal.clone(),
                anomalous: s.anomalous.clone(),
                mask: s.mask.clone(),
            })
            .collect()
    }
}

/// A trained model plus everything needed to reproduce or resume the run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelState,
    pub train_config: TrainConfig,
    pub iteration: usize,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

fn trainable_grads(model: &ModelState, tape: &GradTape) -> Vec<Tensor> {
    let mut grads = Vec::new();
    model.visit_params(&mut |group, _, t| {
        if model.group_trainable(group) {
            grads.push(tape.grad_or_zeros(t));
        }
    });
    grads
}

struct BatchResult {
    breakdown: LossBreakdown,
    grads: Vec<Tensor>,
    ids: Vec<String>,
}

fn run_batch(
    model: &ModelState,
    items: &[TrainItem],
    batch_size: usize,
    cfg: &LossConfig,
    iteration: usize,
    rng: &mut Stream,
) -> Result<BatchResult> {
    let mut sum_grads: Vec<Tensor> = Vec::new();
    let mut ids = Vec::with_capacity(batch_size);
    let mut acc = LossBreakdown {
        l1: 0.0,
        focal_pixel: 0.0,
        l_base: 0.0,
        l_seg: 0.0,
        l_img: 0.0,
        total: 0.0,
    };
    for _ in 0..batch_size {
        let idx = uniform_int(rng, 0, items.len() - 1);
        let anomalous_half = uniform_int(rng, 0, 1) == 1;
        let item = &items[idx];
        ids.push(format!(
            "{}:{}",
            item.id,
            if anomalous_half { "anomalous" } else { "normal" }
        ));
        let (image, mask, label) = if anomalous_half {
            (&item.anomalous, item.mask.clone(), true)
        } else {
            (&item.normal, Tensor::zeros(item.mask.shape()), false)
        };

        let mut sample_model = model.clone();
        let mut tape = GradTape::new();
        sample_model.watch_trainable(&mut tape);
        let fwd = forward_train(image, &sample_model, &mut tape)?;
        if !fwd.map_logits.all_finite() || !fwd.confidence.all_finite() || !fwd.score_logit.all_finite()
        {
            return Err(Error::NonFiniteLoss {
                iteration,
                batch_ids: ids,
            });
        }
        let (bd, total) = total_loss(&fwd, &mask, label, cfg, &mut tape)?;
        tape.backward(&total)?;
        let grads = trainable_grads(&sample_model, &tape);

        if sum_grads.is_empty() {
            sum_grads = grads;
        } else {
            for (s, g) in sum_grads.iter_mut().zip(&grads) {
                let data = s.make_data_mut();
                for (d, v) in data.iter_mut().zip(g.data()) {
                    *d += v;
                }
            }
        }
        acc.l1 += bd.l1;
        acc.focal_pixel += bd.focal_pixel;
        acc.l_base += bd.l_base;
        acc.l_seg += bd.l_seg;
        acc.l_img += bd.l_img;
        acc.total += bd.total;
    }
    let inv = 1.0 / batch_size as f64;
    for g in sum_grads.iter_mut() {
        for v in g.make_data_mut() {
            *v *= inv;
        }
    }
    acc.l1 *= inv;
    acc.focal_pixel *= inv;
    acc.l_base *= inv;
    acc.l_seg *= inv;
    acc.l_img *= inv;
    acc.total *= inv;
    Ok(BatchResult {
        breakdown: acc,
        grads: sum_grads,
        ids,
    })
}

fn apply_update(
    model: &mut ModelState,
    optimizer: &mut AdamW,
    grads: &[Tensor],
    clip: Option<f64>,
) -> Result<()> {
    let scale = clip.map(|c| clip_scale(grads, c)).unwrap_or(1.0);
    optimizer.begin_step();
    let mut slot = 0usize;
    let freeze = model.freeze_backbone;
    let mut result = Ok(());
    model.visit_params_mut(&mut |group, _, t| {
        if result.is_err() {
            return;
        }
        let trainable = match group {
            crate::model::ParamGroup::Backbone => !freeze,
            _ => true,
        };
        if !trainable {
            return;
        }
        let g: Vec<f64> = grads[slot].data().iter().map(|v| v * scale).collect();
        result = optimizer.update_param(slot, t, &g);
        slot += 1;
    });
    result
}

/// Masked-patch reconstruction warm-up: zero a quarter of the patches,
/// reconstruct their pixels from the final tokens through a temporary
/// linear head, and train the whole backbone. The head is dropped and the
/// backbone frozen afterwards.
fn warmup_backbone(
    model: &mut ModelState,
    items: &[TrainItem],
    steps: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    let bb_cfg = model.config.clone();
    let n = bb_cfg.num_patches();
    let pd = bb_cfg.patch_dim();
    let mut rng = derive_stream(cfg.seed, "warmup", 0);
    let mut head_rng = derive_stream(cfg.seed, "warmup-head", 0);
    let mut recon_w = crate::rng::trunc_normal_tensor(&[pd, bb_cfg.embed_dim], 0.02, &mut head_rng);
    let mut recon_b = Tensor::zeros(&[pd]);
    let mut optimizer = AdamW::from_config(cfg);

    let was_frozen = model.freeze_backbone;
    model.freeze_backbone = false;

    for _ in 0..steps {
        let item = &items[uniform_int(&mut rng, 0, items.len() - 1)];
        let image = &item.normal;

        // choose masked patches and zero their pixels
        let mut masked = vec![false; n];
        let mut count = 0;
        while count < n / 4 {
            let i = uniform_int(&mut rng, 0, n - 1);
            if !masked[i] {
                masked[i] = true;
                count += 1;
            }
        }
        let patches = backbone::extract_patches(image, bb_cfg.patch_size)?;
        let grid = bb_cfg.grid().0;
        let mut corrupted = image.clone();
        {
            let data = corrupted.make_data_mut();
            let size = bb_cfg.image_size;
            let p = bb_cfg.patch_size;
            for (t, &m) in masked.iter().enumerate() {
                if !m {
                    continue;
                }
                let (py, px) = (t / grid, t % grid);
                for ch in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            data[ch * size * size + (py * p + y) * size + (px * p + x)] = 0.0;
                        }
                    }
                }
            }
        }

        let mut step_model = model.clone();
        let mut step_w = recon_w.clone();
        let mut step_b = recon_b.clone();
        let mut tape = GradTape::new();
        step_model.watch_trainable(&mut tape);
        tape.watch(&mut step_w);
        tape.watch(&mut step_b);

        let out = backbone::forward(&corrupted, &step_model.backbone, &bb_cfg, false, &mut tape)?;
        let recon = ops::linear(&out.patch_tokens, &step_w, Some(&step_b), &mut tape)?;
        let diff = ops::sub(&recon, &patches, &mut tape)?;
        let sq = ops::mul(&diff, &diff, &mut tape)?;
        let weights: Vec<f64> = masked
            .iter()
            .map(|&m| if m { 1.0 / (count * pd) as f64 } else { 0.0 })
            .collect();
        let weighted = ops::scale_rows(&sq, &weights, &mut tape)?;
        let loss = ops::sum(&weighted, &mut tape)?;
        tape.backward(&loss)?;

        let mut grads = trainable_grads(&step_model, &tape);
        grads.push(tape.grad_or_zeros(&step_w));
        grads.push(tape.grad_or_zeros(&step_b));
        let scale = cfg.grad_clip.map(|c| clip_scale(&grads, c)).unwrap_or(1.0);

        optimizer.begin_step();
        let mut slot = 0usize;
        let mut result = Ok(());
        model.visit_params_mut(&mut |_, _, t| {
            if result.is_err() {
                return;
            }
            let g: Vec<f64> = grads[slot].data().iter().map(|v| v * scale).collect();
            result = optimizer.update_param(slot, t, &g);
            slot += 1;
        });
        result?;
        let gw: Vec<f64> = grads[slot].data().iter().map(|v| v * scale).collect();
        optimizer.update_param(slot, &mut recon_w, &gw)?;
        let gb: Vec<f64> = grads[slot + 1].data().iter().map(|v| v * scale).collect();
        optimizer.update_param(slot + 1, &mut recon_b, &gb)?;
    }

    model.freeze_backbone = was_frozen;
    Ok(())
}

/// Full zero-shot training run. The loss CSV (header
/// `step,l1,focal_pixel,l_seg,l_img,total`) goes to `log` when given.
pub fn train_zero_shot(
    items: &[TrainItem],
    backbone_cfg: BackboneConfig,
    plan: InjectionPlan,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut init_rng = derive_stream(cfg.seed, "model-init", 0);
    let mut model = ModelState::init(backbone_cfg, plan, cfg.freeze_backbone, &mut init_rng)?;
    if model.freeze_backbone && model.config.adapter_rank == 0 {
        return Err(Error::Config(
            "frozen backbone requires adapters (rank >= 1)".into(),
        ));
    }
    if cfg.warmup_steps > 0 {
        warmup_backbone(&mut model, items, cfg.warmup_steps, cfg)?;
    }

    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", LossBreakdown::CSV_HEADER)?;
    }
    let mut batch_rng = derive_stream(cfg.seed, "batches", 0);
    let mut optimizer = AdamW::from_config(cfg);
    for iteration in 0..cfg.iterations {
        let batch = run_batch(&model, items, cfg.batch_size, &cfg.loss, iteration, &mut batch_rng)?;
        if !batch.breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                batch_ids: batch.ids,
            });
        }
        apply_update(&mut model, &mut optimizer, &batch.grads, cfg.grad_clip)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", batch.breakdown.csv_row(iteration))?;
        }
    }

    Ok(Checkpoint {
        model,
        train_config: cfg.clone(),
        iteration: cfg.iterations,
        rng_seed: cfg.seed,
        rng_word_pos: batch_rng.get_word_pos(),
    })
}

/// Continue training on a few normal images only: all-zero masks, label 0,
/// the same trainable set as zero-shot training.
pub fn finetune_few_shot(
    ckpt: &Checkpoint,
    normal_images: &[Tensor],
    iterations: usize,
) -> Result<Checkpoint> {
    if normal_images.is_empty() {
        return Err(Error::Contract("few-shot finetuning needs at least one image".into()));
    }
    if iterations == 0 {
        return Ok(ckpt.clone());
    }
    let size = ckpt.model.config.image_size;
    let items: Vec<TrainItem> = normal_images
        .iter()
        .enumerate()
        .map(|(i, img)| TrainItem {
            id: format!("shot{:02}", i),
            normal: img.clone(),
            anomalous: img.clone(),
            mask: Tensor::zeros(&[size, size]),
        })
        .collect();

    let cfg = &ckpt.train_config;
    let mut model = ckpt.model.clone();
    let mut rng = derive_stream(cfg.seed, "finetune", ckpt.iteration as u64);
    let mut optimizer = AdamW::from_config(cfg);
    for iteration in 0..iterations {
        let batch = run_batch(&model, &items, cfg.batch_size.min(items.len() * 2), &cfg.loss, iteration, &mut rng)?;
        if !batch.breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                batch_ids: batch.ids,
            });
        }
        apply_update(&mut model, &mut optimizer, &batch.grads, cfg.grad_clip)?;
    }
    Ok(Checkpoint {
        model,
        train_config: cfg.clone(),
        iteration: ckpt.iteration + iterations,
        rng_seed: ckpt.rng_seed,
        rng_word_pos: rng.get_word_pos(),
    })
}

pub const DEFAULT_FINETUNE_ITERATIONS: usize = 50;
