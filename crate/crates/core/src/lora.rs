//! Low-rank feature adapters.
//!
//! A frozen projection W is augmented with a trainable delta `scale·B·A`:
//! A is initialised with small noise, B with zeros, so injection changes no
//! output bit until an optimiser step moves B. Norm layers take trainable
//! affine deltas instead, since a low-rank factorisation is degenerate for
//! vectors.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{trunc_normal_tensor, Stream};
use crate::tensor::{ops, GradTape, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Trainable low-rank delta for one projection layer.
#[derive(Clone, Debug)]
pub struct LoraLayer {
    /// [rank × d_in]
    pub a: Tensor,
    /// [d_out × rank], zero at initialisation
    pub b: Tensor,
    pub rank: usize,
    pub scale: f64,
}

impl LoraLayer {
    pub fn init(d_in: usize, d_out: usize, rank: usize, rng: &mut Stream) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        Ok(LoraLayer {
            a: trunc_normal_tensor(&[rank, d_in], INIT_STD, rng),
            b: Tensor::zeros(&[d_out, rank]),
            rank,
            scale: 1.0 / rank as f64,
        })
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// Trainable affine delta for a norm layer, zero at initialisation.
#[derive(Clone, Debug)]
pub struct NormDelta {
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

impl NormDelta {
    pub fn init(d: usize) -> Self {
        NormDelta {
            dgamma: Tensor::zeros(&[d]),
            dbeta: Tensor::zeros(&[d]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.dgamma.numel() + self.dbeta.numel()
    }
}

/// Where adapters go. `AllNorms` and `AllLinears` expand to every norm or
/// linear layer of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Query,
    Key,
    Value,
    OutputProjection,
    AllNorms,
    AllLinears,
}

/// Per-block injection sites, identical across blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub sites: BTreeSet<Site>,
}

impl Default for InjectionPlan {
    /// Query, value, and output projection.
    fn default() -> Self {
        InjectionPlan {
            sites: [Site::Query, Site::Value, Site::OutputProjection].into(),
        }
    }
}

impl InjectionPlan {
    pub fn qkv_proj() -> Self {
        InjectionPlan {
            sites: [Site::Query, Site::Key, Site::Value, Site::OutputProjection].into(),
        }
    }

    pub fn all_norms() -> Self {
        InjectionPlan { sites: [Site::AllNorms].into() }
    }

    pub fn all_linears() -> Self {
        InjectionPlan { sites: [Site::AllLinears].into() }
    }

    /// Concrete linear slots per block, after expanding `AllLinears`.
    /// Errors when a slot is requested twice.
    pub fn linear_slots(&self) -> Result<Vec<LinearSlot>> {
        let mut slots: Vec<LinearSlot> = Vec::new();
        let push = |slot: LinearSlot, slots: &mut Vec<LinearSlot>| -> Result<()> {
            if slots.contains(&slot) {
                return Err(Error::Config(format!(
                    "duplicate adapter injection at {:?}",
                    slot
                )));
            }
            slots.push(slot);
            Ok(())
        };
        for site in &self.sites {
            match site {
                Site::Query => push(LinearSlot::Query, &mut slots)?,
                Site::Key => push(LinearSlot::Key, &mut slots)?,
                Site::Value => push(LinearSlot::Value, &mut slots)?,
                Site::OutputProjection => push(LinearSlot::Proj, &mut slots)?,
                Site::AllLinears => {
                    for s in [
                        LinearSlot::Query,
                        LinearSlot::Key,
                        LinearSlot::Value,
                        LinearSlot::Proj,
                        LinearSlot::MlpFc1,
                        LinearSlot::MlpFc2,
                    ] {
                        push(s, &mut slots)?;
                    }
                }
                Site::AllNorms => {}
            }
        }
        Ok(slots)
    }

    pub fn norms_injected(&self) -> bool {
        self.sites.contains(&Site::AllNorms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearSlot {
    Query,
    Key,
    Value,
    Proj,
    MlpFc1,
    MlpFc2,
}

/// Adapter slots of one transformer block.
#[derive(Clone, Debug, Default)]
pub struct BlockAdapters {
    pub query: Option<LoraLayer>,
    pub key: Option<LoraLayer>,
    pub value: Option<LoraLayer>,
    pub proj: Option<LoraLayer>,
    pub mlp_fc1: Option<LoraLayer>,
    pub mlp_fc2: Option<LoraLayer>,
    pub norm1: Option<NormDelta>,
    pub norm2: Option<NormDelta>,
}

impl BlockAdapters {
    pub fn is_empty(&self) -> bool {
        self.query.is_none()
            && self.key.is_none()
            && self.value.is_none()
            && self.proj.is_none()
            && self.mlp_fc1.is_none()
            && self.mlp_fc2.is_none()
            && self.norm1.is_none()
            && self.norm2.is_none()
    }

    pub fn param_count(&self) -> usize {
        let lora: usize = [
            &self.query,
            &self.key,
            &self.value,
            &self.proj,
            &self.mlp_fc1,
            &self.mlp_fc2,
        ]
        .iter()
        .filter_map(|l| l.as_ref().map(LoraLayer::param_count))
        .sum();
        let norms: usize = [&self.norm1, &self.norm2]
            .iter()
            .filter_map(|n| n.as_ref().map(NormDelta::param_count))
            .sum();
        lora + norms
    }
}

/// W·x + scale·B·(A·x) over row-major token matrices; `bias` rides on the
/// frozen path only.
pub fn adapted_linear(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    lora: Option<&LoraLayer>,
    tape: &mut GradTape,
) -> Result<Tensor> {
    let base = ops::linear(x, w, bias, tape)?;
    let Some(l) = lora else {
        return Ok(base);
    };
    let (dout, _) = w.dims2()?;
    let (brows, bcols) = l.b.dims2()?;
    let (arows, acols) = l.a.dims2()?;
    if brows != dout || bcols != l.rank || arows != l.rank || acols != w.dims2()?.1 {
        return Err(Error::Config(format!(
            "adapter shapes A{:?}/B{:?} do not wrap projection {:?}",
            l.a.shape(),
            l.b.shape(),
            w.shape()
        )));
    }
    let mid = ops::linear(x, &l.a, None, tape)?;
    let delta = ops::linear(&mid, &l.b, None, tape)?;
    let scaled = ops::scale(&delta, l.scale, tape)?;
    ops::add(&base, &scaled, tape)
}

/// Spec-shaped adapter application without a bias term.
pub fn lora_forward(x: &Tensor, w: &Tensor, lora: &LoraLayer, tape: &mut GradTape) -> Result<Tensor> {
    adapted_linear(x, w, None, Some(lora), tape)
}

/// Expected trainable-parameter count of a plan: rank·(d_in + d_out) per
/// linear slot, 2·d per norm slot.
pub fn expected_param_count(
    plan: &InjectionPlan,
    embed_dim: usize,
    mlp_dim: usize,
    num_blocks: usize,
    rank: usize,
) -> Result<usize> {
    if rank == 0 {
        return Ok(0);
    }
    let mut per_block = 0usize;
    for slot in plan.linear_slots()? {
        let (d_in, d_out) = match slot {
            LinearSlot::Query | LinearSlot::Key | LinearSlot::Value | LinearSlot::Proj => {
                (embed_dim, embed_dim)
            }
            LinearSlot::MlpFc1 => (embed_dim, mlp_dim),
            LinearSlot::MlpFc2 => (mlp_dim, embed_dim),
        };
        per_block += rank * (d_in + d_out);
    }
    if plan.norms_injected() {
        per_block += 2 * 2 * embed_dim;
    }
    Ok(per_block * num_blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    #[test]
    fn zero_init_b_is_exact_identity() {
        let mut rng = derive_stream(3, "lora-test", 0);
        let lora = LoraLayer::init(4, 4, 2, &mut rng).unwrap();
        let w = trunc_normal_tensor(&[4, 4], 0.3, &mut rng);
        let x = trunc_normal_tensor(&[5, 4], 1.0, &mut rng);
        let mut tape = GradTape::inactive();
        let plain = ops::linear(&x, &w, None, &mut tape).unwrap();
        let adapted = lora_forward(&x, &w, &lora, &mut tape).unwrap();
        assert!(plain.bit_equal(&adapted));
    }

    #[test]
    fn hand_example_matches() {
        // W = I2, A = [[1, 0]], B = [[2], [0]], scale 1, x = (1, 1) → (3, 1)
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let lora = LoraLayer {
            a: Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap(),
            b: Tensor::from_vec(&[2, 1], vec![2.0, 0.0]).unwrap(),
            rank: 1,
            scale: 1.0,
        };
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let mut tape = GradTape::inactive();
        let y = lora_forward(&x, &w, &lora, &mut tape).unwrap();
        assert_eq!(y.data(), &[3.0, 1.0]);
    }

    #[test]
    fn gradients_wrt_a_and_b_match_finite_differences() {
        use crate::gradcheck::{assert_close, finite_diff};
        let mut rng = derive_stream(3, "lora-test", 1);
        let w = trunc_normal_tensor(&[3, 3], 0.3, &mut rng);
        let x = trunc_normal_tensor(&[4, 3], 1.0, &mut rng);
        let mut a = trunc_normal_tensor(&[2, 3], 0.5, &mut rng);
        let mut b = trunc_normal_tensor(&[3, 2], 0.5, &mut rng);

        let eval = |a_t: &Tensor, b_t: &Tensor| {
            let lora = LoraLayer { a: a_t.clone(), b: b_t.clone(), rank: 2, scale: 0.5 };
            let mut quiet = GradTape::inactive();
            let y = lora_forward(&x, &w, &lora, &mut quiet).unwrap();
            y.data().iter().sum::<f64>()
        };

        let mut tape = GradTape::new();
        tape.watch(&mut a);
        tape.watch(&mut b);
        let lora = LoraLayer { a: a.clone(), b: b.clone(), rank: 2, scale: 0.5 };
        let y = lora_forward(&x, &w, &lora, &mut tape).unwrap();
        let loss = ops::sum(&y, &mut tape).unwrap();
        tape.backward(&loss).unwrap();

        let num_a = finite_diff(
            |coords| eval(&Tensor::from_vec(a.shape(), coords.to_vec()).unwrap(), &b),
            a.data(),
            1e-6,
        );
        let num_b = finite_diff(
            |coords| eval(&a, &Tensor::from_vec(b.shape(), coords.to_vec()).unwrap()),
            b.data(),
            1e-6,
        );
        assert_close(tape.grad(&lora.a).unwrap().data(), &num_a, 1e-5, "lora A");
        assert_close(tape.grad(&lora.b).unwrap().data(), &num_b, 1e-5, "lora B");
    }

    #[test]
    fn duplicate_site_is_rejected() {
        let plan = InjectionPlan {
            sites: [Site::Query, Site::AllLinears].into(),
        };
        assert!(plan.linear_slots().is_err());
    }

    #[test]
    fn census_arithmetic_default_plan() {
        // 3 sites x 4 blocks x rank 4 x (64 + 64)
        let plan = InjectionPlan::default();
        let n = expected_param_count(&plan, 64, 128, 4, 4).unwrap();
        assert_eq!(n, 6144);
    }

    #[test]
    fn census_rank_zero_is_empty() {
        let plan = InjectionPlan::default();
        assert_eq!(expected_param_count(&plan, 64, 128, 4, 0).unwrap(), 0);
    }
}
