//! Full model state: backbone + adapters + decoder + score head.
//!
//! Parameter traversal visits tensors in a fixed order; the checkpoint
//! format and the optimizer slot layout both rely on it.

use crate::backbone::{self, BackboneConfig, BackboneState};
use crate::error::{Error, Result};
use crate::heads::{self, DecoderState, Prediction, ScoreHeadState};
use crate::lora::InjectionPlan;
use crate::rng::Stream;
use crate::tensor::{ops, GradTape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Adapter,
    Decoder,
    ScoreHead,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: BackboneConfig,
    pub plan: InjectionPlan,
    pub backbone: BackboneState,
    pub decoder: DecoderState,
    pub score_head: ScoreHeadState,
    pub freeze_backbone: bool,
    pub adapters_enabled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Census {
    pub backbone: usize,
    pub adapter: usize,
    pub decoder: usize,
    pub score_head: usize,
    pub trainable: usize,
    pub total: usize,
}

impl ModelState {
    /// Build a model: seeded backbone init, adapter injection per plan,
    /// zero-started heads.
    pub fn init(
        config: BackboneConfig,
        plan: InjectionPlan,
        freeze_backbone: bool,
        rng: &mut Stream,
    ) -> Result<Self> {
        let mut bb = BackboneState::init(&config, rng)?;
        backbone::inject(&mut bb, &config, &plan, config.adapter_rank, rng)?;
        let decoder = DecoderState::init(config.embed_dim, rng)?;
        let score_head = ScoreHeadState::init(config.embed_dim);
        Ok(ModelState {
            adapters_enabled: config.adapter_rank > 0,
            config,
            plan,
            backbone: bb,
            decoder,
            score_head,
            freeze_backbone,
        })
    }

    pub fn group_trainable(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Backbone => !self.freeze_backbone,
            ParamGroup::Adapter | ParamGroup::Decoder | ParamGroup::ScoreHead => true,
        }
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(ParamGroup, String, &'a Tensor)) {
        use ParamGroup::*;
        f(Backbone, "backbone.patch.weight".into(), &self.backbone.patch_weight);
        f(Backbone, "backbone.patch.bias".into(), &self.backbone.patch_bias);
        f(Backbone, "backbone.pos_embed".into(), &self.backbone.pos_embed);
        f(Backbone, "backbone.cls_token".into(), &self.backbone.cls_token);
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            let p = |n: &str| format!("backbone.block{}.{}", i, n);
            f(Backbone, p("norm1.gamma"), &b.norm1_gamma);
            f(Backbone, p("norm1.beta"), &b.norm1_beta);
            f(Backbone, p("attn.wq"), &b.wq);
            f(Backbone, p("attn.bq"), &b.bq);
            f(Backbone, p("attn.wk"), &b.wk);
            f(Backbone, p("attn.bk"), &b.bk);
            f(Backbone, p("attn.wv"), &b.wv);
            f(Backbone, p("attn.bv"), &b.bv);
            f(Backbone, p("attn.wo"), &b.wo);
            f(Backbone, p("attn.bo"), &b.bo);
            f(Backbone, p("norm2.gamma"), &b.norm2_gamma);
            f(Backbone, p("norm2.beta"), &b.norm2_beta);
            f(Backbone, p("mlp.fc1.weight"), &b.fc1_w);
            f(Backbone, p("mlp.fc1.bias"), &b.fc1_b);
            f(Backbone, p("mlp.fc2.weight"), &b.fc2_w);
            f(Backbone, p("mlp.fc2.bias"), &b.fc2_b);
        }
        f(Backbone, "backbone.final_norm.gamma".into(), &self.backbone.final_norm_gamma);
        f(Backbone, "backbone.final_norm.beta".into(), &self.backbone.final_norm_beta);

        for (i, b) in self.backbone.blocks.iter().enumerate() {
            let p = |n: &str| format!("adapter.block{}.{}", i, n);
            let ad = &b.adapters;
            for (slot, layer) in [
                ("query", &ad.query),
                ("key", &ad.key),
                ("value", &ad.value),
                ("proj", &ad.proj),
                ("mlp_fc1", &ad.mlp_fc1),
                ("mlp_fc2", &ad.mlp_fc2),
            ] {
                if let Some(l) = layer {
                    f(Adapter, p(&format!("{slot}.a")), &l.a);
                    f(Adapter, p(&format!("{slot}.b")), &l.b);
                }
            }
            for (slot, delta) in [("norm1", &ad.norm1), ("norm2", &ad.norm2)] {
                if let Some(nd) = delta {
                    f(Adapter, p(&format!("{slot}.dgamma")), &nd.dgamma);
                    f(Adapter, p(&format!("{slot}.dbeta")), &nd.dbeta);
                }
            }
        }

        f(Decoder, "decoder.block1.weight".into(), &self.decoder.block1.weight);
        f(Decoder, "decoder.block1.bias".into(), &self.decoder.block1.bias);
        f(Decoder, "decoder.block1.gn_gamma".into(), &self.decoder.block1.gn_gamma);
        f(Decoder, "decoder.block1.gn_beta".into(), &self.decoder.block1.gn_beta);
        f(Decoder, "decoder.block2.weight".into(), &self.decoder.block2.weight);
        f(Decoder, "decoder.block2.bias".into(), &self.decoder.block2.bias);
        f(Decoder, "decoder.block2.gn_gamma".into(), &self.decoder.block2.gn_gamma);
        f(Decoder, "decoder.block2.gn_beta".into(), &self.decoder.block2.gn_beta);
        f(Decoder, "decoder.final.weight".into(), &self.decoder.final_weight);
        f(Decoder, "decoder.final.bias".into(), &self.decoder.final_bias);

        f(ScoreHead, "score_head.weight".into(), &self.score_head.weight);
        f(ScoreHead, "score_head.bias".into(), &self.score_head.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(ParamGroup, String, &mut Tensor)) {
        use ParamGroup::*;
        f(Backbone, "backbone.patch.weight".into(), &mut self.backbone.patch_weight);
        f(Backbone, "backbone.patch.bias".into(), &mut self.backbone.patch_bias);
        f(Backbone, "backbone.pos_embed".into(), &mut self.backbone.pos_embed);
        f(Backbone, "backbone.cls_token".into(), &mut self.backbone.cls_token);
        for (i, b) in self.backbone.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("backbone.block{}.{}", i, n);
            f(Backbone, p("norm1.gamma"), &mut b.norm1_gamma);
            f(Backbone, p("norm1.beta"), &mut b.norm1_beta);
            f(Backbone, p("attn.wq"), &mut b.wq);
            f(Backbone, p("attn.bq"), &mut b.bq);
            f(Backbone, p("attn.wk"), &mut b.wk);
            f(Backbone, p("attn.bk"), &mut b.bk);
            f(Backbone, p("attn.wv"), &mut b.wv);
            f(Backbone, p("attn.bv"), &mut b.bv);
            f(Backbone, p("attn.wo"), &mut b.wo);
            f(Backbone, p("attn.bo"), &mut b.bo);
            f(Backbone, p("norm2.gamma"), &mut b.norm2_gamma);
            f(Backbone, p("norm2.beta"), &mut b.norm2_beta);
            f(Backbone, p("mlp.fc1.weight"), &mut b.fc1_w);
            f(Backbone, p("mlp.fc1.bias"), &mut b.fc1_b);
            f(Backbone, p("mlp.fc2.weight"), &mut b.fc2_w);
            f(Backbone, p("mlp.fc2.bias"), &mut b.fc2_b);
        }
        f(Backbone, "backbone.final_norm.gamma".into(), &mut self.backbone.final_norm_gamma);
        f(Backbone, "backbone.final_norm.beta".into(), &mut self.backbone.final_norm_beta);

        for (i, b) in self.backbone.blocks.iter_mut().enumerate() {
            let ad = &mut b.adapters;
            for (slot, layer) in [
                ("query", &mut ad.query),
                ("key", &mut ad.key),
                ("value", &mut ad.value),
                ("proj", &mut ad.proj),
                ("mlp_fc1", &mut ad.mlp_fc1),
                ("mlp_fc2", &mut ad.mlp_fc2),
            ] {
                if let Some(l) = layer {
                    f(Adapter, format!("adapter.block{}.{}.a", i, slot), &mut l.a);
                    f(Adapter, format!("adapter.block{}.{}.b", i, slot), &mut l.b);
                }
            }
            for (slot, delta) in [("norm1", &mut ad.norm1), ("norm2", &mut ad.norm2)] {
                if let Some(nd) = delta {
                    f(Adapter, format!("adapter.block{}.{}.dgamma", i, slot), &mut nd.dgamma);
                    f(Adapter, format!("adapter.block{}.{}.dbeta", i, slot), &mut nd.dbeta);
                }
            }
        }

        f(Decoder, "decoder.block1.weight".into(), &mut self.decoder.block1.weight);
        f(Decoder, "decoder.block1.bias".into(), &mut self.decoder.block1.bias);
        f(Decoder, "decoder.block1.gn_gamma".into(), &mut self.decoder.block1.gn_gamma);
        f(Decoder, "decoder.block1.gn_beta".into(), &mut self.decoder.block1.gn_beta);
        f(Decoder, "decoder.block2.weight".into(), &mut self.decoder.block2.weight);
        f(Decoder, "decoder.block2.bias".into(), &mut self.decoder.block2.bias);
        f(Decoder, "decoder.block2.gn_gamma".into(), &mut self.decoder.block2.gn_gamma);
        f(Decoder, "decoder.block2.gn_beta".into(), &mut self.decoder.block2.gn_beta);
        f(Decoder, "decoder.final.weight".into(), &mut self.decoder.final_weight);
        f(Decoder, "decoder.final.bias".into(), &mut self.decoder.final_bias);

        f(ScoreHead, "score_head.weight".into(), &mut self.score_head.weight);
        f(ScoreHead, "score_head.bias".into(), &mut self.score_head.bias);
    }

    /// Names of trainable parameters, in traversal order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |group, name, _| {
            if self.group_trainable(group) {
                names.push(name);
            }
        });
        names
    }

    /// Register every trainable parameter as a leaf on `tape`.
    pub fn watch_trainable(&mut self, tape: &mut GradTape) {
        let freeze = self.freeze_backbone;
        self.visit_params_mut(&mut |group, _, t| {
            let trainable = match group {
                ParamGroup::Backbone => !freeze,
                _ => true,
            };
            if trainable {
                tape.watch(t);
            }
        });
    }

    pub fn census(&self) -> Census {
        let mut c = Census {
            backbone: 0,
            adapter: 0,
            decoder: 0,
            score_head: 0,
            trainable: 0,
            total: 0,
        };
        self.visit_params(&mut |group, _, t| {
            let n = t.numel();
            match group {
                ParamGroup::Backbone => c.backbone += n,
                ParamGroup::Adapter => c.adapter += n,
                ParamGroup::Decoder => c.decoder += n,
                ParamGroup::ScoreHead => c.score_head += n,
            }
            if self.group_trainable(group) {
                c.trainable += n;
            }
            c.total += n;
        });
        c
    }
}

/// Differentiable forward pass used by the trainer.
pub struct TrainForward {
    /// [H × W] logits
    pub map_logits: Tensor,
    /// [H × W] raw confidence
    pub confidence: Tensor,
    /// score logit, shape [1]
    pub score_logit: Tensor,
}

pub fn forward_train(image: &Tensor, model: &ModelState, tape: &mut GradTape) -> Result<TrainForward> {
    let (_, h, w) = image.dims3()?;
    let out = backbone::forward(image, &model.backbone, &model.config, model.adapters_enabled, tape)?;
    let f_r = heads::reshape_tokens(&out, tape)?;
    let (map_logits, confidence) = heads::decode(&f_r, &model.decoder, h, w, tape)?;
    let score_logit = heads::score_logit(&out.cls_token, &model.score_head, tape)?;
    Ok(TrainForward {
        map_logits,
        confidence,
        score_logit,
    })
}

/// Pure inference: patchify → backbone (adapters) → decode + score.
pub fn predict(image: &Tensor, model: &ModelState) -> Result<Prediction> {
    let (_, h, w) = image.dims3()?;
    if h != model.config.image_size || w != model.config.image_size {
        return Err(Error::dim(
            "predict",
            format!("image {}x{}, model expects {}", h, w, model.config.image_size),
        ));
    }
    let mut tape = GradTape::inactive();
    let fwd = forward_train(image, model, &mut tape)?;
    let anomaly_map = ops::sigmoid(&fwd.map_logits, &mut tape)?;
    let score = ops::sigmoid(&fwd.score_logit, &mut tape)?.item()?;
    Ok(Prediction {
        anomaly_map,
        confidence_raw: fwd.confidence,
        image_score: score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn tiny_model() -> ModelState {
        let mut rng = derive_stream(17, "model-test", 0);
        ModelState::init(BackboneConfig::tiny(), InjectionPlan::default(), true, &mut rng).unwrap()
    }

    #[test]
    fn untrained_model_outputs_exactly_half() {
        let model = tiny_model();
        let image = Tensor::from_fn(&[3, 32, 32], |i| (i % 17) as f64 / 17.0);
        let pred = predict(&image, &model).unwrap();
        assert_eq!(pred.image_score, 0.5);
        for &v in pred.anomaly_map.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn predict_is_deterministic_and_shapes_match_input() {
        let model = tiny_model();
        let mut rng = derive_stream(17, "model-test", 1);
        let image = Tensor::from_fn(&[3, 32, 32], |_| crate::rng::uniform(&mut rng, 0.0, 1.0));
        let a = predict(&image, &model).unwrap();
        let b = predict(&image, &model).unwrap();
        assert!(a.anomaly_map.bit_equal(&b.anomaly_map));
        assert_eq!(a.image_score, b.image_score);
        assert_eq!(a.anomaly_map.shape(), &[32, 32]);
        assert_eq!(a.confidence_raw.shape(), &[32, 32]);
    }

    #[test]
    fn anomaly_map_strictly_inside_unit_interval() {
        let mut model = tiny_model();
        // push some weight into the heads so logits are non-trivial
        let mut rng = derive_stream(17, "model-test", 2);
        model.decoder.final_weight =
            crate::rng::trunc_normal_tensor(model.decoder.final_weight.shape(), 0.5, &mut rng);
        let image = Tensor::from_fn(&[3, 32, 32], |_| crate::rng::uniform(&mut rng, 0.0, 1.0));
        let pred = predict(&image, &model).unwrap();
        for &v in pred.anomaly_map.data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn census_accounts_for_every_group() {
        let model = tiny_model();
        let c = model.census();
        // adapters: 3 sites x 2 blocks x rank 2 x (16 + 16)
        assert_eq!(c.adapter, 3 * 2 * 2 * 32);
        assert_eq!(c.trainable, c.adapter + c.decoder + c.score_head);
        assert_eq!(c.total, c.backbone + c.adapter + c.decoder + c.score_head);
        assert!(c.backbone > 0 && c.decoder > 0 && c.score_head > 0);
    }

    #[test]
    fn trainable_names_are_stable_and_unique() {
        let model = tiny_model();
        let names = model.trainable_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.iter().all(|n| !n.starts_with("backbone.")));
    }
}
