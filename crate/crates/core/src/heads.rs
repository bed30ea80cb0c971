//! Anomaly decoder and image-level score head.
//!
//! The decoder takes the reshaped patch features through two upsampling
//! blocks (conv 3×3 → group norm → ReLU → bilinear ×2) and a final 3×3
//! conv with exactly two output channels: anomaly-map logits and the raw
//! confidence map. A final bilinear resize reaches the requested output
//! extents. The score head is a single linear layer on the class token.

use crate::backbone::BackboneOutput;
use crate::error::{Error, Result};
use crate::rng::{trunc_normal_tensor, Stream};
use crate::tensor::{ops, GradTape, Tensor};

pub const GN_EPS: f64 = 1e-5;
pub const DEFAULT_GROUPS: usize = 4;

#[derive(Clone, Debug)]
pub struct ConvBlock {
    /// [C_out × C_in × 3 × 3]
    pub weight: Tensor,
    pub bias: Tensor,
    pub gn_gamma: Tensor,
    pub gn_beta: Tensor,
}

impl ConvBlock {
    fn init(c_in: usize, c_out: usize, rng: &mut Stream) -> Self {
        ConvBlock {
            weight: trunc_normal_tensor(&[c_out, c_in, 3, 3], 0.02, rng),
            bias: Tensor::zeros(&[c_out]),
            gn_gamma: Tensor::full(&[c_out], 1.0),
            gn_beta: Tensor::zeros(&[c_out]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel() + self.gn_gamma.numel() + self.gn_beta.numel()
    }
}

/// Two upsampling blocks (d → d/2 → d/4) and a final conv producing the
/// two output channels. The final conv starts at zero so an untrained
/// model emits exactly 0.5 probability everywhere.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub block1: ConvBlock,
    pub block2: ConvBlock,
    /// [2 × d/4 × 3 × 3]
    pub final_weight: Tensor,
    pub final_bias: Tensor,
    pub groups: usize,
}

impl DecoderState {
    pub fn init(embed_dim: usize, rng: &mut Stream) -> Result<Self> {
        Self::init_with_groups(embed_dim, DEFAULT_GROUPS, rng)
    }

    pub fn init_with_groups(embed_dim: usize, groups: usize, rng: &mut Stream) -> Result<Self> {
        let c1 = embed_dim / 2;
        let c2 = embed_dim / 4;
        if c2 == 0 || embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "decoder needs embed_dim divisible by 4, got {}",
                embed_dim
            )));
        }
        if c1 % groups != 0 || c2 % groups != 0 {
            return Err(Error::Config(format!(
                "decoder widths {}/{} not divisible by {} norm groups",
                c1, c2, groups
            )));
        }
        Ok(DecoderState {
            block1: ConvBlock::init(embed_dim, c1, rng),
            block2: ConvBlock::init(c1, c2, rng),
            final_weight: Tensor::zeros(&[2, c2, 3, 3]),
            final_bias: Tensor::zeros(&[2]),
            groups,
        })
    }

    pub fn param_count(&self) -> usize {
        self.block1.param_count()
            + self.block2.param_count()
            + self.final_weight.numel()
            + self.final_bias.numel()
    }
}

/// Linear read-out of the class token.
#[derive(Clone, Debug)]
pub struct ScoreHeadState {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ScoreHeadState {
    pub fn init(embed_dim: usize) -> Self {
        ScoreHeadState {
            weight: Tensor::zeros(&[embed_dim]),
            bias: Tensor::zeros(&[1]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Per-pixel anomaly probabilities, the raw confidence map, and the
/// image-level score.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// [H × W], sigmoid of the map logits, strictly inside (0, 1)
    pub anomaly_map: Tensor,
    /// [H × W], unbounded
    pub confidence_raw: Tensor,
    /// in (0, 1)
    pub image_score: f64,
}

/// Row-major inverse of the patchify token order: [N×d] → [d×gh×gw].
pub fn reshape_tokens(out: &BackboneOutput, tape: &mut GradTape) -> Result<Tensor> {
    let (gh, gw) = out.grid;
    let (n, _) = out.patch_tokens.dims2()?;
    if n != gh * gw {
        return Err(Error::dim(
            "reshape_tokens",
            format!("{} tokens vs grid {}x{}", n, gh, gw),
        ));
    }
    ops::tokens_to_grid(&out.patch_tokens, gh, gw, tape)
}

fn upsample_block(x: &Tensor, block: &ConvBlock, groups: usize, tape: &mut GradTape) -> Result<Tensor> {
    let y = ops::conv2d(x, &block.weight, &block.bias, (1, 1), tape)?;
    let y = ops::groupnorm(&y, groups, &block.gn_gamma, &block.gn_beta, GN_EPS, tape)?;
    let y = ops::relu(&y, tape)?;
    let (_, h, w) = y.dims3()?;
    ops::bilinear_resize(&y, 2 * h, 2 * w, tape)
}

/// Decode patch features to full-resolution map logits and confidence.
pub fn decode(
    f_r: &Tensor,
    state: &DecoderState,
    out_h: usize,
    out_w: usize,
    tape: &mut GradTape,
) -> Result<(Tensor, Tensor)> {
    let x = upsample_block(f_r, &state.block1, state.groups, tape)?;
    let x = upsample_block(&x, &state.block2, state.groups, tape)?;
    let x = ops::conv2d(&x, &state.final_weight, &state.final_bias, (1, 1), tape)?;
    let x = ops::bilinear_resize(&x, out_h, out_w, tape)?;
    let map_logits = ops::reshape(&ops::slice_channels(&x, 0, 1, tape)?, &[out_h, out_w])?;
    let confidence = ops::reshape(&ops::slice_channels(&x, 1, 1, tape)?, &[out_h, out_w])?;
    Ok((map_logits, confidence))
}

/// Differentiable image-score logit w·cls + b.
pub fn score_logit(cls: &Tensor, head: &ScoreHeadState, tape: &mut GradTape) -> Result<Tensor> {
    let d = ops::dot(&head.weight, cls, tape)?;
    ops::add(&d, &head.bias, tape)
}

/// sigmoid(w·cls + b) ∈ (0, 1).
pub fn score_image(cls: &Tensor, head: &ScoreHeadState) -> Result<f64> {
    let mut tape = GradTape::inactive();
    let logit = score_logit(cls, head, &mut tape)?;
    let s = ops::sigmoid(&logit, &mut tape)?;
    s.item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneOutput;
    use crate::rng::derive_stream;

    #[test]
    fn reshape_tokens_shapes() {
        let tokens = Tensor::from_fn(&[64, 16], |i| i as f64);
        let out = BackboneOutput {
            patch_tokens: tokens,
            cls_token: Tensor::zeros(&[16]),
            grid: (8, 8),
        };
        let mut tape = GradTape::inactive();
        let grid = reshape_tokens(&out, &mut tape).unwrap();
        assert_eq!(grid.shape(), &[16, 8, 8]);
    }

    #[test]
    fn reshape_then_flatten_recovers_token_order() {
        let tokens = Tensor::from_fn(&[6, 4], |i| i as f64);
        let out = BackboneOutput {
            patch_tokens: tokens.clone(),
            cls_token: Tensor::zeros(&[4]),
            grid: (2, 3),
        };
        let mut tape = GradTape::inactive();
        let grid = reshape_tokens(&out, &mut tape).unwrap();
        for t in 0..6 {
            for ch in 0..4 {
                let (r, c) = (t / 3, t % 3);
                assert_eq!(grid.data()[ch * 6 + r * 3 + c], tokens.data()[t * 4 + ch]);
            }
        }
    }

    #[test]
    fn reshape_grid_mismatch_errors() {
        let out = BackboneOutput {
            patch_tokens: Tensor::zeros(&[6, 4]),
            cls_token: Tensor::zeros(&[4]),
            grid: (2, 2),
        };
        let mut tape = GradTape::inactive();
        assert!(reshape_tokens(&out, &mut tape).is_err());
    }

    #[test]
    fn decode_output_extents() {
        let mut rng = derive_stream(13, "heads-test", 0);
        let dec = DecoderState::init(16, &mut rng).unwrap();
        let f_r = Tensor::from_fn(&[16, 8, 8], |i| (i % 7) as f64 * 0.1);
        let mut tape = GradTape::inactive();
        let (map, c) = decode(&f_r, &dec, 64, 64, &mut tape).unwrap();
        assert_eq!(map.shape(), &[64, 64]);
        assert_eq!(c.shape(), &[64, 64]);
    }

    #[test]
    fn decode_zero_weights_emit_biases() {
        let mut rng = derive_stream(13, "heads-test", 1);
        let mut dec = DecoderState::init(16, &mut rng).unwrap();
        dec.final_weight = Tensor::zeros(dec.final_weight.shape());
        dec.final_bias = Tensor::from_vec(&[2], vec![0.75, -1.5]).unwrap();
        let f_r = Tensor::from_fn(&[16, 4, 4], |i| (i % 5) as f64);
        let mut tape = GradTape::inactive();
        let (map, c) = decode(&f_r, &dec, 16, 16, &mut tape).unwrap();
        for &v in map.data() {
            assert!((v - 0.75).abs() < 1e-12);
        }
        for &v in c.data() {
            assert!((v + 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_gradients_match_finite_differences() {
        use crate::gradcheck::{assert_close, finite_diff};
        let mut rng = derive_stream(13, "heads-test", 2);
        let dec = DecoderState::init_with_groups(8, 2, &mut rng).expect("decoder");
        let f_r = Tensor::from_fn(&[8, 4, 4], |i| ((i * 37) % 11) as f64 * 0.1 - 0.5);

        // check the first block's conv weights through the whole decoder
        let eval = |w: &Tensor| {
            let mut d = dec.clone();
            d.block1.weight = w.clone();
            // a non-zero final conv so gradients reach block1
            d.final_weight = Tensor::from_fn(d.final_weight.shape(), |i| ((i % 3) as f64 - 1.0) * 0.1);
            let mut quiet = GradTape::inactive();
            let (map, c) = decode(&f_r, &d, 8, 8, &mut quiet).unwrap();
            map.data().iter().sum::<f64>() + 0.5 * c.data().iter().sum::<f64>()
        };

        let mut d = dec.clone();
        d.final_weight = Tensor::from_fn(d.final_weight.shape(), |i| ((i % 3) as f64 - 1.0) * 0.1);
        let mut tape = GradTape::new();
        tape.watch(&mut d.block1.weight);
        let (map, c) = decode(&f_r, &d, 8, 8, &mut tape).unwrap();
        let sm = ops::sum(&map, &mut tape).unwrap();
        let sc = ops::sum(&c, &mut tape).unwrap();
        let half = ops::scale(&sc, 0.5, &mut tape).unwrap();
        let loss = ops::add(&sm, &half, &mut tape).unwrap();
        tape.backward(&loss).unwrap();

        let numeric = finite_diff(
            |coords| eval(&Tensor::from_vec(dec.block1.weight.shape(), coords.to_vec()).unwrap()),
            dec.block1.weight.data(),
            1e-6,
        );
        assert_close(
            tape.grad(&d.block1.weight).unwrap().data(),
            &numeric,
            1e-5,
            "decoder block1 weight",
        );
    }

    #[test]
    fn score_zero_head_is_half() {
        let head = ScoreHeadState::init(8);
        let cls = Tensor::from_fn(&[8], |i| i as f64);
        assert_eq!(score_image(&cls, &head).unwrap(), 0.5);
    }

    #[test]
    fn score_closed_form_three_quarters() {
        let mut head = ScoreHeadState::init(2);
        head.weight = Tensor::from_vec(&[2], vec![3f64.ln(), 0.0]).unwrap();
        let cls = Tensor::from_vec(&[2], vec![1.0, 5.0]).unwrap();
        let s = score_image(&cls, &head).unwrap();
        assert!((s - 0.75).abs() < 1e-12);
    }

    #[test]
    fn score_monotone_in_bias() {
        let mut head = ScoreHeadState::init(3);
        let cls = Tensor::from_vec(&[3], vec![0.2, -0.4, 1.0]).unwrap();
        let mut last = 0.0;
        for i in 0..5 {
            head.bias = Tensor::scalar(-1.0 + i as f64 * 0.5);
            let s = score_image(&cls, &head).unwrap();
            assert!(s > last);
            last = s;
        }
    }
}
