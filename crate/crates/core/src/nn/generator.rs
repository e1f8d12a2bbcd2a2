use gmmunit_autodiff::{Float, Tape, Var};

use super::layers::{conv, Conv, Dense, LayerNorm, ResBlock, NORM_EPS};
use super::params::{Bound, ParamBuilder, Part};
use super::NetConfig;

/// Decoder from (content, attribute code) to an image.
///
/// The code drives every instance normalization of the residual stage
/// through a two-layer mapping that emits `(scale, shift)` pairs; scales are
/// applied as `1 + scale`. Two bilinear-upsample + conv stages with layer
/// normalization restore full resolution. An optional head predicts a
/// one-channel blending mask from the penultimate features.
#[derive(Clone, Debug)]
pub(crate) struct Generator {
    /// Image stem replacing the content encoder in the entangled ablation.
    stem: Option<[Conv; 3]>,
    mlp_hidden: Dense,
    mlp_out: Dense,
    blocks: Vec<ResBlock>,
    up: [(Conv, LayerNorm); 2],
    to_rgb: Conv,
    attention: Option<Conv>,
    content_channels: usize,
    guidance_channel: bool,
}

impl Generator {
    pub fn new(pb: &mut ParamBuilder, cfg: &NetConfig) -> Self {
        let part = Part::Generator;
        let d = cfg.base_channels;
        let cc = 4 * d;
        let stem = (!cfg.disentangled).then(|| {
            [
                Conv::new(pb, part, "stem", conv(3, d, 7, 1, 3), true),
                Conv::new(pb, part, "stem_down0", conv(d, 2 * d, 4, 2, 1), true),
                Conv::new(pb, part, "stem_down1", conv(2 * d, cc, 4, 2, 1), true),
            ]
        });
        let adain_params = cfg.gen_res_blocks * 2 * 2 * cc;
        Self {
            stem,
            mlp_hidden: Dense::new(pb, part, "mlp0", cfg.code_dim, cfg.mlp_dim, true),
            mlp_out: Dense::new(pb, part, "mlp1", cfg.mlp_dim, adain_params, false),
            blocks: (0..cfg.gen_res_blocks)
                .map(|i| ResBlock::new(pb, part, &format!("res{i}"), cc))
                .collect(),
            up: [
                (
                    Conv::new(pb, part, "up0", conv(cc, 2 * d, 5, 1, 2), true),
                    LayerNorm::new(pb, part, "up0.norm", 2 * d),
                ),
                (
                    Conv::new(pb, part, "up1", conv(2 * d, d, 5, 1, 2), true),
                    LayerNorm::new(pb, part, "up1.norm", d),
                ),
            ],
            to_rgb: Conv::new(pb, part, "to_rgb", conv(d, 3, 7, 1, 3), false),
            attention: cfg.attention.then(|| {
                let c_in = d + usize::from(cfg.guidance_channel);
                Conv::new(pb, part, "attention", conv(c_in, 1, 7, 1, 3), false)
            }),
            content_channels: cc,
            guidance_channel: cfg.guidance_channel,
        }
    }

    /// Returns the raw `tanh` image and, when enabled, the sigmoid mask.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        content: Var,
        code: Var,
        guidance: Option<Var>,
    ) -> (Var, Option<Var>) {
        let eps = T::of(NORM_EPS);
        let mut h = content;
        if let Some(stem) = &self.stem {
            for layer in stem {
                h = layer.forward(tape, p, h);
                h = tape.instance_norm(h, eps);
                h = tape.relu(h);
            }
        }

        let hidden = self.mlp_hidden.forward(tape, p, code);
        let hidden = tape.relu(hidden);
        let adain = self.mlp_out.forward(tape, p, hidden);
        let cc = self.content_channels;
        let mut cursor = 0;
        let mut next_pair = |tape: &mut Tape<T>| {
            let scale = tape.slice_cols(adain, cursor, cc);
            let scale = tape.offset(scale, T::one());
            let shift = tape.slice_cols(adain, cursor + cc, cc);
            cursor += 2 * cc;
            (scale, shift)
        };
        for block in &self.blocks {
            let pairs = [next_pair(tape), next_pair(tape)];
            h = block.forward_adain(tape, p, h, pairs);
        }

        for (layer, norm) in &self.up {
            h = tape.upsample2x(h);
            h = layer.forward(tape, p, h);
            h = norm.forward(tape, p, h);
            h = tape.relu(h);
        }

        let rgb = self.to_rgb.forward(tape, p, h);
        let raw = tape.tanh(rgb);
        let mask = self.attention.as_ref().map(|att| {
            let input = if self.guidance_channel {
                let g = guidance.unwrap_or_else(|| {
                    let (n, _, hh, ww) = tape.value(h).dims4();
                    tape.constant(gmmunit_autodiff::Tensor::zeros(&[n, 1, hh, ww]))
                });
                tape.concat_channels(&[h, g])
            } else {
                h
            };
            let logits = att.forward(tape, p, input);
            tape.sigmoid(logits)
        });
        (raw, mask)
    }
}
