use gmmunit_autodiff::{Float, Tape, Var};

use super::layers::{conv, Conv, Dense, ResBlock, NORM_EPS};
use super::params::{Bound, ParamBuilder, Part};
use super::NetConfig;

/// Content encoder: stem, two stride-2 stages, residual blocks, all
/// instance-normalized.
#[derive(Clone, Debug)]
pub(crate) struct ContentEncoder {
    stem: Conv,
    down: [Conv; 2],
    blocks: Vec<ResBlock>,
}

impl ContentEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &NetConfig) -> Self {
        let part = Part::ContentEncoder;
        let d = cfg.base_channels;
        Self {
            stem: Conv::new(pb, part, "stem", conv(3, d, 7, 1, 3), true),
            down: [
                Conv::new(pb, part, "down0", conv(d, 2 * d, 4, 2, 1), true),
                Conv::new(pb, part, "down1", conv(2 * d, 4 * d, 4, 2, 1), true),
            ],
            blocks: (0..cfg.content_res_blocks)
                .map(|i| ResBlock::new(pb, part, &format!("res{i}"), 4 * d))
                .collect(),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let eps = T::of(NORM_EPS);
        let mut h = x;
        for layer in std::iter::once(&self.stem).chain(&self.down) {
            h = layer.forward(tape, p, h);
            h = tape.instance_norm(h, eps);
            h = tape.relu(h);
        }
        for block in &self.blocks {
            h = block.forward(tape, p, h);
        }
        h
    }
}

/// Attribute encoder: un-normalized conv stack, global average pooling and
/// two fully connected heads (posterior mean and log-variance).
#[derive(Clone, Debug)]
pub(crate) struct AttributeEncoder {
    stem: Conv,
    down: Vec<Conv>,
    mean_head: Dense,
    logvar_head: Dense,
    logvar_range: (f64, f64),
}

impl AttributeEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &NetConfig) -> Self {
        let part = Part::AttributeEncoder;
        let d = cfg.base_channels;
        let mut down = Vec::new();
        let mut ch = d;
        for i in 0..cfg.attr_downsamples {
            let next = (ch * 2).min(4 * d);
            down.push(Conv::new(pb, part, &format!("down{i}"), conv(ch, next, 4, 2, 1), true));
            ch = next;
        }
        Self {
            stem: Conv::new(pb, part, "stem", conv(3, d, 7, 1, 3), true),
            down,
            mean_head: Dense::new(pb, part, "fc_mean", ch, cfg.code_dim, false),
            logvar_head: Dense::new(pb, part, "fc_logvar", ch, cfg.code_dim, false),
            logvar_range: cfg.logvar_range,
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> (Var, Var) {
        let mut h = self.stem.forward(tape, p, x);
        h = tape.relu(h);
        for layer in &self.down {
            h = layer.forward(tape, p, h);
            h = tape.relu(h);
        }
        let pooled = tape.global_avg_pool(h);
        let mean = self.mean_head.forward(tape, p, pooled);
        let raw = self.logvar_head.forward(tape, p, pooled);
        let (lo, hi) = self.logvar_range;
        let logvar = tape.clamp(raw, T::of(lo), T::of(hi));
        (mean, logvar)
    }
}
