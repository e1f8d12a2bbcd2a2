use gmmunit_autodiff::{Float, Tape, Var};

use super::layers::{conv, conv_rect, Conv};
use super::params::{Bound, ParamBuilder, Part};
use super::NetConfig;

const LEAKY_SLOPE: f64 = 0.2;

/// Strided LeakyReLU conv stack with a 1x1 real/fake patch head and a domain
/// head whose kernel covers the whole final feature map.
#[derive(Clone, Debug)]
pub(crate) struct Discriminator {
    down: Vec<Conv>,
    rf_head: Conv,
    domain_head: Conv,
}

impl Discriminator {
    pub fn new(pb: &mut ParamBuilder, cfg: &NetConfig) -> Self {
        let part = Part::Discriminator;
        let mut down = Vec::new();
        let mut ch = 3;
        for i in 0..cfg.disc_downsamples {
            let next = cfg.base_channels << i;
            down.push(Conv::new(pb, part, &format!("down{i}"), conv(ch, next, 4, 2, 1), true));
            ch = next;
        }
        let (fh, fw) = cfg.disc_feature_size();
        Self {
            down,
            rf_head: Conv::new(pb, part, "rf_head", conv(ch, 1, 1, 1, 0), false),
            domain_head: Conv::new(pb, part, "domain_head", conv_rect(ch, cfg.n_domains, fh, fw), false),
        }
    }

    /// `(rf_map (n, 1, h', w'), domain_logits (n, k))`.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> (Var, Var) {
        let mut h = x;
        for layer in &self.down {
            h = layer.forward(tape, p, h);
            h = tape.leaky_relu(h, T::of(LEAKY_SLOPE));
        }
        let rf = self.rf_head.forward(tape, p, h);
        let logits = self.domain_head.forward(tape, p, h);
        let n = tape.shape(logits)[0];
        let k = tape.shape(logits)[1];
        let logits = tape.reshape(logits, &[n, k]);
        (rf, logits)
    }
}
