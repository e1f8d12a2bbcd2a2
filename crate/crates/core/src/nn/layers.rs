use gmmunit_autodiff::{Float, Tape, Var};

use super::params::{Bound, Init, ParamBuilder, ParamId, Part};

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

pub(crate) struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(pb: &mut ParamBuilder, part: Part, name: &str, s: ConvSpec, relu_follows: bool) -> Self {
        let fan_in = s.c_in * s.kh * s.kw;
        let gain = if relu_follows { RELU_GAIN } else { 1.0 };
        let w = pb.declare(
            part,
            format!("{name}.weight"),
            &[s.c_out, s.c_in, s.kh, s.kw],
            Init::FanIn { fan_in, gain },
        );
        let b = pb.declare(part, format!("{name}.bias"), &[s.c_out], Init::Zeros);
        Self {
            w,
            b,
            stride: s.stride,
            pad: s.pad,
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

pub(crate) fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> ConvSpec {
    ConvSpec {
        c_in,
        c_out,
        kh: k,
        kw: k,
        stride,
        pad,
    }
}

/// Unpadded stride-1 convolution with a `kh x kw` kernel.
pub(crate) fn conv_rect(c_in: usize, c_out: usize, kh: usize, kw: usize) -> ConvSpec {
    ConvSpec {
        c_in,
        c_out,
        kh,
        kw,
        stride: 1,
        pad: 0,
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn new(pb: &mut ParamBuilder, part: Part, name: &str, d_in: usize, d_out: usize, relu_follows: bool) -> Self {
        let gain = if relu_follows { RELU_GAIN } else { 1.0 };
        let w = pb.declare(
            part,
            format!("{name}.weight"),
            &[d_out, d_in],
            Init::FanIn { fan_in: d_in, gain },
        );
        let b = pb.declare(part, format!("{name}.bias"), &[d_out], Init::Zeros);
        Self { w, b }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

/// Layer normalization over (C, H, W) with a per-channel affine.
#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

pub(crate) const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, part: Part, name: &str, channels: usize) -> Self {
        let gamma = pb.declare(part, format!("{name}.gamma"), &[channels], Init::Ones);
        let beta = pb.declare(part, format!("{name}.beta"), &[channels], Init::Zeros);
        Self { gamma, beta }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let h = tape.layer_norm(x, T::of(NORM_EPS));
        tape.channel_affine(h, p.var(self.gamma), p.var(self.beta))
    }
}

/// conv - IN - ReLU - conv - IN, plus identity skip.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResBlock {
    pub fn new(pb: &mut ParamBuilder, part: Part, name: &str, channels: usize) -> Self {
        Self {
            conv1: Conv::new(pb, part, &format!("{name}.conv1"), conv(channels, channels, 3, 1, 1), true),
            conv2: Conv::new(pb, part, &format!("{name}.conv2"), conv(channels, channels, 3, 1, 1), false),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let eps = T::of(NORM_EPS);
        let h = self.conv1.forward(tape, p, x);
        let h = tape.instance_norm(h, eps);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h);
        let h = tape.instance_norm(h, eps);
        tape.add(x, h)
    }

    /// As [`ResBlock::forward`] with each normalization modulated by
    /// `(1 + scale, shift)` pairs taken from `adain`.
    pub fn forward_adain<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, adain: [(Var, Var); 2]) -> Var {
        let eps = T::of(NORM_EPS);
        let h = self.conv1.forward(tape, p, x);
        let h = tape.instance_norm(h, eps);
        let h = tape.modulate(h, adain[0].0, adain[0].1);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h);
        let h = tape.instance_norm(h, eps);
        let h = tape.modulate(h, adain[1].0, adain[1].1);
        tape.add(x, h)
    }
}
