//! Parameterized layers built from the primitive ops.

use crate::ops::{attention, ConvGeom};
use crate::params::{Ctx, Init, ParamId, ParamSink};
use crate::tape::Var;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Weight `[out, in]` drawn from `init`; bias (if any) starts at zero.
    pub fn new(sink: &mut dyn ParamSink, name: &str, in_f: usize, out_f: usize, init: Init, bias: bool) -> Self {
        let weight = sink.param(&format!("{name}.weight"), &[out_f, in_f], init);
        let bias = bias.then(|| sink.param(&format!("{name}.bias"), &[out_f], Init::Zeros));
        Self {
            weight,
            bias,
            in_features: in_f,
            out_features: out_f,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        let b = self.bias.map(|b| cx.p(b));
        x.linear(&cx.p(self.weight), b.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(sink: &mut dyn ParamSink, name: &str, dim: usize, eps: f32) -> Self {
        Self {
            gamma: sink.param(&format!("{name}.weight"), &[dim], Init::Ones),
            beta: sink.param(&format!("{name}.bias"), &[dim], Init::Zeros),
            eps,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        x.layer_norm(&cx.p(self.gamma), &cx.p(self.beta), self.eps)
    }
}

/// Multi-head attention with separate query/key/value projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(sink: &mut dyn ParamSink, name: &str, dim: usize, heads: usize, init: Init) -> Self {
        Self {
            q: Linear::new(sink, &format!("{name}.q"), dim, dim, init, true),
            k: Linear::new(sink, &format!("{name}.k"), dim, dim, init, true),
            v: Linear::new(sink, &format!("{name}.v"), dim, dim, init, true),
            out: Linear::new(sink, &format!("{name}.out"), dim, dim, init, true),
            heads,
        }
    }

    /// `queries: [Tq, D]` attend over `context: [Tk, D]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, queries: &Var<'t>, context: &Var<'t>, causal: bool) -> Var<'t> {
        let q = self.q.forward(cx, queries);
        let k = self.k.forward(cx, context);
        let v = self.v.forward(cx, context);
        let a = attention(&q, &k, &v, self.heads, causal);
        self.out.forward(cx, &a)
    }
}

/// Self-attention with one fused `[3D, D]` query/key/value projection.
#[derive(Clone, Debug)]
pub struct FusedSelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl FusedSelfAttention {
    pub fn new(sink: &mut dyn ParamSink, name: &str, dim: usize, heads: usize, init: Init) -> Self {
        Self {
            qkv: Linear::new(sink, &format!("{name}.qkv"), dim, 3 * dim, init, true),
            proj: Linear::new(sink, &format!("{name}.proj"), dim, dim, init, true),
            heads,
            dim,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        let qkv = self.qkv.forward(cx, x);
        let d = self.dim;
        let a = attention(
            &qkv.narrow_cols(0, d),
            &qkv.narrow_cols(d, d),
            &qkv.narrow_cols(2 * d, d),
            self.heads,
            false,
        );
        self.proj.forward(cx, &a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<'t>(self, x: &Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// Two-layer position-wise feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new(sink: &mut dyn ParamSink, name: &str, dim: usize, hidden: usize, act: Activation, init: Init) -> Self {
        Self {
            fc1: Linear::new(sink, &format!("{name}.fc1"), dim, hidden, init, true),
            fc2: Linear::new(sink, &format!("{name}.fc2"), hidden, dim, init, true),
            act,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        self.fc2.forward(cx, &self.act.apply(&self.fc1.forward(cx, x)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv3d {
    /// Weight `[out, in, kd, kh, kw]`, fan-in uniform init for weight and bias.
    pub fn new(sink: &mut dyn ParamSink, name: &str, cin: usize, cout: usize, geom: ConvGeom, bias: bool) -> Self {
        let fan_in = cin * geom.kernel_volume();
        let k = geom.kernel;
        let weight = sink.param(
            &format!("{name}.weight"),
            &[cout, cin, k[0], k[1], k[2]],
            Init::fan_in_uniform(fan_in),
        );
        let bias = bias.then(|| sink.param(&format!("{name}.bias"), &[cout], Init::fan_in_uniform(fan_in)));
        Self {
            weight,
            bias,
            geom,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        let b = self.bias.map(|b| cx.p(b));
        x.conv3d(&cx.p(self.weight), b.as_ref(), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose3d {
    /// Weight `[in, out, kd, kh, kw]`.
    pub fn new(sink: &mut dyn ParamSink, name: &str, cin: usize, cout: usize, geom: ConvGeom, bias: bool) -> Self {
        let fan_in = cout * geom.kernel_volume();
        let k = geom.kernel;
        let weight = sink.param(
            &format!("{name}.weight"),
            &[cin, cout, k[0], k[1], k[2]],
            Init::fan_in_uniform(fan_in),
        );
        let bias = bias.then(|| sink.param(&format!("{name}.bias"), &[cout], Init::fan_in_uniform(fan_in)));
        Self {
            weight,
            bias,
            geom,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        let b = self.bias.map(|b| cx.p(b));
        x.conv_transpose3d(&cx.p(self.weight), b.as_ref(), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(sink: &mut dyn ParamSink, name: &str, count: usize, dim: usize, init: Init) -> Self {
        Self {
            table: sink.param(&format!("{name}.weight"), &[count, dim], init),
            count,
            dim,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, ids: &[usize]) -> Var<'t> {
        cx.p(self.table).gather_rows(ids)
    }
}
