//! Decoders from image tokens to voxel probabilities: the parallel query
//! decoder, the transposed-convolution voxel decoder and the per-query MLP
//! alternative.

use std::sync::Arc;

use mvrecon_tensor::nn::{Activation, Conv3d, ConvTranspose3d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use mvrecon_tensor::{ConvGeom, Ctx, Init, ParamId, ParamSink, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::model::ModelError;

const INIT: Init = Init::TruncNormal { std: 0.02 };
const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// `M`: the decoder emits `M³` query states.
    pub query_side: usize,
}

impl DecoderConfig {
    pub fn base() -> Self {
        Self {
            layers: 8,
            heads: 12,
            dim: 768,
            query_side: 4,
        }
    }

    pub fn small() -> Self {
        Self {
            layers: 6,
            heads: 3,
            dim: 192,
            query_side: 4,
        }
    }

    pub fn queries(&self) -> usize {
        self.query_side.pow(3)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "decoder width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.query_side == 0 {
            return Err(ModelError::Config(
                "decoder needs layers and a positive query side".into(),
            ));
        }
        Ok(())
    }
}

/// `M³ × D` query states, row `k` owning cube cell
/// `(k / M², (k / M) % M, k % M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGrid {
    pub features: Tensor,
    pub query_side: usize,
}

/// Cube cell owned by query row `k`.
pub fn query_cell(k: usize, m: usize) -> (usize, usize, usize) {
    (k / (m * m), (k / m) % m, k % m)
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    fn new(sink: &mut dyn ParamSink, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(sink, &format!("{name}.norm1"), dim, LN_EPS),
            self_attn: MultiHeadAttention::new(sink, &format!("{name}.self_attn"), dim, heads, INIT),
            norm2: LayerNorm::new(sink, &format!("{name}.norm2"), dim, LN_EPS),
            cross_attn: MultiHeadAttention::new(sink, &format!("{name}.cross_attn"), dim, heads, INIT),
            norm3: LayerNorm::new(sink, &format!("{name}.norm3"), dim, LN_EPS),
            ffn: FeedForward::new(sink, &format!("{name}.ffn"), dim, 4 * dim, Activation::Relu, INIT),
        }
    }

    fn forward<'t>(&self, cx: &Ctx<'t>, x: &Var<'t>, memory: &Var<'t>, causal: bool) -> Var<'t> {
        let h = self.norm1.forward(cx, x);
        let x = x.add(&self.self_attn.forward(cx, &h, &h, causal));
        let h = self.norm2.forward(cx, &x);
        let x = x.add(&self.cross_attn.forward(cx, &h, memory, false));
        x.add(&self.ffn.forward(cx, &self.norm3.forward(cx, &x)))
    }
}

/// Stack of pre-norm (self-attention, cross-attention, feed-forward) layers.
#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
}

impl TransformerDecoder {
    pub fn new(sink: &mut dyn ParamSink, name: &str, layers: usize, dim: usize, heads: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| DecoderLayer::new(sink, &format!("{name}.layers.{i}"), dim, heads))
                .collect(),
            norm: LayerNorm::new(sink, &format!("{name}.norm"), dim, LN_EPS),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: &Var<'t>, memory: &Var<'t>, causal: bool) -> Var<'t> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = layer.forward(cx, &x, memory, causal);
        }
        self.norm.forward(cx, &x)
    }
}

/// Decodes all `M³` learned queries at once against the image tokens.
#[derive(Clone, Debug)]
pub struct QueryDecoder {
    queries: ParamId,
    stack: TransformerDecoder,
    cfg: DecoderConfig,
}

impl QueryDecoder {
    pub fn new(sink: &mut dyn ParamSink, cfg: &DecoderConfig) -> Self {
        Self {
            queries: sink.param("decoder.queries", &[cfg.queries(), cfg.dim], INIT),
            stack: TransformerDecoder::new(sink, "decoder", cfg.layers, cfg.dim, cfg.heads),
            cfg: cfg.clone(),
        }
    }

    /// `memory: [T, D]` → `[M³, D]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, memory: &Var<'t>) -> Result<Var<'t>, ModelError> {
        if memory.shape().len() != 2 || memory.shape()[1] != self.cfg.dim {
            return Err(ModelError::Config(format!(
                "memory of shape {:?} does not match decoder width {}",
                memory.shape(),
                self.cfg.dim
            )));
        }
        Ok(self.stack.forward(cx, &cx.p(self.queries), memory, false))
    }
}

/// `[M³, D]` query states → `[D, M, M, M]` feature cube.
pub fn reshape_to_cube<'t>(grid: &Var<'t>, m: usize) -> Var<'t> {
    let d = grid.shape()[1];
    assert_eq!(grid.shape()[0], m * m * m, "query count is not M³");
    grid.transpose().reshape([d, m, m, m])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnDecoderConfig {
    pub channels: usize,
    pub upsample_stages: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for CnnDecoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            upsample_stages: 3,
            kernel: 4,
            stride: 2,
            padding: 1,
        }
    }
}

impl CnnDecoderConfig {
    /// Output side for an input cube of side `m`.
    pub fn output_side(&self, m: usize) -> usize {
        (0..self.upsample_stages).fold(m, |n, _| (n - 1) * self.stride + self.kernel - 2 * self.padding)
    }

    pub fn validate(&self, query_side: usize, resolution: usize) -> Result<(), ModelError> {
        if self.channels == 0 || self.stride == 0 || self.kernel < 2 * self.padding {
            return Err(ModelError::Config("invalid voxel decoder geometry".into()));
        }
        let out = self.output_side(query_side);
        if out != resolution || query_side * self.stride.pow(self.upsample_stages as u32) != resolution {
            return Err(ModelError::Config(format!(
                "{} upsampling stages from side {query_side} give side {out}, expected {resolution}",
                self.upsample_stages
            )));
        }
        Ok(())
    }
}

/// Shape-preserving block: `relu(conv3(relu(conv3(x))) + conv1(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
    pub skip: Conv3d,
}

impl ResidualBlock {
    pub fn new(sink: &mut dyn ParamSink, name: &str, channels: usize) -> Self {
        Self {
            conv1: Conv3d::new(
                sink,
                &format!("{name}.conv1"),
                channels,
                channels,
                ConvGeom::cube(3, 1, 1),
                true,
            ),
            conv2: Conv3d::new(
                sink,
                &format!("{name}.conv2"),
                channels,
                channels,
                ConvGeom::cube(3, 1, 1),
                true,
            ),
            skip: Conv3d::new(
                sink,
                &format!("{name}.skip"),
                channels,
                channels,
                ConvGeom::cube(1, 1, 0),
                true,
            ),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        let main = self.conv2.forward(cx, &self.conv1.forward(cx, x).relu());
        main.add(&self.skip.forward(cx, x)).relu()
    }
}

/// Feature cube → voxel probabilities through stride-2 transposed convolutions.
#[derive(Clone, Debug)]
pub struct CnnDecoder {
    input: Conv3d,
    upsample: Vec<ConvTranspose3d>,
    blocks: Vec<ResidualBlock>,
    head: Conv3d,
}

impl CnnDecoder {
    pub fn new(sink: &mut dyn ParamSink, name: &str, in_dim: usize, cfg: &CnnDecoderConfig) -> Self {
        let c = cfg.channels;
        let geom = ConvGeom::cube(cfg.kernel, cfg.stride, cfg.padding);
        Self {
            input: Conv3d::new(sink, &format!("{name}.input"), in_dim, c, ConvGeom::cube(1, 1, 0), true),
            upsample: (0..cfg.upsample_stages)
                .map(|i| ConvTranspose3d::new(sink, &format!("{name}.up.{i}"), c, c, geom, true))
                .collect(),
            blocks: (0..cfg.upsample_stages.saturating_sub(1))
                .map(|i| ResidualBlock::new(sink, &format!("{name}.res.{i}"), c))
                .collect(),
            head: Conv3d::new(sink, &format!("{name}.head"), c, 1, ConvGeom::cube(1, 1, 0), true),
        }
    }

    /// `[D, M, M, M]` → `[R, R, R]` probabilities in (0, 1).
    pub fn forward<'t>(&self, cx: &Ctx<'t>, cube: &Var<'t>) -> Var<'t> {
        let mut x = self.input.forward(cx, cube);
        for (i, up) in self.upsample.iter().enumerate() {
            x = up.forward(cx, &x).relu();
            if let Some(block) = self.blocks.get(i) {
                x = block.forward(cx, &x);
            }
        }
        let out = self.head.forward(cx, &x).sigmoid();
        let side = out.shape()[1..].to_vec();
        out.reshape(side)
    }
}

/// One affine map per query from `D` to an `(R/M)³` sub-block.
#[derive(Clone, Debug)]
pub struct MlpDecoder {
    linear: Linear,
    index: Arc<Vec<usize>>,
    resolution: usize,
}

impl MlpDecoder {
    pub fn new(sink: &mut dyn ParamSink, dim: usize, query_side: usize, resolution: usize) -> Result<Self, ModelError> {
        if query_side == 0 || !resolution.is_multiple_of(query_side) {
            return Err(ModelError::Config(format!(
                "resolution {resolution} is not divisible by query side {query_side}"
            )));
        }
        let b = resolution / query_side;
        let linear = Linear::new(sink, "head.mlp", dim, b * b * b, INIT, true);
        // Voxel (x, y, z) reads output (query, local offset) of the [M³, b³] map.
        let mut index = Vec::with_capacity(resolution.pow(3));
        for x in 0..resolution {
            for y in 0..resolution {
                for z in 0..resolution {
                    let q = ((x / b) * query_side + y / b) * query_side + z / b;
                    let local = ((x % b) * b + y % b) * b + z % b;
                    index.push(q * b * b * b + local);
                }
            }
        }
        Ok(Self {
            linear,
            index: Arc::new(index),
            resolution,
        })
    }

    /// `[M³, D]` → `[R, R, R]` probabilities.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, grid: &Var<'t>) -> Var<'t> {
        let r = self.resolution;
        self.linear
            .forward(cx, grid)
            .gather_flat(self.index.clone(), [r, r, r])
            .sigmoid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvrecon_tensor::{ParamCounter, ParamStore, Tape};

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape));
        }
    }

    fn pseudo(shape: &[usize], seed: f32) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec(
            shape.to_vec(),
            (0..n).map(|i| ((i as f32 + seed) * 0.618).sin()).collect(),
        )
    }

    #[test]
    fn query_cell_linearization() {
        for k in 0..64 {
            assert_eq!(query_cell(k, 4), (k / 16, (k / 4) % 4, k % 4));
        }
    }

    #[test]
    fn cube_reshape_places_rows_at_their_cells() {
        let tape = Tape::new();
        let (m, d) = (4, 3);
        let grid = pseudo(&[m * m * m, d], 1.0);
        let cube = reshape_to_cube(&tape.constant(grid.clone()), m);
        assert_eq!(cube.shape(), &[d, m, m, m]);
        for k in 0..m * m * m {
            let (x, y, z) = query_cell(k, m);
            for c in 0..d {
                assert_eq!(
                    cube.value().data()[((c * m + x) * m + y) * m + z],
                    grid.data()[k * d + c]
                );
            }
        }
        let back = cube.reshape([d, m * m * m]).transpose();
        assert_eq!(back.value(), &grid);
    }

    #[test]
    fn query_decoder_shape_and_determinism() {
        let cfg = DecoderConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            query_side: 4,
        };
        let mut store = ParamStore::new(5);
        let dec = QueryDecoder::new(&mut store, &cfg);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, false);
        let mem = cx.constant(pseudo(&[9, 16], 2.0));
        let a = dec.forward(&cx, &mem).unwrap();
        let b = dec.forward(&cx, &mem).unwrap();
        assert_eq!(a.shape(), &[64, 16]);
        assert_eq!(a.value(), b.value());
        assert!(dec.forward(&cx, &cx.constant(Tensor::zeros([9, 8]))).is_err());
    }

    #[test]
    fn zero_cross_attention_output_ignores_memory() {
        let cfg = DecoderConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            query_side: 2,
        };
        let mut store = ParamStore::new(6);
        let dec = QueryDecoder::new(&mut store, &cfg);
        for suffix in ["weight", "bias"] {
            let id = store.id(&format!("decoder.layers.0.cross_attn.out.{suffix}")).unwrap();
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape));
        }
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, false);
        let a = dec.forward(&cx, &cx.constant(Tensor::zeros([5, 8]))).unwrap();
        let b = dec.forward(&cx, &cx.constant(pseudo(&[5, 8], 3.0))).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn cross_attention_treats_memory_as_a_set() {
        // Token order only matters through the encoder's positional embeddings.
        let cfg = DecoderConfig {
            layers: 1,
            heads: 1,
            dim: 4,
            query_side: 2,
        };
        let mut store = ParamStore::new(7);
        let dec = QueryDecoder::new(&mut store, &cfg);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, false);
        let mem = pseudo(&[3, 4], 4.0);
        let mut rev = Vec::new();
        for r in (0..3).rev() {
            rev.extend_from_slice(&mem.data()[r * 4..(r + 1) * 4]);
        }
        let a = dec.forward(&cx, &cx.constant(mem)).unwrap();
        let b = dec.forward(&cx, &cx.constant(Tensor::from_vec([3, 4], rev))).unwrap();
        assert!(a.value().max_abs_diff(b.value()) < 1e-5);
    }

    #[test]
    fn cnn_decoder_sizes_and_zero_output() {
        let cfg = CnnDecoderConfig {
            channels: 4,
            ..Default::default()
        };
        assert_eq!(cfg.output_side(4), 32);
        assert!(cfg.validate(4, 32).is_ok());
        assert!(cfg.validate(4, 64).is_err());
        let mut store = ParamStore::new(8);
        let dec = CnnDecoder::new(&mut store, "head.cnn", 6, &cfg);
        let tape = Tape::new();
        let cube = pseudo(&[6, 4, 4, 4], 5.0);
        let out = dec.forward(&Ctx::new(&tape, &store, false), &tape.constant(cube.clone()));
        assert_eq!(out.shape(), &[32, 32, 32]);
        assert!(out.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        zero_all(&mut store);
        let out = dec.forward(&Ctx::new(&tape, &store, false), &tape.constant(cube));
        assert!(out.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn residual_block_identity_skip() {
        let c = 3;
        let mut store = ParamStore::new(9);
        let block = ResidualBlock::new(&mut store, "r", c);
        zero_all(&mut store);
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        store.set(block.skip.weight, Tensor::from_vec([c, c, 1, 1, 1], eye));
        let x = pseudo(&[c, 8, 8, 8], 6.0);
        let tape = Tape::new();
        let out = block.forward(&Ctx::new(&tape, &store, false), &tape.constant(x.clone()));
        assert_eq!(out.value(), &x.map(|v| v.max(0.0)));
    }

    #[test]
    fn residual_block_passes_gradient_to_both_paths() {
        let mut store = ParamStore::new(10);
        let block = ResidualBlock::new(&mut store, "r", 2);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, true);
        let out = block.forward(&cx, &tape.constant(pseudo(&[2, 8, 8, 8], 7.0)));
        assert_eq!(out.shape(), &[2, 8, 8, 8]);
        let mut grads = tape.backward(&out.sum());
        let g = cx.param_grads(&mut grads);
        for id in [block.skip.weight, block.conv1.weight] {
            assert!(g[id.0].as_ref().unwrap().data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn mlp_decoder_geometry() {
        let mut c = ParamCounter::default();
        MlpDecoder::new(&mut c, 8, 4, 32).unwrap();
        assert_eq!(c.trainable, 8 * 512 + 512);
        assert!(MlpDecoder::new(&mut ParamCounter::default(), 8, 5, 32).is_err());

        let mut store = ParamStore::new(11);
        let dec = MlpDecoder::new(&mut store, 4, 4, 32).unwrap();
        let tape = Tape::new();
        let mut rows = pseudo(&[64, 4], 8.0);
        // Queries 0 and 63 share features, so their sub-blocks must match.
        let first: Vec<f32> = rows.data()[..4].to_vec();
        rows.data_mut()[63 * 4..].copy_from_slice(&first);
        let out = dec.forward(&Ctx::new(&tape, &store, false), &tape.constant(rows));
        let v = out.value().data();
        assert_eq!(v.len(), 32 * 32 * 32);
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..8 {
                    let a = v[(x * 32 + y) * 32 + z];
                    let b = v[((24 + x) * 32 + 24 + y) * 32 + 24 + z];
                    assert_eq!(a, b);
                }
            }
        }
        zero_all(&mut store);
        let out = dec.forward(&Ctx::new(&tape, &store, false), &tape.constant(Tensor::ones([64, 4])));
        assert!(out.value().data().iter().all(|&v| v == 0.5));
    }
}
