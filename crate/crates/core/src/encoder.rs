//! Image encoders: a patch transformer (base and tiny widths), a residual
//! CNN alternative, multi-view pooling and pretrained-weight import.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mvrecon_tensor::nn::{Activation, Conv3d, FeedForward, FusedSelfAttention, LayerNorm, Linear};
use mvrecon_tensor::ops::concat_rows;
use mvrecon_tensor::{Archive, ConvGeom, Ctx, Init, ParamId, ParamSink, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::model::ModelError;

const QUERY_INIT: Init = Init::TruncNormal { std: 0.02 };
const LN_EPS: f32 = 1e-6;
const BN_EPS: f32 = 1e-5;

/// Archive → parameter name map for patch-transformer weights.
pub const DEIT_NAME_MAP: &str = include_str!("../data/deit_names.txt");
/// Archive → parameter name map for residual-CNN weights.
pub const RESNET50_NAME_MAP: &str = include_str!("../data/resnet50_names.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Base,
    Tiny,
    Resnet50,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub patch_size: usize,
    /// Tokens per side of the output grid; `T = token_grid²`.
    pub token_grid: usize,
    /// Import weights from `weights` at construction.
    pub pretrained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Whether a classification token takes part in self-attention. It never
    /// appears in the encoder output.
    #[serde(default)]
    pub cls_token: bool,
}

impl EncoderConfig {
    /// 12 layers, 12 heads, width 768, 16-pixel patches on a 14×14 grid.
    pub fn base() -> Self {
        Self {
            variant: EncoderVariant::Base,
            layers: 12,
            heads: 12,
            dim: 768,
            patch_size: 16,
            token_grid: 14,
            pretrained: false,
            weights: None,
            cls_token: true,
        }
    }

    /// 12 layers, 3 heads, width 192.
    pub fn tiny() -> Self {
        Self {
            variant: EncoderVariant::Tiny,
            heads: 3,
            dim: 192,
            ..Self::base()
        }
    }

    /// 50-layer residual CNN; one token per 32×32 pixel cell.
    pub fn resnet50(dim: usize, image_size: usize) -> Self {
        Self {
            variant: EncoderVariant::Resnet50,
            layers: 50,
            heads: 1,
            dim,
            patch_size: 32,
            token_grid: image_size / 32,
            pretrained: false,
            weights: None,
            cls_token: false,
        }
    }

    /// A 16×16 token grid from 14-pixel patches on the same 224-pixel input.
    pub fn with_token_grid_16(self) -> Self {
        Self {
            patch_size: 14,
            token_grid: 16,
            ..self
        }
    }

    pub fn image_size(&self) -> usize {
        self.patch_size * self.token_grid
    }

    pub fn tokens(&self) -> usize {
        self.token_grid * self.token_grid
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "encoder width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.token_grid == 0 {
            return Err(ModelError::Config(
                "encoder patch size and token grid must be positive".into(),
            ));
        }
        if self.variant != EncoderVariant::Resnet50 && self.layers == 0 {
            return Err(ModelError::Config("encoder needs at least one layer".into()));
        }
        if self.pretrained && self.weights.is_none() {
            return Err(ModelError::Config(
                "pretrained encoder requested without a weights path".into(),
            ));
        }
        Ok(())
    }
}

/// Encoded tokens of one view, or the pooled tokens of several.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeq {
    /// `[T, D]`
    pub tokens: Tensor,
    pub token_grid: usize,
}

impl FeatureSeq {
    pub fn new(tokens: Tensor, token_grid: usize) -> Result<Self, ModelError> {
        if tokens.rank() != 2 || tokens.shape()[0] != token_grid * token_grid {
            return Err(ModelError::Argument(format!(
                "token tensor {:?} does not match a {token_grid}×{token_grid} grid",
                tokens.shape()
            )));
        }
        if !tokens.is_finite() {
            return Err(ModelError::Argument("feature tokens must be finite".into()));
        }
        Ok(Self { tokens, token_grid })
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Splits a `[3, S, S]` image into `[T, 3·P²]` rows; row `k` holds the patch
/// at grid cell `(k / G, k % G)`, flattened channel-first then row-major.
pub fn patchify(image: &Tensor, patch: usize, grid: usize) -> Result<Tensor, ModelError> {
    let s = patch * grid;
    if image.shape() != [3, s, s] {
        return Err(ModelError::Argument(format!(
            "image of shape {:?}, expected [3, {s}, {s}]",
            image.shape()
        )));
    }
    let width = 3 * patch * patch;
    let mut out = Vec::with_capacity(grid * grid * width);
    let data = image.data();
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..3 {
                for py in 0..patch {
                    let row = (c * s + gy * patch + py) * s + gx * patch;
                    out.extend_from_slice(&data[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor::from_vec([grid * grid, width], out))
}

/// Mean of per-view token sequences, exactly invariant to view order.
///
/// Views are summed in a canonical order (sorted by content) so the
/// floating-point result does not depend on how the caller ordered them.
pub fn pool_views(seqs: &[FeatureSeq]) -> Result<FeatureSeq, ModelError> {
    let first = seqs
        .first()
        .ok_or_else(|| ModelError::Argument("cannot pool an empty list of views".into()))?;
    for s in seqs {
        if s.tokens.shape() != first.tokens.shape() || s.token_grid != first.token_grid {
            return Err(ModelError::Argument(format!(
                "view token shapes differ: {:?} vs {:?}",
                s.tokens.shape(),
                first.tokens.shape()
            )));
        }
    }
    let order = canonical_order(seqs.iter().map(|s| s.tokens.data()));
    let mut acc = vec![0.0f32; first.tokens.numel()];
    for &i in &order {
        for (a, v) in acc.iter_mut().zip(seqs[i].tokens.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / seqs.len() as f32;
    acc.iter_mut().for_each(|a| *a *= inv);
    FeatureSeq::new(Tensor::from_vec(first.tokens.shape().to_vec(), acc), first.token_grid)
}

/// Differentiable counterpart of [`pool_views`] with the same summation order.
pub fn pool_view_vars<'t>(views: &[Var<'t>]) -> Var<'t> {
    assert!(!views.is_empty(), "cannot pool an empty list of views");
    let order = canonical_order(views.iter().map(|v| v.value().data()));
    let sorted: Vec<Var<'t>> = order.iter().map(|&i| views[i].clone()).collect();
    mvrecon_tensor::ops::mean_of(&sorted)
}

fn canonical_order<'a>(items: impl Iterator<Item = &'a [f32]>) -> Vec<usize> {
    let items: Vec<&[f32]> = items.collect();
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[a]
            .iter()
            .zip(items[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// One pre-norm transformer block with a fused attention projection.
#[derive(Clone, Debug)]
struct VitBlock {
    norm1: LayerNorm,
    attn: FusedSelfAttention,
    norm2: LayerNorm,
    mlp: FeedForward,
}

impl VitBlock {
    fn new(sink: &mut dyn ParamSink, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(sink, &format!("{name}.norm1"), dim, LN_EPS),
            attn: FusedSelfAttention::new(sink, &format!("{name}.attn"), dim, heads, QUERY_INIT),
            norm2: LayerNorm::new(sink, &format!("{name}.norm2"), dim, LN_EPS),
            mlp: FeedForward::new(sink, &format!("{name}.mlp"), dim, 4 * dim, Activation::Gelu, QUERY_INIT),
        }
    }

    fn forward<'t>(&self, cx: &Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        let x = x.add(&self.attn.forward(cx, &self.norm1.forward(cx, x)));
        x.add(&self.mlp.forward(cx, &self.norm2.forward(cx, &x)))
    }
}

/// Patch transformer encoder.
#[derive(Clone, Debug)]
pub struct VitEncoder {
    patch_embed: Linear,
    cls_token: Option<ParamId>,
    pos_embed: ParamId,
    blocks: Vec<VitBlock>,
    norm: LayerNorm,
    patch: usize,
    grid: usize,
}

impl VitEncoder {
    pub fn new(sink: &mut dyn ParamSink, cfg: &EncoderConfig) -> Self {
        let d = cfg.dim;
        let patch_embed = Linear::new(
            sink,
            "encoder.patch_embed",
            3 * cfg.patch_size * cfg.patch_size,
            d,
            QUERY_INIT,
            true,
        );
        let cls_token = cfg
            .cls_token
            .then(|| sink.param("encoder.cls_token", &[1, d], QUERY_INIT));
        let positions = cfg.tokens() + cfg.cls_token as usize;
        let pos_embed = sink.param("encoder.pos_embed", &[positions, d], QUERY_INIT);
        let blocks = (0..cfg.layers)
            .map(|i| VitBlock::new(sink, &format!("encoder.blocks.{i}"), d, cfg.heads))
            .collect();
        Self {
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNorm::new(sink, "encoder.norm", d, LN_EPS),
            patch: cfg.patch_size,
            grid: cfg.token_grid,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, image: &Tensor) -> Result<Var<'t>, ModelError> {
        let patches = cx.constant(patchify(image, self.patch, self.grid)?);
        let mut x = self.patch_embed.forward(cx, &patches);
        if let Some(cls) = self.cls_token {
            x = concat_rows(&[cx.p(cls), x]);
        }
        x = x.add(&cx.p(self.pos_embed));
        for block in &self.blocks {
            x = block.forward(cx, &x);
        }
        let x = self.norm.forward(cx, &x);
        let t = self.grid * self.grid;
        Ok(match self.cls_token {
            Some(_) => x.narrow_rows(1, t),
            None => x,
        })
    }
}

/// Batch normalization with frozen running statistics (inference form).
#[derive(Clone, Debug)]
struct FrozenBatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl FrozenBatchNorm {
    fn new(sink: &mut dyn ParamSink, name: &str, channels: usize) -> Self {
        Self {
            gamma: sink.param(&format!("{name}.weight"), &[channels], Init::Ones),
            beta: sink.param(&format!("{name}.bias"), &[channels], Init::Zeros),
            mean: sink.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros),
            var: sink.buffer(&format!("{name}.running_var"), &[channels], Init::Ones),
        }
    }

    fn forward<'t>(&self, cx: &Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        let store = cx.store();
        let inv_std = store.get(self.var).map(|v| 1.0 / (v + BN_EPS).sqrt());
        let scale = cx.p(self.gamma).mul(&cx.constant(inv_std));
        let shift = cx.p(self.beta).sub(&cx.p(self.mean).mul(&scale));
        x.channel_affine(&scale, &shift)
    }
}

/// Three-convolution residual unit with 4× channel expansion; the stride
/// sits on the 3×3 convolution.
#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv3d,
    bn1: FrozenBatchNorm,
    conv2: Conv3d,
    bn2: FrozenBatchNorm,
    conv3: Conv3d,
    bn3: FrozenBatchNorm,
    downsample: Option<(Conv3d, FrozenBatchNorm)>,
}

impl Bottleneck {
    fn new(sink: &mut dyn ParamSink, name: &str, cin: usize, width: usize, stride: usize) -> Self {
        let cout = width * 4;
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv3d::new(
                    sink,
                    &format!("{name}.downsample.0"),
                    cin,
                    cout,
                    ConvGeom::planar(1, stride, 0),
                    false,
                ),
                FrozenBatchNorm::new(sink, &format!("{name}.downsample.1"), cout),
            )
        });
        Self {
            conv1: Conv3d::new(
                sink,
                &format!("{name}.conv1"),
                cin,
                width,
                ConvGeom::planar(1, 1, 0),
                false,
            ),
            bn1: FrozenBatchNorm::new(sink, &format!("{name}.bn1"), width),
            conv2: Conv3d::new(
                sink,
                &format!("{name}.conv2"),
                width,
                width,
                ConvGeom::planar(3, stride, 1),
                false,
            ),
            bn2: FrozenBatchNorm::new(sink, &format!("{name}.bn2"), width),
            conv3: Conv3d::new(
                sink,
                &format!("{name}.conv3"),
                width,
                cout,
                ConvGeom::planar(1, 1, 0),
                false,
            ),
            bn3: FrozenBatchNorm::new(sink, &format!("{name}.bn3"), cout),
            downsample,
        }
    }

    fn forward<'t>(&self, cx: &Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        let h = self.bn1.forward(cx, &self.conv1.forward(cx, x)).relu();
        let h = self.bn2.forward(cx, &self.conv2.forward(cx, &h)).relu();
        let h = self.bn3.forward(cx, &self.conv3.forward(cx, &h));
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(cx, &conv.forward(cx, x)),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }
}

/// 50-layer residual CNN followed by a learned 2048 → D token projection.
#[derive(Clone, Debug)]
pub struct ResNetEncoder {
    conv1: Conv3d,
    bn1: FrozenBatchNorm,
    stages: Vec<Vec<Bottleneck>>,
    proj: Linear,
    image_size: usize,
}

impl ResNetEncoder {
    pub fn new(sink: &mut dyn ParamSink, cfg: &EncoderConfig) -> Self {
        let p = "encoder.backbone";
        let conv1 = Conv3d::new(sink, &format!("{p}.conv1"), 3, 64, ConvGeom::planar(7, 2, 3), false);
        let bn1 = FrozenBatchNorm::new(sink, &format!("{p}.bn1"), 64);
        let mut cin = 64;
        let mut stages = Vec::new();
        for (s, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let stage = (0..blocks)
                .map(|b| {
                    let block = Bottleneck::new(
                        sink,
                        &format!("{p}.layer{}.{b}", s + 1),
                        cin,
                        width,
                        if b == 0 { stride } else { 1 },
                    );
                    cin = width * 4;
                    block
                })
                .collect();
            stages.push(stage);
        }
        let proj = Linear::new(sink, "encoder.proj", 2048, cfg.dim, QUERY_INIT, true);
        Self {
            conv1,
            bn1,
            stages,
            proj,
            image_size: cfg.image_size(),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, image: &Tensor) -> Result<Var<'t>, ModelError> {
        let s = self.image_size;
        if image.shape() != [3, s, s] {
            return Err(ModelError::Argument(format!(
                "image of shape {:?}, expected [3, {s}, {s}]",
                image.shape()
            )));
        }
        let x = cx.constant(image.clone().reshape([3, 1, s, s]));
        let x = self.bn1.forward(cx, &self.conv1.forward(cx, &x)).relu();
        let mut x = x.max_pool3d(ConvGeom::planar(3, 2, 1));
        for stage in &self.stages {
            for block in stage {
                x = block.forward(cx, &x);
            }
        }
        let shape = x.shape().to_vec();
        let t = shape[2] * shape[3];
        let tokens = x.reshape([shape[0], t]).transpose();
        Ok(self.proj.forward(cx, &tokens))
    }
}

/// Either encoder family behind one interface.
#[derive(Clone, Debug)]
pub enum Encoder {
    Vit(VitEncoder),
    ResNet(ResNetEncoder),
}

impl Encoder {
    pub fn new(sink: &mut dyn ParamSink, cfg: &EncoderConfig) -> Self {
        match cfg.variant {
            EncoderVariant::Base | EncoderVariant::Tiny => Encoder::Vit(VitEncoder::new(sink, cfg)),
            EncoderVariant::Resnet50 => Encoder::ResNet(ResNetEncoder::new(sink, cfg)),
        }
    }

    /// Encodes one `[3, S, S]` view into `[T, D]` tokens.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, image: &Tensor) -> Result<Var<'t>, ModelError> {
        match self {
            Encoder::Vit(e) => e.forward(cx, image),
            Encoder::ResNet(e) => e.forward(cx, image),
        }
    }
}

/// Parsed archive → parameter name table.
#[derive(Clone, Debug)]
pub struct NameMap {
    entries: Vec<(String, String)>,
}

impl NameMap {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut words = line.split_whitespace();
            match (words.next(), words.next(), words.next()) {
                (Some(a), Some(m), None) => entries.push((a.to_string(), m.to_string())),
                _ => return Err(ModelError::Import(format!("bad name-map line: {line}"))),
            }
        }
        Ok(Self { entries })
    }

    pub fn for_variant(variant: EncoderVariant) -> Self {
        let text = match variant {
            EncoderVariant::Base | EncoderVariant::Tiny => DEIT_NAME_MAP,
            EncoderVariant::Resnet50 => RESNET50_NAME_MAP,
        };
        Self::parse(text).expect("bundled name maps parse")
    }

    /// Archive name for a model parameter, if the parameter is importable.
    pub fn archive_name(&self, param: &str) -> Option<String> {
        self.entries.iter().find_map(|(archive, model)| {
            let captured = match_pattern(model, param)?;
            Some(fill_pattern(archive, captured))
        })
    }

    /// Model parameter name for an archive tensor, if it is mapped.
    pub fn param_name(&self, archive_name: &str) -> Option<String> {
        self.entries.iter().find_map(|(archive, model)| {
            let captured = match_pattern(archive, archive_name)?;
            Some(fill_pattern(model, captured))
        })
    }
}

fn match_pattern<'a>(pattern: &str, name: &'a str) -> Option<&'a str> {
    if let Some((pre, post)) = pattern.split_once("{i}") {
        let mid = name.strip_prefix(pre)?.strip_suffix(post)?;
        (!mid.is_empty() && mid.bytes().all(|b| b.is_ascii_digit())).then_some(mid)
    } else if let Some(pre) = pattern.strip_suffix('*') {
        name.strip_prefix(pre)
    } else {
        (pattern == name).then_some("")
    }
}

fn fill_pattern(pattern: &str, captured: &str) -> String {
    if pattern.contains("{i}") {
        pattern.replace("{i}", captured)
    } else if let Some(pre) = pattern.strip_suffix('*') {
        format!("{pre}{captured}")
    } else {
        pattern.to_string()
    }
}

/// Bilinear resampling of a `[g0·g0, D]` positional grid to `[g·g, D]`,
/// with corner positions aligned so corner embeddings are preserved.
pub fn interpolate_pos_grid(table: &Tensor, g0: usize, g: usize) -> Tensor {
    let d = table.shape()[1];
    assert_eq!(table.shape()[0], g0 * g0, "positional table is not a square grid");
    let src = table.data();
    let coord = |i: usize| -> (usize, usize, f32) {
        if g == 1 || g0 == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (g0 - 1) as f64 / (g - 1) as f64;
        let lo = (x.floor() as usize).min(g0 - 1);
        let hi = (lo + 1).min(g0 - 1);
        (lo, hi, (x - lo as f64) as f32)
    };
    let mut out = Vec::with_capacity(g * g * d);
    for r in 0..g {
        let (r0, r1, fr) = coord(r);
        for c in 0..g {
            let (c0, c1, fc) = coord(c);
            for k in 0..d {
                let at = |rr: usize, cc: usize| src[(rr * g0 + cc) * d + k];
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                out.push(top * (1.0 - fr) + bottom * fr);
            }
        }
    }
    Tensor::from_vec([g * g, d], out)
}

/// Reads encoder weights from an archive and validates them against the
/// parameter shapes `expected` (model name → shape) declared for `cfg`.
///
/// Shapes that differ only by layout (e.g. a `[D, 3, P, P]` patch kernel for
/// a `[D, 3·P²]` projection) are reshaped. Positional tables on a different
/// square grid are interpolated.
pub fn load_pretrained(
    path: &Path,
    cfg: &EncoderConfig,
    expected: &BTreeMap<String, Vec<usize>>,
) -> Result<BTreeMap<String, Tensor>, ModelError> {
    let archive = Archive::read(path).map_err(|e| ModelError::Import(e.to_string()))?;
    import_tensors(&archive, cfg, expected)
}

pub fn import_tensors(
    archive: &Archive,
    cfg: &EncoderConfig,
    expected: &BTreeMap<String, Vec<usize>>,
) -> Result<BTreeMap<String, Tensor>, ModelError> {
    let map = NameMap::for_variant(cfg.variant);
    let mut out = BTreeMap::new();
    for (param, shape) in expected {
        let Some(archive_name) = map.archive_name(param) else {
            continue;
        };
        let t = archive
            .get(&archive_name)
            .ok_or_else(|| ModelError::Import(format!("archive is missing tensor {archive_name}")))?;
        let tensor = if param == "encoder.pos_embed" {
            import_pos_embed(t, cfg, shape)?
        } else if t.numel() == shape.iter().product::<usize>() {
            t.clone().reshape(shape.clone())
        } else {
            return Err(ModelError::Import(format!(
                "tensor {archive_name} has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        };
        out.insert(param.clone(), tensor);
    }
    Ok(out)
}

fn import_pos_embed(t: &Tensor, cfg: &EncoderConfig, shape: &[usize]) -> Result<Tensor, ModelError> {
    let d = cfg.dim;
    let conflict = || {
        ModelError::Import(format!(
            "positional table of shape {:?} cannot be mapped to {shape:?}",
            t.shape()
        ))
    };
    if !t.numel().is_multiple_of(d) || *t.shape().last().unwrap_or(&0) != d {
        return Err(conflict());
    }
    let rows = t.numel() / d;
    let data = t.data();
    // A non-square row count means the first row belongs to a class token.
    let square = |n: usize| {
        let g = (n as f64).sqrt().round() as usize;
        (g * g == n).then_some(g)
    };
    let (cls, grid_rows, g0) = match (square(rows), rows.checked_sub(1).and_then(square)) {
        (_, Some(g)) if rows > 1 && square(rows).is_none() => (Some(&data[..d]), &data[d..], g),
        (Some(g), _) => (None, data, g),
        _ => return Err(conflict()),
    };
    let grid = Tensor::from_vec([g0 * g0, d], grid_rows.to_vec());
    let grid = if g0 == cfg.token_grid {
        grid
    } else {
        interpolate_pos_grid(&grid, g0, cfg.token_grid)
    };
    let mut rows_out = Vec::with_capacity(shape.iter().product());
    if cfg.cls_token {
        rows_out.extend_from_slice(cls.ok_or_else(conflict)?);
    }
    rows_out.extend_from_slice(grid.data());
    Tensor::try_from_vec(shape.to_vec(), rows_out).ok_or_else(conflict)
}
