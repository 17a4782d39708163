//! Two-stage reconstruction through a vector-quantized voxel autoencoder.
//!
//! Stage 1 compresses a grid into a short sequence of codebook indices and
//! back. Stage 2 is an image-conditioned causal transformer that predicts
//! that sequence one code at a time.

use std::path::{Path, PathBuf};

use mvrecon_tensor::nn::{Conv3d, Embedding, Linear};
use mvrecon_tensor::ops::concat_rows;
use mvrecon_tensor::{
    AdamW, AdamWConfig, Archive, ConvGeom, Ctx, Init, ParamId, ParamSink, ParamStore, Tape, Tensor, Var,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::sample_view_indices;
use crate::decoder3d::{reshape_to_cube, CnnDecoder, CnnDecoderConfig, TransformerDecoder};
use crate::encoder::{pool_view_vars, Encoder, EncoderConfig};
use crate::losses::{loss_var, LossConfig, LossKind};
use crate::model::{ModelConfig, ModelError};
use crate::pipeline::write_atomic;
use crate::voxgrid::{iou, threshold, VoxelError, VoxelField, VoxelGrid};

#[derive(Debug, Error)]
pub enum VqError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Stride-2 convolutions in the voxel encoder.
    pub encoder_layers: usize,
    /// Stride-2 transposed convolutions in the voxel decoder.
    pub decoder_layers: usize,
    pub commitment_weight: f32,
    /// Output channels of every encoder convolution but the last, which
    /// produces `code_dim`.
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: usize,
    pub resolution: usize,
    /// Image encoder of the second stage.
    pub prior_encoder: EncoderConfig,
    pub prior_layers: usize,
    pub prior_heads: usize,
    pub learning_rate: f32,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    /// Re-seeds codes no grid selected in a stage-1 step from that step's
    /// encoder outputs. Stops for the final tenth of training so the decoder
    /// settles on a fixed codebook.
    pub restart_dead_codes: bool,
}

impl Default for VqConfig {
    fn default() -> Self {
        let base = ModelConfig::base();
        Self {
            codebook_size: 2048,
            code_dim: 512,
            encoder_layers: 3,
            decoder_layers: 3,
            commitment_weight: 0.25,
            encoder_channels: vec![64, 128],
            decoder_channels: 64,
            resolution: 32,
            prior_encoder: base.encoder,
            prior_layers: base.decoder.layers,
            prior_heads: base.decoder.heads,
            learning_rate: 1e-4,
            stage1_steps: 10_000,
            stage2_steps: 10_000,
            restart_dead_codes: true,
        }
    }
}

impl VqConfig {
    /// Reduced widths for CPU runs on toy data.
    pub fn toy() -> Self {
        let toy = ModelConfig::toy();
        Self {
            codebook_size: 128,
            code_dim: 32,
            encoder_channels: vec![16, 32],
            decoder_channels: 16,
            prior_encoder: toy.encoder,
            prior_layers: toy.decoder.layers,
            prior_heads: toy.decoder.heads,
            learning_rate: 2e-3,
            stage1_steps: 300,
            stage2_steps: 300,
            ..Self::default()
        }
    }

    /// Side of the latent cube.
    pub fn latent_side(&self) -> usize {
        self.resolution >> self.encoder_layers
    }

    /// Length of a code sequence.
    pub fn seq_len(&self) -> usize {
        self.latent_side().pow(3)
    }

    fn cnn(&self) -> CnnDecoderConfig {
        CnnDecoderConfig {
            channels: self.decoder_channels,
            upsample_stages: self.decoder_layers,
            ..CnnDecoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), VqError> {
        if self.codebook_size < 2 {
            return Err(VqError::Config("codebook_size must be at least 2".into()));
        }
        if self.code_dim == 0 {
            return Err(VqError::Config("code_dim must be positive".into()));
        }
        if self.encoder_layers == 0 || self.encoder_channels.len() + 1 != self.encoder_layers {
            return Err(VqError::Config(format!(
                "{} encoder layers need {} intermediate channel widths",
                self.encoder_layers,
                self.encoder_layers.saturating_sub(1)
            )));
        }
        if self.latent_side() == 0 || self.latent_side() << self.encoder_layers != self.resolution {
            return Err(VqError::Config(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution, self.encoder_layers
            )));
        }
        if self.commitment_weight.is_nan() || self.commitment_weight <= 0.0 {
            return Err(VqError::Config("commitment_weight must be positive".into()));
        }
        self.cnn().validate(self.latent_side(), self.resolution)?;
        self.prior_encoder.validate()?;
        if self.prior_heads == 0 || !self.prior_encoder.dim.is_multiple_of(self.prior_heads) {
            return Err(VqError::Config("prior width must be divisible by prior_heads".into()));
        }
        Ok(())
    }
}

/// Fixed-length sequence of codebook indices in query-grid cell order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CodeSeq {
    codes: Vec<usize>,
}

impl CodeSeq {
    pub fn new(codes: Vec<usize>, codebook_size: usize) -> Result<Self, VqError> {
        if let Some(&c) = codes.iter().find(|&&c| c >= codebook_size) {
            return Err(VqError::Argument(format!("code {c} is outside [0, {codebook_size})")));
        }
        Ok(Self { codes })
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Nearest codebook row for every row of `z` (`[N, d]` against `[K, d]`).
///
/// Squared distances are computed in f64; ties go to the lowest index.
/// Returns the indices and the selected rows.
pub fn quantize(z: &Tensor, codebook: &Tensor) -> (Vec<usize>, Tensor) {
    let d = codebook.shape()[1];
    assert_eq!(z.shape()[1], d, "latent width differs from code width");
    let book = codebook.data();
    let mut codes = Vec::with_capacity(z.rows());
    let mut rows = Vec::with_capacity(z.numel());
    for zr in z.data().chunks(d) {
        let mut best = (f64::INFINITY, 0);
        for (j, e) in book.chunks(d).enumerate() {
            let dist: f64 = zr.iter().zip(e).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            if dist < best.0 {
                best = (dist, j);
            }
        }
        codes.push(best.1);
        rows.extend_from_slice(&book[best.1 * d..(best.1 + 1) * d]);
    }
    (codes, Tensor::from_vec([z.rows(), d], rows))
}

/// One stage-1 forward pass with its loss terms.
pub struct Stage1Pass<'t> {
    pub loss: Var<'t>,
    pub reconstruction: Var<'t>,
    pub codes: Vec<usize>,
    /// Pre-quantization latents `[L, code_dim]`.
    pub latent: Tensor,
}

/// Stage 1: convolutional encoder, codebook and convolutional decoder.
#[derive(Clone, Debug)]
pub struct VqVae {
    pub cfg: VqConfig,
    encoder: Vec<Conv3d>,
    codebook: ParamId,
    decoder: CnnDecoder,
}

impl VqVae {
    pub fn new(sink: &mut dyn ParamSink, cfg: &VqConfig) -> Result<Self, VqError> {
        cfg.validate()?;
        let geom = ConvGeom::cube(4, 2, 1);
        let mut widths = vec![1];
        widths.extend(&cfg.encoder_channels);
        widths.push(cfg.code_dim);
        let encoder = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv3d::new(sink, &format!("vq.encoder.conv{i}"), w[0], w[1], geom, true))
            .collect();
        let k = cfg.codebook_size;
        let codebook = sink.param(
            "vq.codebook",
            &[k, cfg.code_dim],
            Init::Uniform { bound: 1.0 / k as f32 },
        );
        let decoder = CnnDecoder::new(sink, "vq.decoder", cfg.code_dim, &cfg.cnn());
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            codebook,
            decoder,
        })
    }

    pub fn init(cfg: &VqConfig, seed: u64) -> Result<(Self, ParamStore), VqError> {
        let mut store = ParamStore::new(seed);
        let vae = Self::new(&mut store, cfg)?;
        Ok((vae, store))
    }

    fn check_grid(&self, grid: &VoxelGrid) -> Result<(), VqError> {
        if grid.resolution() != self.cfg.resolution {
            return Err(VqError::Argument(format!(
                "grid resolution {} differs from {}",
                grid.resolution(),
                self.cfg.resolution
            )));
        }
        Ok(())
    }

    /// Pre-quantization latents `[L, code_dim]`, rows in query-grid order.
    pub fn encode_latent<'t>(&self, cx: &Ctx<'t>, grid: &VoxelGrid) -> Result<Var<'t>, VqError> {
        self.check_grid(grid)?;
        let r = self.cfg.resolution;
        let mut x = cx.constant(Tensor::from_vec([1, r, r, r], grid.to_f32()));
        let last = self.encoder.len() - 1;
        for (i, conv) in self.encoder.iter().enumerate() {
            x = conv.forward(cx, &x);
            if i < last {
                x = x.gelu();
            }
        }
        let l = self.cfg.seq_len();
        Ok(x.reshape([self.cfg.code_dim, l]).transpose())
    }

    /// Decodes code-vector rows `[L, code_dim]` into `[R, R, R]` probabilities.
    pub fn decode_latent<'t>(&self, cx: &Ctx<'t>, latent: &Var<'t>) -> Var<'t> {
        self.decoder
            .forward(cx, &reshape_to_cube(latent, self.cfg.latent_side()))
    }

    pub fn codebook<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.get(self.codebook)
    }

    /// Reconstruction through the quantizer with straight-through gradients
    /// plus codebook and commitment terms.
    pub fn stage1_pass<'t>(&self, cx: &Ctx<'t>, grid: &VoxelGrid) -> Result<Stage1Pass<'t>, VqError> {
        let z = self.encode_latent(cx, grid)?;
        let (codes, selected) = quantize(z.value(), cx.p(self.codebook).value());
        let e = cx.p(self.codebook).gather_rows(&codes);
        let codebook_term = e.mse(&z.detach());
        let commitment = z.mse(&e.detach());
        let zq = z.straight_through(selected);
        let reconstruction = self.decode_latent(cx, &zq);
        let target = Tensor::from_vec([grid.occupancy().len()], grid.to_f32());
        let cfg = LossConfig {
            kind: LossKind::CrossEntropy,
            ..LossConfig::default()
        };
        let bce = loss_var(&reconstruction, &target, &cfg);
        let loss = bce
            .add(&codebook_term)
            .add(&commitment.scale(self.cfg.commitment_weight));
        Ok(Stage1Pass {
            loss,
            reconstruction,
            codes,
            latent: z.value().clone(),
        })
    }

    pub fn vq_encode(&self, store: &ParamStore, grid: &VoxelGrid) -> Result<CodeSeq, VqError> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store, false);
        let z = self.encode_latent(&cx, grid)?;
        let (codes, _) = quantize(z.value(), self.codebook(store));
        CodeSeq::new(codes, self.cfg.codebook_size)
    }

    pub fn vq_decode(&self, store: &ParamStore, codes: &CodeSeq) -> Result<VoxelField, VqError> {
        if codes.len() != self.cfg.seq_len() {
            return Err(VqError::Argument(format!(
                "expected {} codes, got {}",
                self.cfg.seq_len(),
                codes.len()
            )));
        }
        let codes = CodeSeq::new(codes.codes.clone(), self.cfg.codebook_size)?;
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store, false);
        let latent = cx.p(self.codebook).gather_rows(codes.codes());
        let out = self.decode_latent(&cx, &latent);
        let values = out.value().data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(VoxelField::new(self.cfg.resolution, values)?)
    }
}

/// Stage 2: image encoder plus a causal decoder over code sequences.
#[derive(Clone, Debug)]
pub struct CodePrior {
    pub cfg: VqConfig,
    encoder: Encoder,
    start: ParamId,
    code_embed: Embedding,
    pos_embed: ParamId,
    decoder: TransformerDecoder,
    head: Linear,
}

impl CodePrior {
    pub fn new(sink: &mut dyn ParamSink, cfg: &VqConfig) -> Result<Self, VqError> {
        cfg.validate()?;
        let d = cfg.prior_encoder.dim;
        let init = Init::TruncNormal { std: 0.02 };
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::new(sink, &cfg.prior_encoder),
            start: sink.param("prior.start", &[1, d], init),
            code_embed: Embedding::new(sink, "prior.code_embed", cfg.codebook_size, d, init),
            pos_embed: sink.param("prior.pos_embed", &[cfg.seq_len(), d], init),
            decoder: TransformerDecoder::new(sink, "prior.decoder", cfg.prior_layers, d, cfg.prior_heads),
            head: Linear::new(sink, "prior.head", d, cfg.codebook_size, init, true),
        })
    }

    pub fn init(cfg: &VqConfig, seed: u64) -> Result<(Self, ParamStore), VqError> {
        let mut store = ParamStore::new(seed);
        let prior = Self::new(&mut store, cfg)?;
        Ok((prior, store))
    }

    /// Pooled image features `[T, D]`.
    pub fn memory<'t>(&self, cx: &Ctx<'t>, views: &[Tensor]) -> Result<Var<'t>, VqError> {
        if views.is_empty() {
            return Err(VqError::Argument("at least one view is required".into()));
        }
        let seqs = views
            .iter()
            .map(|v| self.encoder.forward(cx, v))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(pool_view_vars(&seqs))
    }

    /// Logits `[len(prefix) + 1, K]`: row `i` predicts code `i` from the
    /// start token and `prefix[..i]`.
    pub fn logits<'t>(&self, cx: &Ctx<'t>, memory: &Var<'t>, prefix: &[usize]) -> Var<'t> {
        let n = prefix.len() + 1;
        assert!(n <= self.cfg.seq_len(), "prefix longer than the code sequence");
        let mut parts = vec![cx.p(self.start)];
        if !prefix.is_empty() {
            parts.push(self.code_embed.forward(cx, prefix));
        }
        let x = concat_rows(&parts).add(&cx.p(self.pos_embed).narrow_rows(0, n));
        let h = self.decoder.forward(cx, &x, memory, true);
        self.head.forward(cx, &h)
    }

    /// Teacher-forced cross-entropy on `target` and the number of positions
    /// whose argmax equals the target code.
    pub fn teacher_forced<'t>(&self, cx: &Ctx<'t>, memory: &Var<'t>, target: &CodeSeq) -> (Var<'t>, usize) {
        let codes = target.codes();
        let logits = self.logits(cx, memory, &codes[..codes.len() - 1]);
        let correct = logits
            .value()
            .data()
            .chunks(self.cfg.codebook_size)
            .zip(codes)
            .filter(|(row, &c)| argmax(row) == c)
            .count();
        (logits.cross_entropy_logits(codes), correct)
    }

    /// Greedy autoregressive decoding of a full code sequence.
    pub fn decode_greedy(&self, store: &ParamStore, views: &[Tensor]) -> Result<CodeSeq, VqError> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store, false);
        let memory = self.memory(&cx, views)?;
        self.decode_greedy_from(store, &memory.value().clone())
    }

    /// Greedy decoding from precomputed memory `[T, D]`.
    pub fn decode_greedy_from(&self, store: &ParamStore, memory: &Tensor) -> Result<CodeSeq, VqError> {
        let k = self.cfg.codebook_size;
        let mut codes = Vec::with_capacity(self.cfg.seq_len());
        while codes.len() < self.cfg.seq_len() {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, store, false);
            let mem = cx.constant(memory.clone());
            let logits = self.logits(&cx, &mem, &codes);
            let data = logits.value().data();
            codes.push(argmax(&data[data.len() - k..]));
        }
        CodeSeq::new(codes, k)
    }
}

/// Index of the largest entry; the first one wins ties.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

fn optimizer(cfg: &VqConfig, params: usize) -> AdamW {
    AdamW::new(
        AdamWConfig {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        params,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub step: u64,
    pub loss: f64,
    /// Fraction of codebook rows no grid selected during the step.
    pub dead_fraction: f64,
}

pub struct Stage1Outcome {
    pub vae: VqVae,
    pub store: ParamStore,
    pub history: Vec<Stage1Record>,
}

/// Sets the codebook to distinct latent rows of `grids` chosen by `seed`, so
/// every code starts near real encoder outputs. Leaves it unchanged when
/// there are fewer latent rows than codes.
pub fn init_codebook_from_data(
    vae: &VqVae,
    store: &mut ParamStore,
    grids: &[VoxelGrid],
    seed: u64,
) -> Result<(), VqError> {
    let mut rows = Vec::new();
    for g in grids {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store, false);
        rows.extend_from_slice(vae.encode_latent(&cx, g)?.value().data());
    }
    let d = vae.cfg.code_dim;
    let n = rows.len() / d;
    let k = vae.cfg.codebook_size;
    if n < k {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut book = Vec::with_capacity(k * d);
    for i in sample(&mut rng, n, k).into_iter() {
        book.extend_from_slice(&rows[i * d..(i + 1) * d]);
    }
    store.set(vae.codebook, Tensor::from_vec([k, d], book));
    Ok(())
}

/// Replaces every unused codebook row with a latent row drawn from `pool`
/// and clears its optimizer moments.
fn restart_codes(vae: &VqVae, store: &mut ParamStore, opt: &mut AdamW, used: &[bool], pool: &[f32], seed: u64) {
    let d = vae.cfg.code_dim;
    let n = pool.len() / d;
    let dead: Vec<usize> = (0..used.len()).filter(|&c| !used[c]).collect();
    if dead.is_empty() || n == 0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut book = vae.codebook(store).clone();
    for &c in &dead {
        let r = rng.random_range(0..n);
        book.data_mut()[c * d..(c + 1) * d].copy_from_slice(&pool[r * d..(r + 1) * d]);
    }
    store.set(vae.codebook, book);
    let id = vae.codebook.0;
    for moments in [&mut opt.first[id], &mut opt.second[id]] {
        if let Some(m) = moments.as_mut() {
            for &c in &dead {
                m.data_mut()[c * d..(c + 1) * d].fill(0.0);
            }
        }
    }
}

/// Trains stage 1 on `grids`, every grid in every step.
pub fn train_stage1(cfg: &VqConfig, grids: &[VoxelGrid], seed: u64) -> Result<Stage1Outcome, VqError> {
    if grids.is_empty() {
        return Err(VqError::Argument("no training grids".into()));
    }
    let (vae, mut store) = VqVae::init(cfg, seed)?;
    init_codebook_from_data(&vae, &mut store, grids, seed)?;
    let mut opt = optimizer(cfg, store.len());
    let mut history = Vec::with_capacity(cfg.stage1_steps as usize);
    let scale = 1.0 / grids.len() as f32;
    for step in 0..cfg.stage1_steps {
        let mut grads = vec![None; store.len()];
        let mut used = vec![false; cfg.codebook_size];
        let mut pool = Vec::new();
        let mut loss_sum = 0.0;
        for g in grids {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &store, true);
            let pass = vae.stage1_pass(&cx, g)?;
            let value = pass.loss.value().item() as f64;
            if !value.is_finite() {
                return Err(VqError::Argument(format!(
                    "non-finite stage-1 loss at step {}",
                    step + 1
                )));
            }
            loss_sum += value;
            for &c in &pass.codes {
                used[c] = true;
            }
            pool.extend_from_slice(pass.latent.data());
            let mut g = tape.backward(&pass.loss.scale(scale));
            accumulate(&mut grads, cx.param_grads(&mut g));
        }
        opt.step(&mut store, &grads, cfg.learning_rate);
        if cfg.restart_dead_codes && step < cfg.stage1_steps * 9 / 10 {
            let restart_seed = seed ^ 0x5eed_c0de ^ (step + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            restart_codes(&vae, &mut store, &mut opt, &used, &pool, restart_seed);
        }
        if !vae.codebook(&store).is_finite() {
            return Err(VqError::Argument(format!(
                "codebook became non-finite at step {}",
                step + 1
            )));
        }
        history.push(Stage1Record {
            step: step + 1,
            loss: loss_sum / grids.len() as f64,
            dead_fraction: used.iter().filter(|u| !**u).count() as f64 / cfg.codebook_size as f64,
        });
    }
    Ok(Stage1Outcome { vae, store, history })
}

/// Mean IoU of `vq_decode(vq_encode(g))` against `g` at threshold 0.5.
pub fn reconstruction_iou(vae: &VqVae, store: &ParamStore, grids: &[VoxelGrid]) -> Result<f64, VqError> {
    let mut total = 0.0;
    for g in grids {
        let field = vae.vq_decode(store, &vae.vq_encode(store, g)?)?;
        total += iou(&threshold(&field, 0.5)?, g)?;
    }
    Ok(total / grids.len().max(1) as f64)
}

/// Views of one object paired with its stage-1 code sequence.
#[derive(Clone, Debug)]
pub struct Stage2Sample {
    pub views: Vec<Tensor>,
    pub codes: CodeSeq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
}

pub struct Stage2Outcome {
    pub prior: CodePrior,
    pub store: ParamStore,
    pub history: Vec<Stage2Record>,
}

/// Trains stage 2 with teacher forcing; each step uses every sample with
/// `views_per_step` of its views drawn from a stream fixed by `seed`.
pub fn train_stage2(
    cfg: &VqConfig,
    samples: &[Stage2Sample],
    views_per_step: usize,
    seed: u64,
) -> Result<Stage2Outcome, VqError> {
    if samples.is_empty() {
        return Err(VqError::Argument("no training samples".into()));
    }
    let (prior, mut store) = CodePrior::init(cfg, seed)?;
    let mut opt = optimizer(cfg, store.len());
    let mut history = Vec::with_capacity(cfg.stage2_steps as usize);
    let scale = 1.0 / samples.len() as f32;
    for step in 0..cfg.stage2_steps {
        let mut grads = vec![None; store.len()];
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (i, s) in samples.iter().enumerate() {
            let pick = sample_view_indices(s.views.len(), views_per_step, seed ^ (step << 20) ^ i as u64)
                .map_err(|e| VqError::Argument(e.to_string()))?;
            let views: Vec<Tensor> = pick.into_iter().map(|j| s.views[j].clone()).collect();
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &store, true);
            let memory = prior.memory(&cx, &views)?;
            let (loss, hits) = prior.teacher_forced(&cx, &memory, &s.codes);
            loss_sum += loss.value().item() as f64;
            correct += hits;
            let mut g = tape.backward(&loss.scale(scale));
            accumulate(&mut grads, cx.param_grads(&mut g));
        }
        opt.step(&mut store, &grads, cfg.learning_rate);
        history.push(Stage2Record {
            step: step + 1,
            loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / (samples.len() * cfg.seq_len()) as f64,
        });
    }
    Ok(Stage2Outcome { prior, store, history })
}

/// Teacher-forced per-token accuracy over `samples`, each seen through the
/// given views.
pub fn teacher_forced_accuracy(
    prior: &CodePrior,
    store: &ParamStore,
    samples: &[Stage2Sample],
) -> Result<f64, VqError> {
    let mut correct = 0;
    for s in samples {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store, false);
        let memory = prior.memory(&cx, &s.views)?;
        correct += prior.teacher_forced(&cx, &memory, &s.codes).1;
    }
    Ok(correct as f64 / (samples.len().max(1) * prior.cfg.seq_len()) as f64)
}

const STAGE1_FORMAT: &str = "mvrecon-vq-stage1/1";

/// Writes stage-1 parameters and config atomically.
pub fn save_stage1(path: &Path, vae: &VqVae, store: &ParamStore) -> Result<(), VqError> {
    let mut archive = Archive::new();
    for e in store.entries() {
        archive.insert(e.name.clone(), e.value.as_ref().clone());
    }
    archive.metadata.insert("format".into(), STAGE1_FORMAT.into());
    archive.metadata.insert(
        "vq_config".into(),
        serde_json::to_string(&vae.cfg).expect("vq config serializes"),
    );
    write_atomic(path, &archive.to_bytes()).map_err(|e| VqError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads a stage-1 checkpoint written by [`save_stage1`].
pub fn load_stage1(path: &Path) -> Result<(VqVae, ParamStore), VqError> {
    let err = |reason: String| VqError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let archive = Archive::read(path).map_err(|e| err(e.to_string()))?;
    if archive.metadata.get("format").map(String::as_str) != Some(STAGE1_FORMAT) {
        return Err(err("not a stage-1 checkpoint".into()));
    }
    let cfg: VqConfig = serde_json::from_str(
        archive
            .metadata
            .get("vq_config")
            .ok_or_else(|| err("missing config".into()))?,
    )
    .map_err(|e| err(e.to_string()))?;
    let (vae, mut store) = VqVae::init(&cfg, 0)?;
    let ids: Vec<_> = store
        .iter()
        .map(|(id, e)| (id, e.name.clone(), e.value.shape().to_vec()))
        .collect();
    for (id, name, shape) in ids {
        let t = archive
            .get(&name)
            .ok_or_else(|| err(format!("missing tensor {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(err(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        store.set(id, t.clone());
    }
    Ok((vae, store))
}
