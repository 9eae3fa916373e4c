//! U-shaped segmenter built from VSS blocks.
//!
//! Layout per sample: images are `[C_in, S, S]`, logits `[out_classes, S, S]`.
//! Feature maps are token-major `[H*W, C]`.
//!
//! The head is a 1x1 projection applied at patch resolution that emits
//! `out_classes * patch^2` values per token, which are then rearranged
//! into the `patch x patch` pixels the token covers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops;
use crate::init::rng;
use crate::layers::{upsample2x, upsample2x_backward, Conv2x2, Conv2x2Mode, Linear};
use crate::ms2d::{vss_block_backward, vss_block_forward_cached, VssBlockParams, VssCache};
use crate::params::{join, Parameterized};
use crate::scan_catalog::{experiment_streams, GridShape, EXPERIMENT_COUNT};
use crate::tensor::{FeatureMap, Tensor};

pub const PROJECTION_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub img_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depths: Vec<usize>,
    pub bottleneck_depth: usize,
    pub decoder_depths: Vec<usize>,
    pub state_dim: usize,
    pub out_classes: usize,
    pub experiment_id: usize,
}

impl ModelConfig {
    /// Full-size binary configuration at 128x128.
    pub fn full() -> Self {
        ModelConfig {
            img_size: 128,
            in_channels: 1,
            patch_size: 4,
            embed_dim: 96,
            encoder_depths: vec![2, 2, 2, 2],
            bottleneck_depth: 2,
            decoder_depths: vec![2, 2, 2, 1],
            state_dim: 16,
            out_classes: 1,
            experiment_id: 1,
        }
    }

    /// CPU-sized configuration used for phantom training.
    pub fn desk() -> Self {
        ModelConfig {
            img_size: 32,
            embed_dim: 16,
            state_dim: 8,
            ..Self::full()
        }
    }

    /// Three-stage model small enough for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            img_size: 16,
            in_channels: 1,
            patch_size: 4,
            embed_dim: 8,
            encoder_depths: vec![1, 1, 1],
            bottleneck_depth: 1,
            decoder_depths: vec![1, 1, 1],
            state_dim: 4,
            out_classes: 1,
            experiment_id: 1,
        }
    }

    pub fn with_experiment(mut self, id: usize) -> Self {
        self.experiment_id = id;
        self
    }

    pub fn stages(&self) -> usize {
        self.encoder_depths.len()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.stages()).map(|i| self.embed_dim << i).collect()
    }

    /// Token grid side at every stage, finest first.
    pub fn stage_grids(&self) -> Vec<usize> {
        let g = self.img_size / self.patch_size.max(1);
        (0..self.stages()).map(|i| g >> i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.in_channels == 0 || self.out_classes == 0 || self.embed_dim == 0 || self.state_dim == 0 {
            return bad("channel counts and state_dim must be positive".into());
        }
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if self.encoder_depths.is_empty() {
            return bad("at least one encoder stage is required".into());
        }
        if self.decoder_depths.len() != self.encoder_depths.len() {
            return bad(format!(
                "decoder has {} stages but encoder has {}",
                self.decoder_depths.len(),
                self.encoder_depths.len()
            ));
        }
        let unit = self.patch_size << (self.stages() - 1);
        if self.img_size == 0 || !self.img_size.is_multiple_of(unit) {
            return bad(format!(
                "img_size {} is not divisible by patch_size * 2^(stages-1) = {unit}",
                self.img_size
            ));
        }
        if !(1..=EXPERIMENT_COUNT).contains(&self.experiment_id) {
            return Err(Error::ExperimentOutOfRange(self.experiment_id));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub pos_bias: Tensor,
    pub encoder: Vec<Vec<VssBlockParams>>,
    pub downsample: Vec<Conv2x2>,
    pub bottleneck: Vec<VssBlockParams>,
    pub upsample: Vec<Conv2x2>,
    pub decoder: Vec<Vec<VssBlockParams>>,
    pub head: Linear,
}

fn visit_blocks<'a>(blocks: &'a [VssBlockParams], prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
    for (i, b) in blocks.iter().enumerate() {
        b.visit(&join(prefix, &i.to_string()), f);
    }
}

fn visit_blocks_mut(blocks: &mut [VssBlockParams], prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
    for (i, b) in blocks.iter_mut().enumerate() {
        b.visit_mut(&join(prefix, &i.to_string()), f);
    }
}

impl Parameterized for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_bias"), &self.pos_bias);
        for (s, blocks) in self.encoder.iter().enumerate() {
            visit_blocks(blocks, &join(prefix, &format!("encoder.{s}")), f);
        }
        self.downsample.visit(&join(prefix, "downsample"), f);
        visit_blocks(&self.bottleneck, &join(prefix, "bottleneck"), f);
        self.upsample.visit(&join(prefix, "upsample"), f);
        for (s, blocks) in self.decoder.iter().enumerate() {
            visit_blocks(blocks, &join(prefix, &format!("decoder.{s}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_bias"), &mut self.pos_bias);
        for (s, blocks) in self.encoder.iter_mut().enumerate() {
            visit_blocks_mut(blocks, &join(prefix, &format!("encoder.{s}")), f);
        }
        self.downsample.visit_mut(&join(prefix, "downsample"), f);
        visit_blocks_mut(&mut self.bottleneck, &join(prefix, "bottleneck"), f);
        self.upsample.visit_mut(&join(prefix, "upsample"), f);
        for (s, blocks) in self.decoder.iter_mut().enumerate() {
            visit_blocks_mut(blocks, &join(prefix, &format!("decoder.{s}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let scans = experiment_streams(cfg.experiment_id)?.streams;
    let mut r = rng(seed);
    let ch = cfg.stage_channels();
    let grids = cfg.stage_grids();
    let n = cfg.state_dim;
    let std = PROJECTION_INIT_STD;
    let stages = cfg.stages();
    let p = cfg.patch_size;

    let patch_embed = Linear::new(&mut r, p * p * cfg.in_channels, ch[0], std);
    let pos_bias = Tensor::zeros(&[grids[0] * grids[0], ch[0]]);
    let mut encoder = Vec::with_capacity(stages);
    let mut downsample = Vec::with_capacity(stages - 1);
    for s in 0..stages {
        if s > 0 {
            downsample.push(Conv2x2::new(&mut r, Conv2x2Mode::Downsample, ch[s - 1], ch[s]));
        }
        encoder.push(
            (0..cfg.encoder_depths[s])
                .map(|_| VssBlockParams::new(&mut r, ch[s], n, scans, std))
                .collect(),
        );
    }
    let deepest = ch[stages - 1];
    let bottleneck = (0..cfg.bottleneck_depth)
        .map(|_| VssBlockParams::new(&mut r, deepest, n, scans, std))
        .collect();
    let mut decoder = Vec::with_capacity(stages);
    let mut upsample = Vec::with_capacity(stages - 1);
    for j in 0..stages {
        let level = stages - 1 - j;
        if j > 0 {
            upsample.push(Conv2x2::new(&mut r, Conv2x2Mode::Same, ch[level + 1], ch[level]));
        }
        decoder.push(
            (0..cfg.decoder_depths[j])
                .map(|_| VssBlockParams::new(&mut r, ch[level], n, scans, std))
                .collect(),
        );
    }
    let head = Linear::new(&mut r, ch[0], cfg.out_classes * p * p, std);
    let model = ModelParams {
        config: cfg.clone(),
        patch_embed,
        pos_bias,
        encoder,
        downsample,
        bottleneck,
        upsample,
        decoder,
        head,
    };
    check_decoder_shapes(cfg)?;
    Ok(model)
}

/// Every decoder stage must land on the grid and width of its skip source.
fn check_decoder_shapes(cfg: &ModelConfig) -> Result<()> {
    let ch = cfg.stage_channels();
    let grids = cfg.stage_grids();
    let stages = cfg.stages();
    let (mut g, mut c) = (grids[stages - 1], ch[stages - 1]);
    for j in 0..stages {
        let level = stages - 1 - j;
        if j > 0 {
            g *= 2;
            c /= 2;
        }
        if g != grids[level] || c != ch[level] {
            return Err(Error::shape(
                format!("{}x{}x{}", grids[level], grids[level], ch[level]),
                format!("{g}x{g}x{c}"),
            ));
        }
    }
    Ok(())
}

pub fn count_params(m: &ModelParams) -> usize {
    m.param_count()
}

/// Analytic forward cost of one sample; independent of the scan assignment.
pub fn count_flops(cfg: &ModelConfig) -> Result<u64> {
    cfg.validate()?;
    let ch = cfg.stage_channels();
    let grids = cfg.stage_grids();
    let stages = cfg.stages();
    let n = cfg.state_dim;
    let p = cfg.patch_size;
    let tokens = |s: usize| grids[s] * grids[s];
    let block = |s: usize| flops::vss_block(grids[s], grids[s], ch[s], n);

    let mut total = flops::linear(tokens(0), p * p * cfg.in_channels, ch[0]) + flops::add(tokens(0) * ch[0]);
    for s in 0..stages {
        if s > 0 {
            total += flops::linear(tokens(s), 4 * ch[s - 1], ch[s]);
        }
        total += cfg.encoder_depths[s] as u64 * block(s);
    }
    total += cfg.bottleneck_depth as u64 * block(stages - 1);
    for j in 0..stages {
        let level = stages - 1 - j;
        if j > 0 {
            total += flops::upsample2x(tokens(level) * ch[level + 1]);
            total += flops::linear(tokens(level), 4 * ch[level + 1], ch[level]);
        }
        total += flops::add(tokens(level) * ch[level]);
        total += cfg.decoder_depths[j] as u64 * block(level);
    }
    total += flops::linear(tokens(0), ch[0], cfg.out_classes * p * p);
    Ok(total)
}

/// Saved activations of one sample.
#[derive(Clone, Debug)]
pub struct SampleCache {
    patches: Vec<f64>,
    encoder: Vec<Vec<VssCache>>,
    down_cols: Vec<Vec<f64>>,
    bottleneck: Vec<VssCache>,
    up_cols: Vec<Vec<f64>>,
    decoder: Vec<Vec<VssCache>>,
    head_in: FeatureMap,
}

fn grid(side: usize) -> GridShape {
    GridShape { rows: side, cols: side }
}

/// Gathers `[G*G, p*p*C_in]` patch vectors ordered (dy, dx, channel).
fn patchify(cfg: &ModelConfig, image: &[f64]) -> Vec<f64> {
    let (s, p, cin) = (cfg.img_size, cfg.patch_size, cfg.in_channels);
    let g = s / p;
    let width = p * p * cin;
    let mut out = vec![0.0; g * g * width];
    for gr in 0..g {
        for gc in 0..g {
            let base = (gr * g + gc) * width;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..cin {
                        out[base + (dy * p + dx) * cin + ch] = image[(ch * s + gr * p + dy) * s + gc * p + dx];
                    }
                }
            }
        }
    }
    out
}

/// Rearranges `[G*G, out*p*p]` (class, dy, dx) into `[out, S, S]`; an
/// involution pair with [`pixel_unshuffle`].
fn pixel_shuffle(cfg: &ModelConfig, tokens: &[f64]) -> Vec<f64> {
    let (s, p, k) = (cfg.img_size, cfg.patch_size, cfg.out_classes);
    let g = s / p;
    let mut out = vec![0.0; k * s * s];
    for gr in 0..g {
        for gc in 0..g {
            let base = (gr * g + gc) * k * p * p;
            for cls in 0..k {
                for dy in 0..p {
                    for dx in 0..p {
                        out[(cls * s + gr * p + dy) * s + gc * p + dx] = tokens[base + (cls * p + dy) * p + dx];
                    }
                }
            }
        }
    }
    out
}

fn pixel_unshuffle(cfg: &ModelConfig, pixels: &[f64]) -> Vec<f64> {
    let (s, p, k) = (cfg.img_size, cfg.patch_size, cfg.out_classes);
    let g = s / p;
    let mut out = vec![0.0; g * g * k * p * p];
    for gr in 0..g {
        for gc in 0..g {
            let base = (gr * g + gc) * k * p * p;
            for cls in 0..k {
                for dy in 0..p {
                    for dx in 0..p {
                        out[base + (cls * p + dy) * p + dx] = pixels[(cls * s + gr * p + dy) * s + gc * p + dx];
                    }
                }
            }
        }
    }
    out
}

fn run_blocks(mut v: FeatureMap, blocks: &[VssBlockParams]) -> Result<(FeatureMap, Vec<VssCache>)> {
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (out, cache) = vss_block_forward_cached(&v, b)?;
        caches.push(cache);
        v = out;
    }
    Ok((v, caches))
}

fn blocks_backward(
    mut g: FeatureMap,
    blocks: &[VssBlockParams],
    caches: &[VssCache],
    grads: &mut [VssBlockParams],
) -> Result<FeatureMap> {
    for i in (0..blocks.len()).rev() {
        g = vss_block_backward(&caches[i], &blocks[i], &g, &mut grads[i])?;
    }
    Ok(g)
}

/// Forward for one `[C_in, S, S]` image; returns `[out_classes, S, S]` logits.
pub fn forward_sample(m: &ModelParams, image: &[f64]) -> Result<(Vec<f64>, SampleCache)> {
    let cfg = &m.config;
    let expected = cfg.in_channels * cfg.img_size * cfg.img_size;
    if image.len() != expected {
        return Err(Error::shape(expected, image.len()));
    }
    let ch = cfg.stage_channels();
    let grids = cfg.stage_grids();
    let stages = cfg.stages();

    let patches = patchify(cfg, image);
    let mut embedded = m.patch_embed.forward(&patches);
    for (e, b) in embedded.iter_mut().zip(m.pos_bias.data()) {
        *e += b;
    }
    let mut v = FeatureMap::from_vec(grid(grids[0]), ch[0], embedded)?;

    let mut skips = Vec::with_capacity(stages);
    let mut enc_caches = Vec::with_capacity(stages);
    let mut down_cols = Vec::with_capacity(stages - 1);
    for s in 0..stages {
        if s > 0 {
            let (out, cols) = m.downsample[s - 1].forward(&v);
            down_cols.push(cols);
            v = out;
        }
        let (out, caches) = run_blocks(v, &m.encoder[s])?;
        enc_caches.push(caches);
        skips.push(out.clone());
        v = out;
    }
    let (mut v, bottleneck) = run_blocks(v, &m.bottleneck)?;

    let mut up_cols = Vec::with_capacity(stages - 1);
    let mut dec_caches = Vec::with_capacity(stages);
    for j in 0..stages {
        let level = stages - 1 - j;
        if j > 0 {
            let up = upsample2x(&v);
            let (out, cols) = m.upsample[j - 1].forward(&up);
            up_cols.push(cols);
            v = out;
        }
        v.check(skips[level].shape(), skips[level].channels())?;
        v.add_assign(&skips[level]);
        let (out, caches) = run_blocks(v, &m.decoder[j])?;
        dec_caches.push(caches);
        v = out;
    }

    let logits = pixel_shuffle(cfg, &m.head.forward(v.as_slice()));
    Ok((
        logits,
        SampleCache {
            patches,
            encoder: enc_caches,
            down_cols,
            bottleneck,
            up_cols,
            decoder: dec_caches,
            head_in: v,
        },
    ))
}

/// Accumulates parameter gradients of one sample into `grad` given
/// d(loss)/d(logits) in `[out_classes, S, S]` layout.
pub fn backward_sample(m: &ModelParams, cache: &SampleCache, g_logits: &[f64], grad: &mut ModelParams) -> Result<()> {
    let cfg = &m.config;
    let ch = cfg.stage_channels();
    let grids = cfg.stage_grids();
    let stages = cfg.stages();

    let g_head = pixel_unshuffle(cfg, g_logits);
    let g = m.head.backward(cache.head_in.as_slice(), &g_head, &mut grad.head);
    let mut g = FeatureMap::from_vec(grid(grids[0]), ch[0], g)?;

    let mut g_skips: Vec<Option<FeatureMap>> = vec![None; stages];
    for j in (0..stages).rev() {
        let level = stages - 1 - j;
        g = blocks_backward(g, &m.decoder[j], &cache.decoder[j], &mut grad.decoder[j])?;
        g_skips[level] = Some(g.clone());
        if j > 0 {
            let up_shape = grid(grids[level]);
            let g_up = m.upsample[j - 1].backward(up_shape, &cache.up_cols[j - 1], &g, &mut grad.upsample[j - 1]);
            g = upsample2x_backward(grid(grids[level + 1]), &g_up);
        }
    }

    g = blocks_backward(g, &m.bottleneck, &cache.bottleneck, &mut grad.bottleneck)?;
    for s in (0..stages).rev() {
        if let Some(skip) = g_skips[s].take() {
            g.add_assign(&skip);
        }
        g = blocks_backward(g, &m.encoder[s], &cache.encoder[s], &mut grad.encoder[s])?;
        if s > 0 {
            g = m.downsample[s - 1].backward(
                grid(grids[s - 1]),
                &cache.down_cols[s - 1],
                &g,
                &mut grad.downsample[s - 1],
            );
        }
    }

    for (dst, src) in grad.pos_bias.data_mut().iter_mut().zip(g.as_slice()) {
        *dst += src;
    }
    m.patch_embed
        .backward(&cache.patches, g.as_slice(), &mut grad.patch_embed);
    Ok(())
}

/// Batched forward: `[B, C_in, S, S]` images to `[B, out_classes, S, S]` logits.
pub fn forward(m: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    let cfg = &m.config;
    let s = cfg.img_size;
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != s || shape[3] != s {
        return Err(Error::shape(
            format!("[B, {}, {s}, {s}]", cfg.in_channels),
            format!("{shape:?}"),
        ));
    }
    let b = shape[0];
    let per = cfg.in_channels * s * s;
    let outputs: Vec<Vec<f64>> = batch
        .data()
        .par_chunks(per.max(1))
        .map(|img| forward_sample(m, img).map(|(y, _)| y))
        .collect::<Result<_>>()?;
    Tensor::from_vec(&[b, cfg.out_classes, s, s], outputs.concat())
}
