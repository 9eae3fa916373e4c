//! The multi-scan 2D block and the residual VSS block around it.
//!
//! MS2D always runs four streams. Stream `i` serializes the normalized
//! feature map with its scan permutation, runs an independent selective
//! SSM, and scatters the result back to the grid. The four grids are
//! summed and mixed by a 1x1 channel projection. Which scans the streams
//! use never changes a parameter shape or an operation count.

use rand::Rng;

use crate::error::Result;
use crate::flops;
use crate::layers::{silu, silu_backward, DepthwiseConv3x3, LayerNorm, LayerNormCache, Linear};
use crate::params::{join, Parameterized};
use crate::scan_catalog::{deserialize_add, path_order, serialize, GridShape, ScanId, ScanPermutation};
use crate::ssm::{stream_backward, stream_forward_cached, SsmStreamParams, StreamCache};
use crate::tensor::{FeatureMap, Tensor, TokenSequence};

pub const STREAMS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Ms2dParams {
    pub pre_norm: LayerNorm,
    pub streams: [SsmStreamParams; STREAMS],
    pub scans: [ScanId; STREAMS],
    pub mix: Linear,
}

impl Ms2dParams {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        state_dim: usize,
        scans: [ScanId; STREAMS],
        std: f64,
    ) -> Self {
        Ms2dParams {
            pre_norm: LayerNorm::new(channels),
            streams: std::array::from_fn(|_| SsmStreamParams::new(rng, channels, state_dim, std)),
            scans,
            mix: Linear::new(rng, channels, channels, std),
        }
    }

    pub fn channels(&self) -> usize {
        self.pre_norm.channels()
    }
}

impl Parameterized for Ms2dParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.pre_norm.visit(&join(prefix, "pre_norm"), f);
        for (i, s) in self.streams.iter().enumerate() {
            s.visit(&join(prefix, &format!("streams.{i}")), f);
        }
        self.mix.visit(&join(prefix, "mix"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.pre_norm.visit_mut(&join(prefix, "pre_norm"), f);
        for (i, s) in self.streams.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("streams.{i}")), f);
        }
        self.mix.visit_mut(&join(prefix, "mix"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Ms2dCache {
    norm: LayerNormCache,
    perms: Vec<ScanPermutation>,
    streams: Vec<StreamCache>,
    summed: FeatureMap,
}

pub fn ms2d_forward(v: &FeatureMap, p: &Ms2dParams) -> Result<FeatureMap> {
    ms2d_forward_cached(v, p).map(|(out, _)| out)
}

pub fn ms2d_forward_cached(v: &FeatureMap, p: &Ms2dParams) -> Result<(FeatureMap, Ms2dCache)> {
    let shape = v.shape();
    v.check(shape, p.channels())?;
    // Layer norm acts per token, so normalizing before serialization is
    // identical to normalizing each serialized stream.
    let (normed, norm) = p.pre_norm.forward(v.as_slice());
    let normed = FeatureMap::from_vec(shape, v.channels(), normed)?;
    let mut summed = FeatureMap::zeros(shape, v.channels());
    let mut perms = Vec::with_capacity(STREAMS);
    let mut streams = Vec::with_capacity(STREAMS);
    for (scan, theta) in p.scans.iter().zip(&p.streams) {
        let perm = path_order(*scan, shape);
        let x = serialize(&normed, &perm)?;
        let (y, cache) = stream_forward_cached(&x, theta)?;
        deserialize_add(&y, &perm, &mut summed);
        perms.push(perm);
        streams.push(cache);
    }
    let out = FeatureMap::from_vec(shape, v.channels(), p.mix.forward(summed.as_slice()))?;
    Ok((
        out,
        Ms2dCache {
            norm,
            perms,
            streams,
            summed,
        },
    ))
}

pub fn ms2d_backward(
    cache: &Ms2dCache,
    p: &Ms2dParams,
    g_out: &FeatureMap,
    grad: &mut Ms2dParams,
) -> Result<FeatureMap> {
    let shape = g_out.shape();
    let c = g_out.channels();
    let g_sum = p.mix.backward(cache.summed.as_slice(), g_out.as_slice(), &mut grad.mix);
    let g_sum = FeatureMap::from_vec(shape, c, g_sum)?;
    let mut g_normed = FeatureMap::zeros(shape, c);
    for i in 0..STREAMS {
        let perm = &cache.perms[i];
        // the adjoint of deserialization is serialization
        let gy = serialize(&g_sum, perm)?;
        let gx: TokenSequence = stream_backward(&cache.streams[i], &p.streams[i], &gy, &mut grad.streams[i]);
        deserialize_add(&gx, perm, &mut g_normed);
    }
    let gv = p
        .pre_norm
        .backward(&cache.norm, g_normed.as_slice(), &mut grad.pre_norm);
    FeatureMap::from_vec(shape, c, gv)
}

/// Analytic operation count of one MS2D invocation; see [`crate::flops`].
pub fn ms2d_flops(shape: GridShape, channels: usize, state_dim: usize) -> flops::Ms2dFlops {
    flops::ms2d(shape.len(), channels, state_dim)
}

/// Residual unit: `v + pointwise(ms2d(silu(dwconv(norm(v)))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct VssBlockParams {
    pub norm: LayerNorm,
    pub dwconv: DepthwiseConv3x3,
    pub ms2d: Ms2dParams,
    pub pointwise: Linear,
}

impl VssBlockParams {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        state_dim: usize,
        scans: [ScanId; STREAMS],
        std: f64,
    ) -> Self {
        VssBlockParams {
            norm: LayerNorm::new(channels),
            dwconv: DepthwiseConv3x3::new(rng, channels),
            ms2d: Ms2dParams::new(rng, channels, state_dim, scans, std),
            pointwise: Linear::new(rng, channels, channels, std),
        }
    }

    pub fn channels(&self) -> usize {
        self.norm.channels()
    }
}

impl Parameterized for VssBlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.dwconv.visit(&join(prefix, "dwconv"), f);
        self.ms2d.visit(&join(prefix, "ms2d"), f);
        self.pointwise.visit(&join(prefix, "pointwise"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.dwconv.visit_mut(&join(prefix, "dwconv"), f);
        self.ms2d.visit_mut(&join(prefix, "ms2d"), f);
        self.pointwise.visit_mut(&join(prefix, "pointwise"), f);
    }
}

#[derive(Clone, Debug)]
pub struct VssCache {
    norm: LayerNormCache,
    normed: FeatureMap,
    conv: FeatureMap,
    ms2d: Ms2dCache,
    mixed: FeatureMap,
}

/// The residual branch alone, without the identity path.
pub fn vss_branch_forward_cached(v: &FeatureMap, p: &VssBlockParams) -> Result<(FeatureMap, VssCache)> {
    let shape = v.shape();
    let c = p.channels();
    v.check(shape, c)?;
    let (normed, norm) = p.norm.forward(v.as_slice());
    let normed = FeatureMap::from_vec(shape, c, normed)?;
    let conv = p.dwconv.forward(&normed);
    let act = FeatureMap::from_vec(shape, c, silu(conv.as_slice()))?;
    let (mixed, ms2d) = ms2d_forward_cached(&act, &p.ms2d)?;
    let out = FeatureMap::from_vec(shape, c, p.pointwise.forward(mixed.as_slice()))?;
    Ok((
        out,
        VssCache {
            norm,
            normed,
            conv,
            ms2d,
            mixed,
        },
    ))
}

pub fn vss_branch_backward(
    cache: &VssCache,
    p: &VssBlockParams,
    g_out: &FeatureMap,
    grad: &mut VssBlockParams,
) -> Result<FeatureMap> {
    let shape = g_out.shape();
    let c = p.channels();
    let g_mixed = p
        .pointwise
        .backward(cache.mixed.as_slice(), g_out.as_slice(), &mut grad.pointwise);
    let g_mixed = FeatureMap::from_vec(shape, c, g_mixed)?;
    let g_act = ms2d_backward(&cache.ms2d, &p.ms2d, &g_mixed, &mut grad.ms2d)?;
    let g_conv = FeatureMap::from_vec(shape, c, silu_backward(cache.conv.as_slice(), g_act.as_slice()))?;
    let g_normed = p.dwconv.backward(&cache.normed, &g_conv, &mut grad.dwconv);
    let gv = p.norm.backward(&cache.norm, g_normed.as_slice(), &mut grad.norm);
    FeatureMap::from_vec(shape, c, gv)
}

pub fn vss_block_forward(v: &FeatureMap, p: &VssBlockParams) -> Result<FeatureMap> {
    vss_block_forward_cached(v, p).map(|(out, _)| out)
}

pub fn vss_block_forward_cached(v: &FeatureMap, p: &VssBlockParams) -> Result<(FeatureMap, VssCache)> {
    let (mut out, cache) = vss_branch_forward_cached(v, p)?;
    out.add_assign(v);
    Ok((out, cache))
}

pub fn vss_block_backward(
    cache: &VssCache,
    p: &VssBlockParams,
    g_out: &FeatureMap,
    grad: &mut VssBlockParams,
) -> Result<FeatureMap> {
    let mut gv = vss_branch_backward(cache, p, g_out, grad)?;
    gv.add_assign(g_out);
    Ok(gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng;
    use crate::scan_catalog::experiment_streams;
    use crate::ssm::mamba_stream_forward;

    fn random_map(seed: u64, shape: GridShape, c: usize) -> FeatureMap {
        use rand::Rng;
        let mut r = rng(seed);
        FeatureMap::from_fn(shape, c, |_, _, _| r.random_range(-1.0..1.0))
    }

    fn randomize<P: Parameterized>(p: &mut P, seed: u64, scale: f64) {
        use rand::Rng;
        let mut r = rng(seed);
        p.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v += r.random_range(-scale..scale);
            }
        });
    }

    fn g(r: usize, c: usize) -> GridShape {
        GridShape::new(r, c).unwrap()
    }

    #[test]
    fn zero_input_zero_output() {
        let mut r = rng(1);
        let p = Ms2dParams::new(&mut r, 4, 3, [ScanId::S1, ScanId::S5, ScanId::S9, ScanId::S12], 0.3);
        let v = FeatureMap::zeros(g(3, 3), 4);
        let out = ms2d_forward(&v, &p).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_streams_sum_to_four_times_one() {
        let mut r = rng(2);
        let mut p = Ms2dParams::new(&mut r, 3, 4, [ScanId::S7; 4], 0.3);
        randomize(&mut p, 3, 0.2);
        for i in 1..STREAMS {
            p.streams[i] = p.streams[0].clone();
        }
        let v = random_map(4, g(4, 5), 3);
        let (_, cache) = ms2d_forward_cached(&v, &p).unwrap();

        // single stream by hand
        let (normed, _) = p.pre_norm.forward(v.as_slice());
        let normed = FeatureMap::from_vec(v.shape(), 3, normed).unwrap();
        let perm = path_order(ScanId::S7, v.shape());
        let y = mamba_stream_forward(&serialize(&normed, &perm).unwrap(), &p.streams[0]).unwrap();
        let y1 = crate::scan_catalog::deserialize(&y, &perm).unwrap();
        for (z, y) in cache.summed.as_slice().iter().zip(y1.as_slice()) {
            assert!((z - 4.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn reversed_scan_equals_forward_scan_on_reversed_sequence() {
        let mut r = rng(5);
        let mut theta = SsmStreamParams::new(&mut r, 2, 4, 0.4);
        randomize(&mut theta, 6, 0.3);
        let v = random_map(7, g(4, 4), 2);
        let s3 = path_order(ScanId::S3, v.shape());
        let s1 = path_order(ScanId::S1, v.shape());
        let via_s3 = crate::scan_catalog::deserialize(
            &mamba_stream_forward(&serialize(&v, &s3).unwrap(), &theta).unwrap(),
            &s3,
        )
        .unwrap();
        let reversed = serialize(&v, &s1).unwrap().reversed();
        let y = mamba_stream_forward(&reversed, &theta).unwrap().reversed();
        let via_s1 = crate::scan_catalog::deserialize(&y, &s1).unwrap();
        assert!(via_s3.max_abs_diff(&via_s1) < 1e-14);
    }

    #[test]
    fn any_scan_equals_identity_scan_on_prepermuted_grid() {
        let mut r = rng(8);
        let mut theta = SsmStreamParams::new(&mut r, 3, 2, 0.4);
        randomize(&mut theta, 9, 0.3);
        let v = random_map(10, g(3, 5), 3);
        let s1 = path_order(ScanId::S1, v.shape());
        for id in ScanId::ALL {
            let p = path_order(id, v.shape());
            let direct = mamba_stream_forward(&serialize(&v, &p).unwrap(), &theta).unwrap();
            // relabel the grid so that the S1 raster visits it in p's order
            let permuted = FeatureMap::from_vec(v.shape(), 3, serialize(&v, &p).unwrap().into_vec()).unwrap();
            let via_s1 = mamba_stream_forward(&serialize(&permuted, &s1).unwrap(), &theta).unwrap();
            assert_eq!(direct, via_s1, "{id}");
        }
    }

    #[test]
    fn vss_identity_when_pointwise_zero() {
        let mut r = rng(11);
        let mut p = VssBlockParams::new(&mut r, 16, 8, [ScanId::S1; 4], 0.02);
        p.pointwise.weight.fill(0.0);
        let v = random_map(12, g(8, 8), 16);
        let out = vss_block_forward(&v, &p).unwrap();
        assert_eq!(out, v);
        assert_eq!(out.shape(), g(8, 8));
        assert_eq!(out.channels(), 16);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut r = rng(13);
        let p = VssBlockParams::new(&mut r, 4, 2, [ScanId::S1; 4], 0.02);
        assert!(vss_block_forward(&FeatureMap::zeros(g(2, 2), 3), &p).is_err());
    }

    #[test]
    fn residual_gradient_includes_identity() {
        let mut r = rng(14);
        let mut p = VssBlockParams::new(&mut r, 3, 2, [ScanId::S2, ScanId::S9, ScanId::S2, ScanId::S9], 0.3);
        randomize(&mut p, 15, 0.2);
        let v = random_map(16, g(3, 4), 3);
        let gy = random_map(17, g(3, 4), 3);
        let (_, cache) = vss_block_forward_cached(&v, &p).unwrap();
        let mut g_full = p.zeroed();
        let full = vss_block_backward(&cache, &p, &gy, &mut g_full).unwrap();
        let mut g_branch = p.zeroed();
        let branch = vss_branch_backward(&cache, &p, &gy, &mut g_branch).unwrap();
        for ((f, b), g) in full.as_slice().iter().zip(branch.as_slice()).zip(gy.as_slice()) {
            assert!((f - b - g).abs() < 1e-12);
        }
        assert_eq!(g_full, g_branch);
    }

    #[test]
    fn vss_gradients_match_finite_differences() {
        let mut r = rng(18);
        let exp = experiment_streams(21).unwrap();
        let mut p = VssBlockParams::new(&mut r, 3, 2, exp.streams, 0.3);
        randomize(&mut p, 19, 0.3);
        let v = random_map(20, g(3, 3), 3);
        let objective = |p: &VssBlockParams| -> f64 { vss_block_forward(&v, p).unwrap().as_slice().iter().sum() };
        let (out, cache) = vss_block_forward_cached(&v, &p).unwrap();
        assert!(out.as_slice().iter().all(|x| x.is_finite()));
        let ones = FeatureMap::from_fn(v.shape(), 3, |_, _, _| 1.0);
        let mut grad = p.zeroed();
        vss_block_backward(&cache, &p, &ones, &mut grad).unwrap();
        let h = 1e-4;
        for i in 0..p.param_count() {
            let mut pp = p.clone();
            pp.set_scalar(i, p.scalar(i) + h);
            let mut pm = p.clone();
            pm.set_scalar(i, p.scalar(i) - h);
            let fd = (objective(&pp) - objective(&pm)) / (2.0 * h);
            let a = grad.scalar(i);
            let rel = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4 || (fd - a).abs() < 1e-9, "param {i}: fd={fd} a={a}");
        }
    }

    #[test]
    fn flops_do_not_depend_on_scans_and_scan_term_is_linear() {
        let a = ms2d_flops(g(8, 8), 16, 8);
        let b = ms2d_flops(g(8, 8), 16, 8);
        assert_eq!(a, b);
        let doubled = ms2d_flops(g(8, 16), 16, 8);
        assert_eq!(doubled.scan, 2 * a.scan);
    }

    #[test]
    fn param_count_independent_of_scans() {
        let counts: Vec<usize> = (1..=21)
            .map(|id| {
                let mut r = rng(0);
                let exp = experiment_streams(id).unwrap();
                Ms2dParams::new(&mut r, 16, 8, exp.streams, 0.02).param_count()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
    }
}
