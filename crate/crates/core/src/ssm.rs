//! Discrete selective state-space recurrence.
//!
//! Per channel `c` and state index `n`, with input-dependent step size
//! `delta_k` and projections `B_k`, `C_k`:
//!
//! ```text
//! a_bar[k,c,n] = exp(delta[k,c] * A[c,n])
//! h[k,c,n]     = a_bar[k,c,n] * h[k-1,c,n] + delta[k,c] * B[k,n] * x[k,c]
//! y[k,c]       = sum_n C[k,n] * h[k,c,n] + D[c] * x[k,c]
//! ```
//!
//! with `h[-1] = 0`. `A = -exp(a_log)` is negative by construction and
//! `delta = softplus(.)` is positive, so every `a_bar` lies in (0, 1).
//!
//! The state recurrence can be evaluated sequentially or as a chunked
//! parallel prefix scan over the associative operator [`combine`].

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::init::trunc_normal_tensor;
use crate::layers::{sigmoid, softplus, Linear};
use crate::params::{join, Parameterized};
use crate::tensor::{Tensor, TokenSequence};

/// Below this `|a * delta|` the exact ZOH input gain uses its a -> 0 limit.
pub const ZOH_LIMIT_THRESHOLD: f64 = 1e-8;

/// Zero-order-hold discretization of a scalar system `h' = a h + b x`.
///
/// Returns `(exp(a delta), (a delta)^-1 (exp(a delta) - 1) b delta)`.
pub fn zoh_discretize(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let ad = a * delta;
    let a_bar = ad.exp();
    let b_bar = if ad.abs() < ZOH_LIMIT_THRESHOLD {
        b * delta
    } else {
        ad.exp_m1() / ad * b * delta
    };
    (a_bar, b_bar)
}

/// Composition of two affine recurrence steps `h -> a h + b`, applying
/// `first` then `second`.
#[inline]
pub fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// Parameters of one selective SSM stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmStreamParams {
    /// `[C, N]`; `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `[C]`, the skip gain D.
    pub d_skip: Tensor,
    /// C -> C projection (with bias) producing the pre-softplus step size.
    pub delta_proj: Linear,
    /// `[N, C]`, produces `B_k`.
    pub w_b: Tensor,
    /// `[N, C]`, produces `C_k`.
    pub w_c: Tensor,
}

impl SsmStreamParams {
    /// S4D-real style init: `A[c, n] = -(n + 1)`, D = 1, projections
    /// truncated normal with the given std, zero step-size bias.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, channels: usize, state_dim: usize, std: f64) -> Self {
        let mut a_log = Tensor::zeros(&[channels, state_dim]);
        for (i, v) in a_log.data_mut().iter_mut().enumerate() {
            *v = ((i % state_dim) as f64 + 1.0).ln();
        }
        SsmStreamParams {
            a_log,
            d_skip: Tensor::filled(&[channels], 1.0),
            delta_proj: Linear::new(rng, channels, channels, std),
            w_b: trunc_normal_tensor(rng, &[state_dim, channels], std),
            w_c: trunc_normal_tensor(rng, &[state_dim, channels], std),
        }
    }

    pub fn channels(&self) -> usize {
        self.d_skip.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// The continuous state matrix diagonal, `[C * N]`.
    pub fn a(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|v| -v.exp()).collect()
    }

    fn check(&self, x: &TokenSequence) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::shape(format!("{} channels", self.channels()), x.channels()));
        }
        Ok(())
    }
}

impl Parameterized for SsmStreamParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&join(prefix, "a_log"), &self.a_log);
        f(&join(prefix, "d_skip"), &self.d_skip);
        self.delta_proj.visit(&join(prefix, "delta_proj"), f);
        f(&join(prefix, "w_b"), &self.w_b);
        f(&join(prefix, "w_c"), &self.w_c);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "a_log"), &mut self.a_log);
        f(&join(prefix, "d_skip"), &mut self.d_skip);
        self.delta_proj.visit_mut(&join(prefix, "delta_proj"), f);
        f(&join(prefix, "w_b"), &mut self.w_b);
        f(&join(prefix, "w_c"), &mut self.w_c);
    }
}

/// Per-token selective parameters.
#[derive(Clone, Debug)]
pub struct SelectiveParams {
    pub len: usize,
    pub channels: usize,
    pub state_dim: usize,
    /// `[L, C]` pre-softplus step size.
    pub delta_pre: Vec<f64>,
    /// `[L, C]` positive step size.
    pub delta: Vec<f64>,
    /// `[L, N]`
    pub b: Vec<f64>,
    /// `[L, N]`
    pub c: Vec<f64>,
}

fn project_rows(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (nout, nin) = (w.shape()[0], w.shape()[1]);
    let mut y = Vec::with_capacity(x.len() / nin * nout);
    for xr in x.chunks_exact(nin) {
        for wr in w.data().chunks_exact(nin) {
            let mut acc = 0.0;
            for (a, b) in wr.iter().zip(xr) {
                acc += a * b;
            }
            y.push(acc);
        }
    }
    y
}

/// `delta_k = softplus(W_delta x_k + b_delta)`, `B_k = W_B x_k`, `C_k = W_C x_k`.
pub fn selective_params(x: &TokenSequence, p: &SsmStreamParams) -> Result<SelectiveParams> {
    p.check(x)?;
    let delta_pre = p.delta_proj.forward(x.as_slice());
    let delta = delta_pre.iter().map(|&z| softplus(z)).collect();
    Ok(SelectiveParams {
        len: x.len(),
        channels: x.channels(),
        state_dim: p.state_dim(),
        delta_pre,
        delta,
        b: project_rows(x.as_slice(), &p.w_b),
        c: project_rows(x.as_slice(), &p.w_c),
    })
}

/// Per-token discretized transition and input terms, each `[L, C, N]`.
#[derive(Clone, Debug)]
pub struct DiscreteStep {
    pub len: usize,
    pub channels: usize,
    pub state_dim: usize,
    pub a_bar: Vec<f64>,
    pub b_bar_x: Vec<f64>,
}

/// ZOH transition `exp(delta A)` with the simplified input gain `delta B`.
pub fn discretize(x: &TokenSequence, sel: &SelectiveParams, a: &[f64]) -> DiscreteStep {
    let (l, c, n) = (sel.len, sel.channels, sel.state_dim);
    let mut a_bar = vec![0.0; l * c * n];
    let mut b_bar_x = vec![0.0; l * c * n];
    for k in 0..l {
        let xk = x.token(k);
        let bk = &sel.b[k * n..(k + 1) * n];
        for ch in 0..c {
            let d = sel.delta[k * c + ch];
            let dx = d * xk[ch];
            let base = (k * c + ch) * n;
            for s in 0..n {
                a_bar[base + s] = (d * a[ch * n + s]).exp();
                b_bar_x[base + s] = dx * bk[s];
            }
        }
    }
    DiscreteStep {
        len: l,
        channels: c,
        state_dim: n,
        a_bar,
        b_bar_x,
    }
}

/// States `h[k]` for all k by direct recurrence from `h[-1] = 0`.
pub fn scan_states_sequential(step: &DiscreteStep) -> Vec<f64> {
    let lanes = step.channels * step.state_dim;
    let mut h = vec![0.0; step.a_bar.len()];
    if step.len == 0 {
        return h;
    }
    h[..lanes].copy_from_slice(&step.b_bar_x[..lanes]);
    for k in 1..step.len {
        let (prev, cur) = h.split_at_mut(k * lanes);
        let prev = &prev[(k - 1) * lanes..];
        let a = &step.a_bar[k * lanes..(k + 1) * lanes];
        let b = &step.b_bar_x[k * lanes..(k + 1) * lanes];
        for j in 0..lanes {
            cur[j] = a[j] * prev[j] + b[j];
        }
    }
    h
}

const MIN_SCAN_CHUNK: usize = 32;

/// States `h[k]` via a three-phase chunked prefix scan:
/// local inclusive scans per chunk (parallel), a sequential scan of chunk
/// carries, then a parallel fix-up applying each carry to its chunk.
pub fn scan_states_parallel(step: &DiscreteStep) -> Vec<f64> {
    let lanes = step.channels * step.state_dim;
    let l = step.len;
    if l == 0 || lanes == 0 {
        return vec![0.0; step.a_bar.len()];
    }
    let threads = rayon::current_num_threads().max(1);
    let chunk = l.div_ceil(threads).max(MIN_SCAN_CHUNK).min(l);
    let n_chunks = l.div_ceil(chunk);

    let mut acc_a = step.a_bar.clone();
    let mut acc_b = step.b_bar_x.clone();
    acc_a
        .par_chunks_mut(chunk * lanes)
        .zip(acc_b.par_chunks_mut(chunk * lanes))
        .for_each(|(a, b)| {
            let steps = a.len() / lanes;
            for t in 1..steps {
                for j in 0..lanes {
                    let prev = (a[(t - 1) * lanes + j], b[(t - 1) * lanes + j]);
                    let cur = (a[t * lanes + j], b[t * lanes + j]);
                    let (na, nb) = combine(prev, cur);
                    a[t * lanes + j] = na;
                    b[t * lanes + j] = nb;
                }
            }
        });

    // carry[i] = state entering chunk i
    let mut carries = vec![vec![0.0; lanes]; n_chunks];
    for i in 1..n_chunks {
        let last = (i * chunk - 1) * lanes;
        let (done, rest) = carries.split_at_mut(i);
        let prev = &done[i - 1];
        for j in 0..lanes {
            rest[0][j] = combine((1.0, prev[j]), (acc_a[last + j], acc_b[last + j])).1;
        }
    }

    let mut h = acc_b;
    h.par_chunks_mut(chunk * lanes)
        .zip(acc_a.par_chunks(chunk * lanes))
        .zip(carries.par_iter())
        .for_each(|((hc, ac), carry)| {
            for (hrow, arow) in hc.chunks_exact_mut(lanes).zip(ac.chunks_exact(lanes)) {
                for j in 0..lanes {
                    hrow[j] += arow[j] * carry[j];
                }
            }
        });
    h
}

/// `y[k,c] = sum_n C[k,n] h[k,c,n] + D[c] x[k,c]`.
pub fn readout(x: &TokenSequence, sel: &SelectiveParams, h: &[f64], d: &[f64]) -> TokenSequence {
    let (l, c, n) = (sel.len, sel.channels, sel.state_dim);
    let mut y = TokenSequence::zeros(l, c);
    for k in 0..l {
        let ck = &sel.c[k * n..(k + 1) * n];
        let xk = x.token(k);
        let yk = y.token_mut(k);
        for ch in 0..c {
            let hk = &h[(k * c + ch) * n..(k * c + ch + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                acc += ck[s] * hk[s];
            }
            yk[ch] = acc + d[ch] * xk[ch];
        }
    }
    y
}

/// Which state-recurrence evaluator to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

fn ssm_scan(x: &TokenSequence, p: &SsmStreamParams, mode: ScanMode) -> Result<TokenSequence> {
    let sel = selective_params(x, p)?;
    let step = discretize(x, &sel, &p.a());
    let h = match mode {
        ScanMode::Sequential => scan_states_sequential(&step),
        ScanMode::Parallel => scan_states_parallel(&step),
    };
    Ok(readout(x, &sel, &h, p.d_skip.data()))
}

/// Selective scan with an O(L C N) sequential recurrence.
pub fn ssm_scan_sequential(x: &TokenSequence, p: &SsmStreamParams) -> Result<TokenSequence> {
    ssm_scan(x, p, ScanMode::Sequential)
}

/// Selective scan with the chunked associative prefix scan.
pub fn ssm_scan_parallel(x: &TokenSequence, p: &SsmStreamParams) -> Result<TokenSequence> {
    ssm_scan(x, p, ScanMode::Parallel)
}

/// Saved activations of one stream for [`stream_backward`].
#[derive(Clone, Debug)]
pub struct StreamCache {
    x: TokenSequence,
    sel: SelectiveParams,
    a: Vec<f64>,
    a_bar: Vec<f64>,
    h: Vec<f64>,
}

/// One Mamba stream over an already-normalized sequence: selective
/// projections, discretization, scan and readout including the D skip.
pub fn mamba_stream_forward(x: &TokenSequence, p: &SsmStreamParams) -> Result<TokenSequence> {
    ssm_scan_sequential(x, p)
}

pub fn stream_forward_cached(x: &TokenSequence, p: &SsmStreamParams) -> Result<(TokenSequence, StreamCache)> {
    let sel = selective_params(x, p)?;
    let a = p.a();
    let step = discretize(x, &sel, &a);
    let h = scan_states_sequential(&step);
    let y = readout(x, &sel, &h, p.d_skip.data());
    Ok((
        y,
        StreamCache {
            x: x.clone(),
            sel,
            a,
            a_bar: step.a_bar,
            h,
        },
    ))
}

/// Reverse pass of a stream; accumulates into `grad`, returns d(loss)/dx.
pub fn stream_backward(
    cache: &StreamCache,
    p: &SsmStreamParams,
    gy: &TokenSequence,
    grad: &mut SsmStreamParams,
) -> TokenSequence {
    let sel = &cache.sel;
    let x = &cache.x;
    let (l, c, n) = (sel.len, sel.channels, sel.state_dim);
    let lanes = c * n;
    let d = p.d_skip.data();

    let mut gx = TokenSequence::zeros(l, c);
    let mut g_delta = vec![0.0; l * c];
    let mut g_b = vec![0.0; l * n];
    let mut g_c = vec![0.0; l * n];
    let mut g_a = vec![0.0; lanes];
    let mut carry = vec![0.0; lanes];

    {
        let gd = grad.d_skip.data_mut();
        for k in 0..l {
            let (xk, gk) = (x.token(k), gy.token(k));
            for ch in 0..c {
                gd[ch] += gk[ch] * xk[ch];
            }
        }
    }

    for k in (0..l).rev() {
        let xk = x.token(k);
        let gyk = gy.token(k);
        let bk = &sel.b[k * n..(k + 1) * n];
        let ck = &sel.c[k * n..(k + 1) * n];
        let gxk = gx.token_mut(k);
        for ch in 0..c {
            let dk = sel.delta[k * c + ch];
            let base = (k * c + ch) * n;
            let mut gdelta = 0.0;
            let mut gx_acc = gyk[ch] * d[ch];
            for s in 0..n {
                let lane = ch * n + s;
                let hk = cache.h[base + s];
                g_c[k * n + s] += gyk[ch] * hk;
                let gh = gyk[ch] * ck[s] + carry[lane];
                let h_prev = if k > 0 { cache.h[base - lanes + s] } else { 0.0 };
                let ab = cache.a_bar[base + s];
                let g_abar = gh * h_prev * ab;
                carry[lane] = ab * gh;
                gdelta += g_abar * cache.a[lane] + gh * bk[s] * xk[ch];
                g_a[lane] += g_abar * dk;
                g_b[k * n + s] += gh * dk * xk[ch];
                gx_acc += gh * dk * bk[s];
            }
            g_delta[k * c + ch] = gdelta;
            gxk[ch] += gx_acc;
        }
    }

    {
        let gal = grad.a_log.data_mut();
        for lane in 0..lanes {
            gal[lane] += g_a[lane] * cache.a[lane];
        }
    }

    let g_pre: Vec<f64> = g_delta
        .iter()
        .zip(&sel.delta_pre)
        .map(|(g, &z)| g * sigmoid(z))
        .collect();
    let gx_delta = p.delta_proj.backward(x.as_slice(), &g_pre, &mut grad.delta_proj);

    let gxs = gx.as_mut_slice();
    for (a, b) in gxs.iter_mut().zip(&gx_delta) {
        *a += b;
    }
    for (w, gw, gproj) in [(&p.w_b, &mut grad.w_b, &g_b), (&p.w_c, &mut grad.w_c, &g_c)] {
        let gw = gw.data_mut();
        for k in 0..l {
            let xk = &x.as_slice()[k * c..(k + 1) * c];
            let gk = &gproj[k * n..(k + 1) * n];
            let gxk = &mut gxs[k * c..(k + 1) * c];
            for s in 0..n {
                let g = gk[s];
                if g == 0.0 {
                    continue;
                }
                let wr = &w.data()[s * c..(s + 1) * c];
                let gwr = &mut gw[s * c..(s + 1) * c];
                for i in 0..c {
                    gwr[i] += g * xk[i];
                    gxk[i] += g * wr[i];
                }
            }
        }
    }
    gx
}
