//! Analytic operation counts.
//!
//! Every scalar add, subtract, multiply, divide, square root, exp, log and
//! negation counts as one. Comparisons, copies, gathers and index math are
//! free. Interpolation weights are treated as precomputed constants.

/// `rows` affine maps `in_dim -> out_dim` (one multiply and one add per weight).
pub fn linear(rows: usize, in_dim: usize, out_dim: usize) -> u64 {
    (rows * out_dim * 2 * in_dim) as u64
}

/// Mean, variance, reciprocal std and the affine output for every token.
pub fn layer_norm(rows: usize, channels: usize) -> u64 {
    (rows * (8 * channels + 5)) as u64
}

pub fn silu(elements: usize) -> u64 {
    4 * elements as u64
}

pub fn softplus(elements: usize) -> u64 {
    3 * elements as u64
}

/// 3x3 depthwise convolution with zero padding; border taps that fall
/// outside the grid cost nothing.
pub fn depthwise3x3(rows: usize, cols: usize, channels: usize) -> u64 {
    let taps = (3 * rows).saturating_sub(2) * (3 * cols).saturating_sub(2);
    (2 * channels * taps) as u64
}

pub fn upsample2x(out_elements: usize) -> u64 {
    7 * out_elements as u64
}

pub fn add(elements: usize) -> u64 {
    elements as u64
}

/// One selective SSM stream over `len` tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StreamFlops {
    pub a_matrix: u64,
    pub delta: u64,
    pub b_c: u64,
    pub discretize: u64,
    pub scan: u64,
    pub readout: u64,
}

impl StreamFlops {
    pub fn total(&self) -> u64 {
        self.a_matrix + self.delta + self.b_c + self.discretize + self.scan + self.readout
    }
}

pub fn stream(len: usize, channels: usize, state_dim: usize) -> StreamFlops {
    let (l, c, n) = (len, channels, state_dim);
    StreamFlops {
        a_matrix: (2 * c * n) as u64,
        delta: linear(l, c, c) + softplus(l * c),
        b_c: 2 * linear(l, c, n),
        discretize: (l * c * (1 + 3 * n)) as u64,
        scan: (2 * l * c * n) as u64,
        readout: (l * c * (2 * n + 2)) as u64,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ms2dFlops {
    pub norm: u64,
    pub a_matrix: u64,
    pub delta: u64,
    pub b_c: u64,
    pub discretize: u64,
    pub scan: u64,
    pub readout: u64,
    pub stream_sum: u64,
    pub mix: u64,
}

impl Ms2dFlops {
    pub fn total(&self) -> u64 {
        self.norm
            + self.a_matrix
            + self.delta
            + self.b_c
            + self.discretize
            + self.scan
            + self.readout
            + self.stream_sum
            + self.mix
    }
}

pub fn ms2d(len: usize, channels: usize, state_dim: usize) -> Ms2dFlops {
    let s = stream(len, channels, state_dim);
    let k = crate::ms2d::STREAMS as u64;
    Ms2dFlops {
        norm: layer_norm(len, channels),
        a_matrix: k * s.a_matrix,
        delta: k * s.delta,
        b_c: k * s.b_c,
        discretize: k * s.discretize,
        scan: k * s.scan,
        readout: k * s.readout,
        stream_sum: (k - 1) * add(len * channels),
        mix: linear(len, channels, channels),
    }
}

pub fn vss_block(rows: usize, cols: usize, channels: usize, state_dim: usize) -> u64 {
    let len = rows * cols;
    layer_norm(len, channels)
        + depthwise3x3(rows, cols, channels)
        + silu(len * channels)
        + ms2d(len, channels, state_dim).total()
        + linear(len, channels, channels)
        + add(len * channels)
}
