//! Contractive compression operators with exact byte-cost accounting.
//!
//! A compressor `C` is contractive with factor `α ∈ (0,1]` when
//! `E‖C(x) − x‖² ≤ (1−α)‖x‖²` over its own randomness. Top-k satisfies the
//! bound deterministically with `α = k/d`; rand-k (unscaled) satisfies it in
//! expectation with the same factor. Stochastic quantization is unbiased
//! but not contractive on its own; the rescaled variant
//! `Q(x)/(1 + min(d/s², √d/s))` is, with `α = 1/(1 + min(d/s², √d/s))`.
//!
//! Values are compressed as flat slices in column-major order (vectors and
//! composite block points flatten to the same layout), so one codec serves
//! both the matrix and the block-wise engines. Byte costs follow the wire
//! formats documented on [`CompressorSpec::bytes_on_wire`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, StreamDomain};
use crate::MatrixVar;

/// How rand-k communicates its index choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPolicy {
    /// Sender and receiver derive the same indices from a shared
    /// `(seed, node, step)` stream; only values travel.
    SharedSeed,
    /// Indices travel alongside values.
    TransmitIndices,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressorKind {
    /// Exact pass-through.
    Identity,
    /// Keep the k entries of largest magnitude (ties: lowest flat index).
    TopK { k: usize },
    /// Keep k uniformly chosen entries, unscaled.
    RandK { k: usize, seed_policy: SeedPolicy },
    /// Stochastic quantization with `s` levels; unbiased, not contractive.
    Qsgd { s: u32 },
    /// Quantization rescaled by `1/(1+min(d/s², √d/s))`; contractive.
    QsgdScaled { s: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressorSpec {
    pub kind: CompressorKind,
}

/// One uplink message: wire payload, its decoded value, and the wire cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    pub payload: Vec<u8>,
    /// Decoded value in the sender's flat layout. Bit-identical to what
    /// [`CompressorSpec::decompress`] reproduces from the payload.
    pub logical: Vec<f64>,
    pub bytes_on_wire: u64,
}

impl CompressedMessage {
    /// Reinterprets the flat logical value as an `n×p` matrix.
    pub fn logical_matrix(&self, rows: usize, cols: usize) -> MatrixVar {
        MatrixVar::from_column_slice(rows, cols, &self.logical)
    }
}

impl CompressorSpec {
    pub fn identity() -> Self {
        Self {
            kind: CompressorKind::Identity,
        }
    }

    pub fn top_k(k: usize) -> Self {
        Self {
            kind: CompressorKind::TopK { k },
        }
    }

    pub fn rand_k(k: usize, seed_policy: SeedPolicy) -> Self {
        Self {
            kind: CompressorKind::RandK { k, seed_policy },
        }
    }

    pub fn qsgd(s: u32) -> Self {
        Self {
            kind: CompressorKind::Qsgd { s },
        }
    }

    pub fn qsgd_scaled(s: u32) -> Self {
        Self {
            kind: CompressorKind::QsgdScaled { s },
        }
    }

    /// Resolves a retention ratio into a k over `d` flat entries
    /// (`⌊ratio·d⌋`, at least one entry).
    pub fn k_from_ratio(ratio: f64, d: usize) -> usize {
        ((ratio * d as f64).floor() as usize).clamp(1, d)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::InvalidParam("empty value to compress".into()));
        }
        if d > u32::MAX as usize {
            return Err(Error::InvalidParam(
                "flat length exceeds the 32-bit index format".into(),
            ));
        }
        match self.kind {
            CompressorKind::Identity => Ok(()),
            CompressorKind::TopK { k } | CompressorKind::RandK { k, .. } => {
                if k == 0 || k > d {
                    Err(Error::InvalidParam(format!(
                        "k = {k} out of range for {d} entries"
                    )))
                } else {
                    Ok(())
                }
            }
            CompressorKind::Qsgd { s } | CompressorKind::QsgdScaled { s } => {
                if s == 0 {
                    Err(Error::InvalidParam("quantization level s must be ≥ 1".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// The contractive factor α used by the schedules.
    ///
    /// For raw quantization the returned value is nominal (the factor of
    /// the rescaled variant); raw quantization itself carries no
    /// contraction guarantee.
    pub fn contractive_factor(&self, d: usize) -> f64 {
        match self.kind {
            CompressorKind::Identity => 1.0,
            CompressorKind::TopK { k } | CompressorKind::RandK { k, .. } => k as f64 / d as f64,
            CompressorKind::Qsgd { s } | CompressorKind::QsgdScaled { s } => {
                1.0 / (1.0 + qsgd_variance_factor(d, s))
            }
        }
    }

    /// Uplink bytes for one message over `d` flat entries.
    ///
    /// Identity: `8d`. Top-k and rand-k with transmitted indices:
    /// `k·(8+4)` (64-bit value + 32-bit flat index). Rand-k with a shared
    /// seed: `8k`. Quantization: `8 + ⌈d·(1 + ⌈log2(s+1)⌉)/8⌉`
    /// (norm + per-entry sign bit and level bits, byte-padded).
    pub fn bytes_on_wire(&self, d: usize) -> u64 {
        match self.kind {
            CompressorKind::Identity => 8 * d as u64,
            CompressorKind::TopK { k } => 12 * k as u64,
            CompressorKind::RandK { k, seed_policy } => match seed_policy {
                SeedPolicy::SharedSeed => 8 * k as u64,
                SeedPolicy::TransmitIndices => 12 * k as u64,
            },
            CompressorKind::Qsgd { s } | CompressorKind::QsgdScaled { s } => {
                let bits_per_entry = 1 + level_bits(s) as u64;
                8 + (d as u64 * bits_per_entry).div_ceil(8)
            }
        }
    }

    /// Compresses a flat value. `rng` must be the stream addressed by the
    /// sender's `(seed, node, step)`; the receiver re-derives the same
    /// stream to decode shared-seed messages.
    pub fn compress(&self, value: &[f64], rng: &mut ChaCha8Rng) -> Result<CompressedMessage> {
        self.validate(value.len())?;
        let d = value.len();
        let (payload, logical) = match self.kind {
            CompressorKind::Identity => {
                let mut payload = Vec::with_capacity(8 * d);
                for v in value {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                let logical = self.decode(&payload, d, None)?;
                (payload, logical)
            }
            CompressorKind::TopK { k } => {
                let idx = top_k_indices(value, k);
                let payload = encode_indexed(value, &idx);
                let logical = self.decode(&payload, d, None)?;
                (payload, logical)
            }
            CompressorKind::RandK { k, seed_policy } => {
                let idx = rand_k_indices(d, k, rng);
                match seed_policy {
                    SeedPolicy::SharedSeed => {
                        let mut payload = Vec::with_capacity(8 * k);
                        for &i in &idx {
                            payload.extend_from_slice(&value[i as usize].to_le_bytes());
                        }
                        let logical = decode_shared(&payload, d, &idx)?;
                        (payload, logical)
                    }
                    SeedPolicy::TransmitIndices => {
                        let payload = encode_indexed(value, &idx);
                        let logical = self.decode(&payload, d, None)?;
                        (payload, logical)
                    }
                }
            }
            CompressorKind::Qsgd { s } | CompressorKind::QsgdScaled { s } => {
                let payload = encode_quantized(value, s, rng);
                let logical = self.decode(&payload, d, None)?;
                (payload, logical)
            }
        };
        debug_assert_eq!(payload.len() as u64, self.bytes_on_wire(d));
        Ok(CompressedMessage {
            bytes_on_wire: self.bytes_on_wire(d),
            payload,
            logical,
        })
    }

    /// Decodes a payload back into the flat value it represents.
    ///
    /// Shared-seed rand-k needs the `(seed, node, step)` address the sender
    /// used, to re-derive the index stream.
    pub fn decompress(
        &self,
        payload: &[u8],
        d: usize,
        shared_stream: Option<(u64, u64, u64)>,
    ) -> Result<Vec<f64>> {
        self.decode(payload, d, shared_stream)
    }

    fn decode(
        &self,
        payload: &[u8],
        d: usize,
        shared_stream: Option<(u64, u64, u64)>,
    ) -> Result<Vec<f64>> {
        match self.kind {
            CompressorKind::Identity => {
                if payload.len() != 8 * d {
                    return Err(Error::BadDataset("identity payload length".into()));
                }
                Ok(payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            }
            CompressorKind::TopK { .. }
            | CompressorKind::RandK {
                seed_policy: SeedPolicy::TransmitIndices,
                ..
            } => decode_indexed(payload, d),
            CompressorKind::RandK {
                k,
                seed_policy: SeedPolicy::SharedSeed,
            } => {
                let idx = match shared_stream {
                    Some((seed, node, step)) => {
                        let mut r = stream(seed, StreamDomain::Compress, node, step);
                        rand_k_indices(d, k, &mut r)
                    }
                    // Within-message decode at compression time: the caller
                    // already advanced the shared stream, so recover the
                    // indices from the payload order being index-sorted is
                    // impossible without the stream. Compression decodes
                    // through `decode_shared_with_indices` instead.
                    None => return Err(Error::InvalidParam(
                        "shared-seed decode requires the sender's stream address".into(),
                    )),
                };
                decode_shared(payload, d, &idx)
            }
            CompressorKind::Qsgd { s } => decode_quantized(payload, d, s, 1.0),
            CompressorKind::QsgdScaled { s } => {
                let scale = 1.0 / (1.0 + qsgd_variance_factor(d, s));
                decode_quantized(payload, d, s, scale)
            }
        }
    }
}

fn level_bits(s: u32) -> u32 {
    // Smallest b with 2^b ≥ s+1.
    32 - s.leading_zeros()
}

fn qsgd_variance_factor(d: usize, s: u32) -> f64 {
    let d = d as f64;
    let s = s as f64;
    (d / (s * s)).min(d.sqrt() / s)
}

/// Indices of the k largest-magnitude entries; equal magnitudes resolve to
/// the lowest flat index. Returned in ascending index order.
fn top_k_indices(value: &[f64], k: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..value.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        let ma = value[a as usize].abs();
        let mb = value[b as usize].abs();
        mb.total_cmp(&ma).then_with(|| a.cmp(&b))
    });
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// k distinct uniform indices via partial Fisher–Yates, ascending.
fn rand_k_indices(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut pool: Vec<u32> = (0..d as u32).collect();
    for i in 0..k {
        let j = rng.random_range(i..d);
        pool.swap(i, j);
    }
    let mut kept = pool[..k].to_vec();
    kept.sort_unstable();
    kept
}

fn encode_indexed(value: &[f64], idx: &[u32]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(12 * idx.len());
    for &i in idx {
        payload.extend_from_slice(&i.to_le_bytes());
    }
    for &i in idx {
        payload.extend_from_slice(&value[i as usize].to_le_bytes());
    }
    payload
}

fn decode_indexed(payload: &[u8], d: usize) -> Result<Vec<f64>> {
    if !payload.len().is_multiple_of(12) {
        return Err(Error::BadDataset("indexed payload length".into()));
    }
    let k = payload.len() / 12;
    let (idx_bytes, val_bytes) = payload.split_at(4 * k);
    let mut out = vec![0.0; d];
    for (ib, vb) in idx_bytes.chunks_exact(4).zip(val_bytes.chunks_exact(8)) {
        let i = u32::from_le_bytes(ib.try_into().unwrap()) as usize;
        if i >= d {
            return Err(Error::BadDataset("index out of range".into()));
        }
        out[i] = f64::from_le_bytes(vb.try_into().unwrap());
    }
    Ok(out)
}

fn decode_shared(payload: &[u8], d: usize, idx: &[u32]) -> Result<Vec<f64>> {
    if payload.len() != 8 * idx.len() {
        return Err(Error::BadDataset("shared-seed payload length".into()));
    }
    let mut out = vec![0.0; d];
    for (&i, vb) in idx.iter().zip(payload.chunks_exact(8)) {
        out[i as usize] = f64::from_le_bytes(vb.try_into().unwrap());
    }
    Ok(out)
}

fn encode_quantized(value: &[f64], s: u32, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let norm = value.iter().map(|v| v * v).sum::<f64>().sqrt();
    let bits = level_bits(s);
    let mut payload = Vec::with_capacity(8 + (value.len() * (1 + bits as usize)).div_ceil(8));
    payload.extend_from_slice(&norm.to_le_bytes());
    let mut writer = BitWriter::new();
    for &v in value {
        let sign = if v < 0.0 { 1u32 } else { 0u32 };
        let level = if norm > 0.0 {
            let u = s as f64 * v.abs() / norm;
            let lo = u.floor();
            let frac = u - lo;
            let mut level = lo as u32;
            if rng.random::<f64>() < frac {
                level += 1;
            }
            level.min(s)
        } else {
            0
        };
        writer.push(sign, 1);
        writer.push(level, bits);
    }
    payload.extend_from_slice(&writer.finish());
    payload
}

fn decode_quantized(payload: &[u8], d: usize, s: u32, scale: f64) -> Result<Vec<f64>> {
    if payload.len() < 8 {
        return Err(Error::BadDataset("quantized payload too short".into()));
    }
    let norm = f64::from_le_bytes(payload[..8].try_into().unwrap());
    let bits = level_bits(s);
    let mut reader = BitReader::new(&payload[8..]);
    let mut out = Vec::with_capacity(d);
    for _ in 0..d {
        let sign = reader.pull(1)?;
        let level = reader.pull(bits)?;
        let mut v = norm * (level as f64 / s as f64) * scale;
        if sign == 1 {
            v = -v;
        }
        out.push(v);
    }
    Ok(out)
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: u32,
}

impl BitWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            bit: 0,
        }
    }

    fn push(&mut self, value: u32, width: u32) {
        for i in 0..width {
            if self.bit == 0 {
                self.bytes.push(0);
            }
            let b = (value >> i) & 1;
            *self.bytes.last_mut().unwrap() |= (b as u8) << self.bit;
            self.bit = (self.bit + 1) % 8;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn pull(&mut self, width: u32) -> Result<u32> {
        let mut out = 0u32;
        for i in 0..width {
            let byte = self.pos / 8;
            if byte >= self.bytes.len() {
                return Err(Error::BadDataset("quantized payload truncated".into()));
            }
            let b = (self.bytes[byte] >> (self.pos % 8)) & 1;
            out |= (b as u32) << i;
            self.pos += 1;
        }
        Ok(out)
    }
}

/// θ and β constants derived from a contractive factor:
/// `θ = 1 − √(1−α)`, `β = (1−α)/(1−√(1−α))`; the exact-compressor limit
/// α = 1 gives `(1, 0)` by continuity.
pub fn theta_beta(alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "contractive factor must lie in (0, 1], got {alpha}"
        )));
    }
    if alpha == 1.0 {
        return Ok((1.0, 0.0));
    }
    let theta = 1.0 - (1.0 - alpha).sqrt();
    let beta = (1.0 - alpha) / theta;
    Ok((theta, beta))
}

/// Monte Carlo mean of `‖C(M)−M‖²/‖M‖²` over standard-Gaussian draws.
pub fn estimate_contraction(
    spec: &CompressorSpec,
    dims: (usize, usize),
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let d = dims.0 * dims.1;
    spec.validate(d)?;
    let mut acc = 0.0;
    for _ in 0..trials {
        let mut value = vec![0.0f64; d];
        for v in value.iter_mut() {
            *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        }
        let msg = spec.compress(&value, rng)?;
        let err: f64 = msg
            .logical
            .iter()
            .zip(&value)
            .map(|(c, v)| (c - v) * (c - v))
            .sum();
        let norm: f64 = value.iter().map(|v| v * v).sum();
        acc += err / norm;
    }
    Ok(acc / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, stream, StreamDomain};
    use approx::assert_relative_eq;

    fn rng(step: u64) -> ChaCha8Rng {
        stream(911, StreamDomain::Probe, 0, step)
    }

    #[test]
    fn identity_is_exact_with_full_byte_cost() {
        let mut r = rng(0);
        let m = normal_matrix(4, 3, &mut r);
        let spec = CompressorSpec::identity();
        let msg = spec.compress(m.as_slice(), &mut r).unwrap();
        assert_eq!(msg.logical, m.as_slice());
        assert_eq!(msg.bytes_on_wire, 8 * 12);
        assert_eq!(msg.logical_matrix(4, 3), m);
    }

    #[test]
    fn top_k_keeps_largest_magnitudes() {
        let mut r = rng(1);
        let spec = CompressorSpec::top_k(1);
        let msg = spec.compress(&[2.0, 1.0], &mut r).unwrap();
        assert_eq!(msg.logical, vec![2.0, 0.0]);
        assert_eq!(msg.bytes_on_wire, 12);

        // Ties resolve to the lowest flat index.
        let msg = spec.compress(&[-3.0, 3.0], &mut r).unwrap();
        assert_eq!(msg.logical, vec![-3.0, 0.0]);
    }

    #[test]
    fn top_k_deterministic_contraction_bound() {
        let mut r = rng(2);
        let d = 24;
        let k = 5;
        let spec = CompressorSpec::top_k(k);
        let slack = 1.0 - k as f64 / d as f64;
        for t in 0..10_000 {
            let value: Vec<f64> = if t % 4 == 0 {
                // Tied magnitudes exercise the deterministic tie-break.
                (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()
            } else {
                normal_matrix(d, 1, &mut r).as_slice().to_vec()
            };
            let msg = spec.compress(&value, &mut r).unwrap();
            let err: f64 = msg
                .logical
                .iter()
                .zip(&value)
                .map(|(c, v)| (c - v) * (c - v))
                .sum();
            let norm: f64 = value.iter().map(|v| v * v).sum();
            assert!(err <= slack * norm * (1.0 + 1e-12));
        }
    }

    #[test]
    fn rand_k_full_retention_is_exact() {
        let mut r = rng(3);
        let m = normal_matrix(5, 2, &mut r);
        for policy in [SeedPolicy::SharedSeed, SeedPolicy::TransmitIndices] {
            let spec = CompressorSpec::rand_k(10, policy);
            let msg = spec.compress(m.as_slice(), &mut r).unwrap();
            assert_eq!(msg.logical, m.as_slice());
        }
    }

    #[test]
    fn rand_k_enumeration_matches_analytic_factor() {
        // K=1, d=2: both index choices are equally likely, so the mean
        // squared error ratio over the two draws is exactly 1 − K/d = 1/2.
        let spec = CompressorSpec::rand_k(1, SeedPolicy::TransmitIndices);
        assert_eq!(spec.contractive_factor(2), 0.5);
        let value = [3.0, 4.0];
        let mut seen = std::collections::HashSet::new();
        let mut ratios = Vec::new();
        let mut t = 0u64;
        while seen.len() < 2 && t < 1000 {
            let mut r = stream(1, StreamDomain::Compress, 0, t);
            let msg = spec.compress(&value, &mut r).unwrap();
            let kept = msg.logical.iter().position(|v| *v != 0.0).unwrap();
            if seen.insert(kept) {
                let err: f64 = msg
                    .logical
                    .iter()
                    .zip(&value)
                    .map(|(c, v)| (c - v) * (c - v))
                    .sum();
                ratios.push(err / 25.0);
            }
            t += 1;
        }
        assert_eq!(seen.len(), 2);
        assert_relative_eq!(ratios.iter().sum::<f64>() / 2.0, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn rand_k_monte_carlo_contraction() {
        let spec = CompressorSpec::rand_k(1, SeedPolicy::SharedSeed);
        let mut r = rng(4);
        let trials = 100_000;
        let est = estimate_contraction(&spec, (10, 1), trials, &mut r).unwrap();
        // Ratio per trial lies in [0,1]; 3 standard errors with a crude
        // variance bound of 1/4.
        let se = 0.5 / (trials as f64).sqrt();
        assert!((est - 0.9).abs() <= 3.0 * se, "estimate {est}");
    }

    #[test]
    fn qsgd_zero_input_and_byte_model() {
        let mut r = rng(5);
        let spec = CompressorSpec::qsgd(16);
        let msg = spec.compress(&[0.0; 7], &mut r).unwrap();
        assert_eq!(msg.logical, vec![0.0; 7]);
        // 1 sign bit + 5 level bits per entry, byte-padded, plus the norm.
        assert_eq!(msg.bytes_on_wire, 8 + (7 * 6f64 as usize).div_ceil(8) as u64);
        assert_eq!(msg.bytes_on_wire, 8 + 6);
    }

    #[test]
    fn qsgd_is_unbiased() {
        let mut r = rng(6);
        let spec = CompressorSpec::qsgd(4);
        let value = [0.3, -1.2, 0.7, 2.1];
        let trials = 200_000;
        let mut mean = [0.0f64; 4];
        for _ in 0..trials {
            let msg = spec.compress(&value, &mut r).unwrap();
            for (m, c) in mean.iter_mut().zip(&msg.logical) {
                *m += c;
            }
        }
        let norm: f64 = value.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (m, v) in mean.iter().zip(&value) {
            let est = m / trials as f64;
            // Per-entry standard error is at most norm/(s√trials).
            let se = norm / 4.0 / (trials as f64).sqrt();
            assert!((est - v).abs() <= 4.0 * se, "entry {est} vs {v}");
        }
    }

    #[test]
    fn qsgd_scaled_meets_declared_contraction() {
        let spec = CompressorSpec::qsgd_scaled(4);
        let d = 64;
        let alpha = spec.contractive_factor(d);
        assert!(alpha < 1.0);
        let mut r = rng(7);
        let trials = 20_000;
        let est = estimate_contraction(&spec, (d, 1), trials, &mut r).unwrap();
        let se = 0.5 / (trials as f64).sqrt();
        assert!(
            est <= (1.0 - alpha) + 3.0 * se,
            "estimate {est} exceeds declared bound {}",
            1.0 - alpha
        );
    }

    #[test]
    fn shared_seed_round_trip_via_stream_address() {
        let mut r = rng(8);
        let value = normal_matrix(6, 2, &mut r);
        let spec = CompressorSpec::rand_k(4, SeedPolicy::SharedSeed);
        let addr = (77u64, 3u64, 12u64);
        let mut sender = stream(addr.0, StreamDomain::Compress, addr.1, addr.2);
        let msg = spec.compress(value.as_slice(), &mut sender).unwrap();
        let decoded = spec
            .decompress(&msg.payload, value.len(), Some(addr))
            .unwrap();
        assert_eq!(decoded, msg.logical);
    }

    #[test]
    fn round_trips_are_bit_identical() {
        let mut r = rng(9);
        let value = normal_matrix(9, 3, &mut r);
        let d = value.len();
        for spec in [
            CompressorSpec::identity(),
            CompressorSpec::top_k(5),
            CompressorSpec::rand_k(5, SeedPolicy::TransmitIndices),
            CompressorSpec::qsgd(16),
            CompressorSpec::qsgd_scaled(16),
        ] {
            let msg = spec.compress(value.as_slice(), &mut r).unwrap();
            let decoded = spec.decompress(&msg.payload, d, None).unwrap();
            assert_eq!(decoded, msg.logical, "{:?}", spec.kind);
            assert_eq!(msg.payload.len() as u64, spec.bytes_on_wire(d));
        }
    }

    #[test]
    fn theta_beta_values() {
        assert_eq!(theta_beta(1.0).unwrap(), (1.0, 0.0));
        let (t, b) = theta_beta(0.75).unwrap();
        assert_relative_eq!(t, 0.5);
        assert_relative_eq!(b, 0.5);
        let (t, b) = theta_beta(0.96).unwrap();
        assert_relative_eq!(t, 0.8, epsilon = 1e-12);
        assert_relative_eq!(b, 0.05, epsilon = 1e-12);
        assert!(theta_beta(0.0).is_err());
    }

    #[test]
    fn estimate_contraction_exact_compressors() {
        let mut r = rng(10);
        let id = CompressorSpec::identity();
        assert_eq!(estimate_contraction(&id, (3, 2), 50, &mut r).unwrap(), 0.0);
        let full = CompressorSpec::top_k(6);
        assert_eq!(
            estimate_contraction(&full, (3, 2), 50, &mut r).unwrap(),
            0.0
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(CompressorSpec::top_k(9).validate(8).is_err());
        assert!(CompressorSpec::top_k(0).validate(8).is_err());
        assert!(CompressorSpec::qsgd(0).validate(8).is_err());
        assert_eq!(CompressorSpec::k_from_ratio(0.1, 500_000), 50_000);
        assert_eq!(CompressorSpec::k_from_ratio(1e-9, 10), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn top_k_contraction_holds(vals in proptest::collection::vec(-100.0f64..100.0, 12), k in 1usize..12) {
                let spec = CompressorSpec::top_k(k);
                let mut r = stream(5, StreamDomain::Probe, 0, 0);
                let msg = spec.compress(&vals, &mut r).unwrap();
                let err: f64 = msg.logical.iter().zip(&vals).map(|(c, v)| (c - v) * (c - v)).sum();
                let norm: f64 = vals.iter().map(|v| v * v).sum();
                prop_assert!(err <= (1.0 - k as f64 / 12.0) * norm + 1e-9);
            }

            #[test]
            fn indexed_round_trip(vals in proptest::collection::vec(-100.0f64..100.0, 10), k in 1usize..10) {
                let spec = CompressorSpec::top_k(k);
                let mut r = stream(6, StreamDomain::Probe, 0, 1);
                let msg = spec.compress(&vals, &mut r).unwrap();
                let decoded = spec.decompress(&msg.payload, vals.len(), None).unwrap();
                prop_assert_eq!(decoded, msg.logical);
            }
        }
    }
}
