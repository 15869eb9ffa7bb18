//! Entropy-coder tightness and PMF validity measurements.

#![allow(dead_code)]

use latent_codec::coder::{decode_symbols, encode_symbols};
use latent_codec::entropy::{logistic, FactorizedPrior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Draw from the discretized logistic: round a continuous logistic sample.
pub fn sample_symbol(rng: &mut ChaCha8Rng, loc: f64, scale: f64) -> i32 {
    let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
    (loc + scale * (u / (1.0 - u)).ln()).round() as i32
}

/// Random per-channel priors with location in [-10, 10] and scale
/// log-uniform in [0.3, 6].
pub fn random_prior(rng: &mut ChaCha8Rng, channels: usize) -> FactorizedPrior {
    let loc: Vec<f32> = (0..channels).map(|_| rng.random_range(-10.0..10.0)).collect();
    let scale: Vec<f32> = (0..channels)
        .map(|_| rng.random_range(0.3f32.ln()..6.0f32.ln()).exp())
        .collect();
    FactorizedPrior::from_params(loc, scale).expect("valid prior")
}

#[derive(Debug)]
pub struct Tightness {
    pub symbols: usize,
    pub payload_bits: f64,
    pub pmf_bits: f64,
    pub table_bits: f64,
    pub round_trip: bool,
}

impl Tightness {
    pub fn excess(&self) -> f64 {
        self.payload_bits / self.pmf_bits - 1.0
    }
}

/// Code `count` symbols spread channel-major over `channels` random priors.
pub fn coder_tightness(seed: u64, count: usize, channels: usize) -> Tightness {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = random_prior(&mut rng, channels);
    let tables = prior.build_cdf_tables().expect("tables");
    let per = count.div_ceil(channels);
    let channel_of = |i: usize| i / per;
    let symbols: Vec<i32> = (0..count)
        .map(|i| {
            let ch = channel_of(i);
            sample_symbol(&mut rng, prior.location(ch), prior.scale(ch))
        })
        .collect();
    let pmf_bits: f64 = symbols
        .iter()
        .enumerate()
        .map(|(i, &k)| -prior.pmf(channel_of(i), k as i64).log2())
        .sum();
    let bytes = encode_symbols(&symbols, channel_of, &tables).expect("encode");
    let decoded = decode_symbols(&bytes, &tables, count, channel_of);
    Tightness {
        symbols: count,
        payload_bits: 8.0 * bytes.len() as f64,
        pmf_bits,
        table_bits: tables.table_bits(&symbols, channel_of),
        round_trip: decoded.is_ok_and(|d| d == symbols),
    }
}

#[derive(Debug)]
pub struct PmfValidity {
    pub cases: usize,
    /// Largest `|Σ PMF + tails − 1|` over all cases.
    pub worst_sum_error: f64,
    pub tables_valid: bool,
}

/// Sum each randomized PMF over a wide window plus the analytic tail masses,
/// and check the quantized tables.
pub fn pmf_validity(seed: u64, cases: usize) -> PmfValidity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut tables_valid = true;
    for _ in 0..cases {
        let mu: f32 = rng.random_range(-60.0..60.0);
        let s: f32 = rng.random_range(0.05f32.ln()..50.0f32.ln()).exp();
        let prior = FactorizedPrior::from_params(vec![mu], vec![s]).expect("prior");
        let (mu, s) = (prior.location(0), prior.scale(0));
        let half = (20.0 * s).ceil() as i64 + 10;
        let (lo, hi) = (mu.round() as i64 - half, mu.round() as i64 + half);
        let window: f64 = (lo..=hi).map(|k| prior.pmf(0, k)).sum();
        let below = logistic::cdf(lo as f64 - 0.5, mu, s);
        let above = logistic::cdf(-(hi as f64 + 0.5), -mu, s);
        worst = worst.max((window + below + above - 1.0).abs());
        let tables = prior.build_cdf_tables().expect("tables");
        tables_valid &= tables.tables.iter().all(|t| {
            t.is_strictly_increasing() && t.total() == 1 << 16 && t.cdf()[0] == 0
        });
    }
    PmfValidity {
        cases,
        worst_sum_error: worst,
        tables_valid,
    }
}
