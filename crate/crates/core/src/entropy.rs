//! Factorized latent prior: a per-channel logistic density integrated over
//! unit bins. The same closed form gives the noise-relaxed likelihood of
//! `y + U(-½, ½)` and, at integers, the exact PMF of the quantized latents.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Default support `[S_min, S_max]` of the coded alphabet.
pub const DEFAULT_SUPPORT: SymbolSupport = SymbolSupport { min: -64, max: 63 };
/// Default CDF precision in bits.
pub const DEFAULT_PRECISION: u32 = 16;

pub mod logistic {
    //! Scalar discretized-logistic math, stable in both tails.

    use num_traits::Float;

    pub fn log_sigmoid<T: Float>(x: T) -> T {
        if x >= T::zero() {
            -(-x).exp().ln_1p()
        } else {
            x - x.exp().ln_1p()
        }
    }

    pub fn sigmoid<T: Float>(x: T) -> T {
        log_sigmoid(x).exp()
    }

    struct Parts<T> {
        ln_p: T,
        a: T,
        b: T,
        r: T,
        one_minus_r: T,
        sign: T,
    }

    /// Everything needed for `ln p` where `p = σ((u+½)/s) − σ((u−½)/s)`.
    /// Positive offsets are mirrored so both logistic terms sit in the left
    /// tail, where their ratio is computed without cancellation.
    fn parts<T: Float>(offset: T, scale: T) -> Parts<T> {
        let half = T::from(0.5).unwrap();
        let (t, sign) = if offset > T::zero() {
            (-offset, -T::one())
        } else {
            (offset, T::one())
        };
        let a = (t + half) / scale;
        let b = (t - half) / scale;
        let lsa = log_sigmoid(a);
        let d = log_sigmoid(b) - lsa;
        let one_minus_r = -d.exp_m1();
        Parts {
            ln_p: lsa + one_minus_r.ln(),
            a,
            b,
            r: d.exp(),
            one_minus_r,
            sign,
        }
    }

    /// Mass of the unit bin centred `offset` away from the location.
    pub fn likelihood<T: Float>(offset: T, scale: T) -> T {
        parts(offset, scale).ln_p.exp()
    }

    pub fn neg_log2_likelihood<T: Float>(offset: T, scale: T) -> T {
        -parts(offset, scale).ln_p / T::from(std::f64::consts::LN_2).unwrap()
    }

    /// Derivatives of `−log₂ p` with respect to the value and to `ln scale`.
    pub fn neg_log2_likelihood_grad<T: Float>(offset: T, scale: T) -> (T, T) {
        let Parts {
            a,
            b,
            r,
            one_minus_r,
            sign,
            ..
        } = parts(offset, scale);
        let sa = sigmoid(-a);
        let sb = sigmoid(-b);
        let dlnp_dt = (sa - r * sb) / (scale * one_minus_r);
        let dlnp_dls = (b * r * sb - a * sa) / one_minus_r;
        let ln2 = T::from(std::f64::consts::LN_2).unwrap();
        (-sign * dlnp_dt / ln2, -dlnp_dls / ln2)
    }

    /// Logistic CDF at `x` for the given location and scale.
    pub fn cdf<T: Float>(x: T, loc: T, scale: T) -> T {
        sigmoid((x - loc) / scale)
    }
}

/// Inclusive integer range of symbols with their own table entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SymbolSupport {
    pub min: i32,
    pub max: i32,
}

impl SymbolSupport {
    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.max < self.min
    }

    pub fn contains(&self, k: i64) -> bool {
        k >= self.min as i64 && k <= self.max as i64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateMode {
    /// Exact PMF of the rounded values.
    Discrete,
    /// Density of the noise-relaxed values.
    Relaxed,
}

/// Result of a rate computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateReport {
    pub bits: f64,
    /// Terms whose probability fell below `2^-P` and were floored there.
    pub floored: usize,
}

/// Per-channel logistic prior over latent values.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior {
    /// Location per channel, shape `[C]`.
    pub loc: Tensor<f32>,
    /// Natural log of the scale per channel, shape `[C]`.
    pub log_scale: Tensor<f32>,
    pub support: SymbolSupport,
    pub precision: u32,
}

impl FactorizedPrior {
    /// Unit-scale prior centred at zero.
    pub fn new(channels: usize) -> Self {
        FactorizedPrior {
            loc: Tensor::zeros(vec![channels]),
            log_scale: Tensor::zeros(vec![channels]),
            support: DEFAULT_SUPPORT,
            precision: DEFAULT_PRECISION,
        }
    }

    pub fn from_params(loc: Vec<f32>, scale: Vec<f32>) -> Result<Self> {
        if loc.len() != scale.len() {
            return Err(Error::rejected("prior: loc and scale lengths differ"));
        }
        if scale.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::rejected("prior: scales must be positive and finite"));
        }
        let c = loc.len();
        Ok(FactorizedPrior {
            loc: Tensor::new(vec![c], loc)?,
            log_scale: Tensor::new(vec![c], scale.iter().map(|s| s.ln()).collect())?,
            support: DEFAULT_SUPPORT,
            precision: DEFAULT_PRECISION,
        })
    }

    pub fn channels(&self) -> usize {
        self.loc.len()
    }

    pub fn location(&self, channel: usize) -> f64 {
        self.loc.data()[channel] as f64
    }

    pub fn scale(&self, channel: usize) -> f64 {
        (self.log_scale.data()[channel] as f64).exp()
    }

    /// Cap on the cost of one symbol: `P` bits, i.e. probability floored at `2^-P`.
    pub fn floor_bits(&self) -> f64 {
        self.precision as f64
    }

    fn check_channels<T: Element>(&self, y: &Tensor<T>) -> Result<[usize; 4]> {
        let dims = y.dims4()?;
        if dims[1] != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "prior",
                left: y.shape().to_vec(),
                right: self.loc.shape().to_vec(),
            });
        }
        Ok(dims)
    }

    /// Per-element density of the relaxed latents `ỹ = y + U(-½, ½)`.
    pub fn relaxed_likelihood<T: Element>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, h, w] = self.check_channels(y)?;
        let mut out = y.clone();
        for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let ch = i % c;
            let mu = T::from_f64_lossy(self.location(ch));
            let s = T::from_f64_lossy(self.scale(ch));
            chunk
                .iter_mut()
                .for_each(|v| *v = logistic::likelihood(*v - mu, s));
        }
        Ok(out)
    }

    /// Exact probability of integer symbol `k` in `channel`.
    pub fn pmf(&self, channel: usize, k: i64) -> f64 {
        logistic::likelihood(k as f64 - self.location(channel), self.scale(channel))
    }

    /// PMF of every element of an order-4 tensor of integer symbols.
    pub fn discrete_pmf<T: Element>(&self, symbols: &Tensor<T>) -> Result<Tensor<f64>> {
        let rounded = symbols.cast::<f64>().map(f64::round);
        self.relaxed_likelihood(&rounded)
    }

    /// `−Σ log₂ p` over all elements, each term capped at `P` bits.
    pub fn rate_bits<T: Element>(&self, y: &Tensor<T>, mode: RateMode) -> Result<RateReport> {
        let [_, c, h, w] = self.check_channels(y)?;
        let cap = self.floor_bits();
        let mut bits = 0.0;
        let mut floored = 0;
        for (i, chunk) in y.data().chunks(h * w).enumerate() {
            let ch = i % c;
            let (mu, s) = (self.location(ch), self.scale(ch));
            for v in chunk {
                let mut v = v.to_f64().unwrap_or(f64::NAN);
                if !v.is_finite() {
                    return Err(Error::divergence("rate_bits", "non-finite latent"));
                }
                if mode == RateMode::Discrete {
                    v = v.round();
                }
                let b = logistic::neg_log2_likelihood(v - mu, s);
                if b > cap || !b.is_finite() {
                    floored += 1;
                    bits += cap;
                } else {
                    bits += b;
                }
            }
        }
        Ok(RateReport { bits, floored })
    }

    /// Probability mass of the escape symbol: everything outside the support.
    pub fn escape_mass(&self, channel: usize) -> f64 {
        let (mu, s) = (self.location(channel), self.scale(channel));
        let below = logistic::cdf(self.support.min as f64 - 0.5, mu, s);
        let above = logistic::cdf(-(self.support.max as f64 + 0.5), -mu, s);
        below + above
    }

    /// In-support PMF followed by the escape mass, for one channel.
    pub fn coded_distribution(&self, channel: usize) -> Vec<f64> {
        let mut p: Vec<f64> = (self.support.min..=self.support.max)
            .map(|k| self.pmf(channel, k as i64))
            .collect();
        p.push(self.escape_mass(channel));
        p
    }

    /// Integer CDF tables for the range coder, rebuilt deterministically
    /// from the parameters.
    pub fn build_cdf_tables(&self) -> Result<CdfTables> {
        if self.support.is_empty() {
            return Err(Error::Config("empty symbol support".into()));
        }
        if !(1..=24).contains(&self.precision) {
            return Err(Error::Config(format!(
                "CDF precision {} outside 1..=24 bits",
                self.precision
            )));
        }
        let symbols = self.support.len() + 1;
        let total = 1u64 << self.precision;
        if symbols as u64 > total {
            return Err(Error::Config(format!(
                "{symbols} symbols cannot each get a nonzero width at {} bits",
                self.precision
            )));
        }
        let tables = (0..self.channels())
            .map(|ch| {
                let freqs = quantize_distribution(&self.coded_distribution(ch), total);
                CdfTable::from_frequencies(&freqs)
            })
            .collect();
        Ok(CdfTables {
            tables,
            support: self.support,
            precision: self.precision,
        })
    }
}

/// Integer frequencies summing to `total`, each at least 1, close to
/// `probs · total` in the KL sense: symbols that would fall below one unit are
/// pinned at one and the remaining mass is spread proportionally, then
/// rounded by largest remainder.
pub(crate) fn quantize_distribution(probs: &[f64], total: u64) -> Vec<u32> {
    let n = probs.len();
    assert!(n as u64 <= total && n > 0);
    let probs: Vec<f64> = probs
        .iter()
        .map(|&p| if p.is_finite() && p > 0.0 { p } else { 0.0 })
        .collect();
    let mut pinned = vec![false; n];
    let mut targets = vec![1.0; n];
    loop {
        let free_units = (total - pinned.iter().filter(|&&p| p).count() as u64) as f64;
        let free_mass: f64 = probs
            .iter()
            .zip(&pinned)
            .filter(|(_, &p)| !p)
            .map(|(&q, _)| q)
            .sum();
        let mut changed = false;
        for i in 0..n {
            if pinned[i] {
                continue;
            }
            let x = if free_mass > 0.0 {
                probs[i] * free_units / free_mass
            } else {
                0.0
            };
            if x < 1.0 {
                pinned[i] = true;
                changed = true;
            }
            targets[i] = x.max(1.0);
        }
        if !changed {
            break;
        }
        if pinned.iter().all(|&p| p) {
            // Degenerate: spread uniformly.
            targets.iter_mut().for_each(|t| *t = total as f64 / n as f64);
            break;
        }
    }
    let mut freqs: Vec<u64> = targets.iter().map(|&t| t.floor().max(1.0) as u64).collect();
    let assigned: u64 = freqs.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    if assigned <= total {
        let mut remaining = total - assigned;
        order.sort_by(|&i, &j| {
            let fi = targets[i] - targets[i].floor();
            let fj = targets[j] - targets[j].floor();
            fj.total_cmp(&fi).then(i.cmp(&j))
        });
        let mut idx = 0;
        while remaining > 0 {
            freqs[order[idx % n]] += 1;
            remaining -= 1;
            idx += 1;
        }
    } else {
        let mut excess = assigned - total;
        order.sort_by(|&i, &j| freqs[j].cmp(&freqs[i]).then(i.cmp(&j)));
        let mut idx = 0;
        while excess > 0 {
            let i = order[idx % n];
            if freqs[i] > 1 {
                freqs[i] -= 1;
                excess -= 1;
            }
            idx += 1;
        }
    }
    freqs.into_iter().map(|f| f as u32).collect()
}

/// Cumulative frequency table of one channel. Entry `i` is the start of symbol
/// `i`'s interval; the final entry equals `2^P`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
}

impl CdfTable {
    pub fn from_frequencies(freqs: &[u32]) -> Self {
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for &f in freqs {
            acc += f;
            cdf.push(acc);
        }
        CdfTable { cdf }
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn symbol_count(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn total(&self) -> u32 {
        *self.cdf.last().unwrap()
    }

    pub fn start(&self, index: usize) -> u32 {
        self.cdf[index]
    }

    pub fn width(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }

    /// Index of the symbol whose interval contains `target`.
    pub fn find(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.cdf.windows(2).all(|w| w[0] < w[1])
    }
}

/// Tables for every channel plus the alphabet layout they share.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTables {
    pub tables: Vec<CdfTable>,
    pub support: SymbolSupport,
    pub precision: u32,
}

impl CdfTables {
    pub fn escape_index(&self) -> usize {
        self.support.len()
    }

    /// `Σ −log₂(width / 2^P)` for a channel-major symbol sequence, including
    /// the 16 raw bits that follow every escape.
    pub fn table_bits(&self, symbols: &[i32], channel_of: impl Fn(usize) -> usize) -> f64 {
        let total = (1u64 << self.precision) as f64;
        symbols
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let table = &self.tables[channel_of(i)];
                if self.support.contains(s as i64) {
                    let idx = (s - self.support.min) as usize;
                    -(table.width(idx) as f64 / total).log2()
                } else {
                    -(table.width(self.escape_index()) as f64 / total).log2() + 16.0
                }
            })
            .sum()
    }
}
