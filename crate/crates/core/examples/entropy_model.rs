//! Inspect a factorized logistic prior: PMFs, escape mass, rates and tables.

use latent_codec::entropy::{FactorizedPrior, RateMode};
use latent_codec::tensor::Tensor;

fn main() -> latent_codec::Result<()> {
    let prior = FactorizedPrior::from_params(vec![0.0, 3.5], vec![0.8, 12.0])?;
    for ch in 0..prior.channels() {
        let pmf: Vec<String> = (-3..=3).map(|k| format!("{:.4}", prior.pmf(ch, k))).collect();
        println!(
            "channel {ch}: loc {:.2} scale {:.2} pmf[-3..=3] = [{}] escape {:.2e}",
            prior.location(ch),
            prior.scale(ch),
            pmf.join(", "),
            prior.escape_mass(ch)
        );
    }

    let y = Tensor::new(vec![1, 2, 1, 4], vec![0.2, -0.4, 1.1, 0.0, 3.0, -20.0, 40.0, 3.6])?;
    for mode in [RateMode::Discrete, RateMode::Relaxed] {
        let r = prior.rate_bits(&y, mode)?;
        println!("{mode:?} rate: {:.3} bits ({} floored)", r.bits, r.floored);
    }

    let tables = prior.build_cdf_tables()?;
    for (ch, t) in tables.tables.iter().enumerate() {
        println!(
            "table {ch}: {} entries, total {}, strictly increasing {}",
            t.symbol_count(),
            t.total(),
            t.is_strictly_increasing()
        );
    }
    Ok(())
}
