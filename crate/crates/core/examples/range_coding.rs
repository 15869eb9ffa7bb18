//! Range-code symbols drawn from a prior and compare with the model rate.

use latent_codec::coder::{decode_symbols, encode_symbols};
use latent_codec::entropy::FactorizedPrior;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> latent_codec::Result<()> {
    let prior = FactorizedPrior::from_params(vec![-2.0, 0.0, 5.0], vec![0.5, 2.0, 8.0])?;
    let tables = prior.build_cdf_tables()?;
    let per_channel = 20_000;
    let channel_of = |i: usize| i / per_channel;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let symbols: Vec<i32> = (0..3 * per_channel)
        .map(|i| {
            let ch = channel_of(i);
            let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
            (prior.location(ch) + prior.scale(ch) * (u / (1.0 - u)).ln()).round() as i32
        })
        .collect();

    let bytes = encode_symbols(&symbols, channel_of, &tables)?;
    let decoded = decode_symbols(&bytes, &tables, symbols.len(), channel_of)?;
    let model_bits: f64 = symbols
        .iter()
        .enumerate()
        .map(|(i, &k)| -prior.pmf(channel_of(i), k as i64).log2())
        .sum();
    println!("symbols: {}", symbols.len());
    println!("model rate: {model_bits:.0} bits");
    println!("table rate: {:.0} bits", tables.table_bits(&symbols, channel_of));
    println!("payload: {} bits", 8 * bytes.len());
    println!("round trip: {}", decoded == symbols);
    Ok(())
}
