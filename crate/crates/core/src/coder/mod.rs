//! Lossless coding of quantized latents and the bitstream container.
//!
//! Symbols inside the table support are coded with their channel's CDF.
//! Anything else is coded as the escape symbol followed by the value as a raw
//! 16-bit two's-complement word at uniform probability.
//!
//! The coder cannot tell which table a symbol was encoded with: decoding with
//! the wrong tables yields different symbols, not an error. The bitstream
//! header's model id is what guards against that.

mod bitstream;
mod range;

pub use bitstream::{lambda_index, Bitstream, BitstreamHeader, HEADER_LEN, LAMBDA_GRID};
pub use range::{RangeDecoder, RangeEncoder};

use crate::entropy::CdfTables;
use crate::error::{Error, Result};

const RAW_BITS: u32 = 16;

/// Range-code `symbols`; `channel_of(i)` selects the table for symbol `i`.
pub fn encode_symbols(
    symbols: &[i32],
    channel_of: impl Fn(usize) -> usize,
    tables: &CdfTables,
) -> Result<Vec<u8>> {
    let precision = tables.precision;
    let escape = tables.escape_index();
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let table = tables
            .tables
            .get(channel_of(i))
            .ok_or_else(|| Error::rejected(format!("no table for symbol {i}")))?;
        if tables.support.contains(s as i64) {
            let idx = (s - tables.support.min) as usize;
            enc.encode(table.start(idx), table.width(idx), precision);
        } else {
            let raw = i16::try_from(s).map_err(|_| Error::Unencodable(s as i64))?;
            enc.encode(table.start(escape), table.width(escape), precision);
            enc.encode(raw as u16 as u32, 1, RAW_BITS);
        }
    }
    Ok(enc.finish())
}

/// Decode exactly `count` symbols produced by [`encode_symbols`] with the
/// same tables and channel assignment.
pub fn decode_symbols(
    bytes: &[u8],
    tables: &CdfTables,
    count: usize,
    channel_of: impl Fn(usize) -> usize,
) -> Result<Vec<i32>> {
    let precision = tables.precision;
    let escape = tables.escape_index();
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let table = tables
            .tables
            .get(channel_of(i))
            .ok_or_else(|| Error::rejected(format!("no table for symbol {i}")))?;
        let target = dec.peek(precision)?;
        let idx = table.find(target);
        dec.consume(table.start(idx), table.width(idx), precision)?;
        if idx == escape {
            let raw = dec.peek(RAW_BITS)?;
            dec.consume(raw, 1, RAW_BITS)?;
            out.push(raw as u16 as i16 as i32);
        } else {
            out.push(tables.support.min + idx as i32);
        }
    }
    if !dec.is_exhausted() {
        return Err(Error::Decode(format!(
            "{} trailing payload bytes",
            bytes.len() - dec.bytes_consumed()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{CdfTable, FactorizedPrior, SymbolSupport};
    use proptest::prelude::*;

    fn tables_from(freqs: &[u32], support: SymbolSupport, precision: u32) -> CdfTables {
        CdfTables {
            tables: vec![CdfTable::from_frequencies(freqs)],
            support,
            precision,
        }
    }

    #[test]
    fn empty_sequence_is_flush_only() {
        let prior = FactorizedPrior::new(2);
        let tables = prior.build_cdf_tables().unwrap();
        let bytes = encode_symbols(&[], |_| 0, &tables).unwrap();
        assert_eq!(bytes.len(), 8);
        assert!(decode_symbols(&bytes, &tables, 0, |_| 0).unwrap().is_empty());
    }

    #[test]
    fn escapes_round_trip_including_extremes() {
        let prior = FactorizedPrior::from_params(vec![0.0], vec![2.0]).unwrap();
        let tables = prior.build_cdf_tables().unwrap();
        let symbols = [0, -64, 63, 64, -65, 32767, -32768, 1000, -3, 0];
        let bytes = encode_symbols(&symbols, |_| 0, &tables).unwrap();
        assert_eq!(decode_symbols(&bytes, &tables, symbols.len(), |_| 0).unwrap(), symbols);
    }

    #[test]
    fn out_of_raw_range_is_unencodable() {
        let tables = FactorizedPrior::new(1).build_cdf_tables().unwrap();
        assert!(matches!(
            encode_symbols(&[40000], |_| 0, &tables),
            Err(Error::Unencodable(40000))
        ));
    }

    #[test]
    fn every_truncation_is_detected() {
        let prior = FactorizedPrior::from_params(vec![0.0, 3.0], vec![1.5, 4.0]).unwrap();
        let tables = prior.build_cdf_tables().unwrap();
        let symbols: Vec<i32> = (0..400).map(|i| ((i * 37) % 23) - 11).collect();
        let bytes = encode_symbols(&symbols, |i| i % 2, &tables).unwrap();
        for cut in 0..bytes.len() {
            let res = decode_symbols(&bytes[..cut], &tables, symbols.len(), |i| i % 2);
            assert!(res.is_err(), "truncation to {cut} bytes went unnoticed");
        }
    }

    #[test]
    fn degenerate_alphabet_costs_almost_nothing() {
        // One symbol owns all but the minimum width of every other entry.
        let support = SymbolSupport { min: 0, max: 3 };
        let freqs = [(1 << 16) - 4, 1, 1, 1, 1];
        let tables = tables_from(&freqs, support, 16);
        let short = encode_symbols(&vec![0; 100], |_| 0, &tables).unwrap();
        let long = encode_symbols(&vec![0; 10_100], |_| 0, &tables).unwrap();
        let growth_bits = 8.0 * (long.len() as f64 - short.len() as f64);
        // Information content is −log₂(65532/65536) ≈ 8.8e-5 bits per symbol.
        assert!(growth_bits / 10_000.0 < 0.01, "{growth_bits} bits for 10^4 symbols");
        let back = decode_symbols(&long, &tables, 10_100, |_| 0).unwrap();
        assert!(back.iter().all(|&s| s == 0));
    }

    #[test]
    fn wrong_table_decodes_without_error_but_differs() {
        let a = FactorizedPrior::from_params(vec![0.0], vec![1.0]).unwrap();
        let b = FactorizedPrior::from_params(vec![10.0], vec![0.5]).unwrap();
        let (ta, tb) = (a.build_cdf_tables().unwrap(), b.build_cdf_tables().unwrap());
        let symbols: Vec<i32> = (0..200).map(|i| (i % 5) - 2).collect();
        let bytes = encode_symbols(&symbols, |_| 0, &ta).unwrap();
        // A decode error is also acceptable: it may run off the payload.
        if let Ok(decoded) = decode_symbols(&bytes, &tb, symbols.len(), |_| 0) {
            assert_ne!(decoded, symbols);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn lossless_over_random_priors(
            params in prop::collection::vec((-30.0f32..30.0, 0.05f32..40.0), 1..4),
            raw in prop::collection::vec((0usize..4, -200i32..200), 0..600),
        ) {
            let (loc, scale): (Vec<f32>, Vec<f32>) = params.iter().copied().unzip();
            let prior = FactorizedPrior::from_params(loc, scale).unwrap();
            let tables = prior.build_cdf_tables().unwrap();
            let c = params.len();
            let symbols: Vec<i32> = raw.iter().map(|&(_, s)| s).collect();
            let chans: Vec<usize> = raw.iter().map(|&(ch, _)| ch % c).collect();
            let bytes = encode_symbols(&symbols, |i| chans[i], &tables).unwrap();
            let back = decode_symbols(&bytes, &tables, symbols.len(), |i| chans[i]).unwrap();
            prop_assert_eq!(back, symbols);
        }
    }
}
