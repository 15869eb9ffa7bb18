//! Rate and distortion measurements on 8-bit samples.

use std::fmt;

use crate::error::{Error, Result};
use crate::image_io::rgb8_from_tensor;
use crate::tensor::Tensor;

/// Mean squared error between two 8-bit buffers, in 8-bit units.
pub fn mse_8bit(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::rejected(format!(
            "cannot compare {} and {} samples",
            a.len(),
            b.len()
        )));
    }
    let sum: u64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    Ok(sum as f64 / a.len() as f64)
}

/// PSNR in dB for an 8-bit peak; infinite for identical images.
pub fn psnr_db(mse_255: f64) -> f64 {
    10.0 * (255.0 * 255.0 / mse_255).log10()
}

/// MSE in 8-bit units between two `[0, 1]` images after rounding both to 8 bits.
pub fn image_mse_8bit(original: &Tensor<f32>, reconstruction: &Tensor<f32>) -> Result<f64> {
    original.same_shape(reconstruction, "image_mse_8bit")?;
    let (_, _, a) = rgb8_from_tensor(original)?;
    let (_, _, b) = rgb8_from_tensor(reconstruction)?;
    mse_8bit(&a, &b)
}

/// Bits per pixel of a byte count over an image of `width × height`.
pub fn bits_per_pixel(bytes: usize, width: usize, height: usize) -> f64 {
    8.0 * bytes as f64 / (width * height) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Baseline,
    Adapt,
    Proba,
    Retrained,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Baseline,
        Strategy::Adapt,
        Strategy::Proba,
        Strategy::Retrained,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Adapt => "+adapt",
            Strategy::Proba => "+proba",
            Strategy::Retrained => "retrained",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.label() == s || st.label().trim_start_matches('+') == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?} (expected baseline, +adapt, +proba or retrained)"
                ))
            })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One row of the rate-distortion table.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct RDPoint {
    pub image_id: String,
    pub lambda: f64,
    pub strategy: String,
    /// Payload bits over original pixels.
    pub bpp_payload: f64,
    /// Payload plus header bits over original pixels.
    pub bpp_total: f64,
    /// MSE in 8-bit units.
    pub mse: f64,
    pub psnr_db: f64,
    pub refine_steps: usize,
    pub seed: u64,
    /// `ok`, or the error that prevented this row.
    pub status: String,
}

impl RDPoint {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// `bpp + λ · mse₂₅₅`, the objective the codec optimizes.
    pub fn rd_loss(&self) -> f64 {
        self.bpp_payload + self.lambda * self.mse
    }
}
