//! Image ⇄ bitstream using a trained model.

use crate::coder::{decode_symbols, encode_symbols, lambda_index, Bitstream, BitstreamHeader};
use crate::entropy::CdfTables;
use crate::error::{Error, Result};
use crate::network::{crop, pad_to_multiple, ModelParams};
use crate::refine::{quantize_latents, refine_latents, RefineConfig, RefineResult};
use crate::tensor::Tensor;

/// A model with its CDF tables built once.
#[derive(Clone, Debug)]
pub struct Codec {
    params: ModelParams,
    tables: CdfTables,
    model_id: u64,
}

#[derive(Clone, Debug)]
pub struct Compressed {
    pub bitstream: Bitstream,
    /// The coded integer latents.
    pub latents: Tensor<f32>,
    pub refinement: Option<RefineResult>,
}

#[derive(Clone, Debug)]
pub struct Decompressed {
    /// Reconstruction cropped to the original size, in `[0, 1]`.
    pub image: Tensor<f32>,
    pub latents: Tensor<f32>,
    /// Number of operations the decoder executed.
    pub decoder_ops: usize,
}

impl Codec {
    pub fn new(params: ModelParams) -> Result<Self> {
        let tables = params.prior.build_cdf_tables()?;
        let model_id = params.model_id();
        Ok(Codec {
            params,
            tables,
            model_id,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn tables(&self) -> &CdfTables {
        &self.tables
    }

    pub fn model_id(&self) -> u64 {
        self.model_id
    }

    /// Encode `image` (1×3×H×W in `[0, 1]`), optionally refining its latents first.
    pub fn compress(&self, image: &Tensor<f32>, refine: Option<&RefineConfig>) -> Result<Compressed> {
        let [n, c, h, w] = image.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::rejected(format!(
                "expected a single RGB image, got shape {:?}",
                image.shape()
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::rejected("image has no pixels"));
        }
        let (width, height) = match (u32::try_from(w), u32::try_from(h)) {
            (Ok(w), Ok(h)) => (w, h),
            _ => return Err(Error::rejected("image dimensions exceed 2^32 - 1")),
        };
        let d = self.params.config.downsampling();
        let x = pad_to_multiple(image, d)?;
        let y0 = self.params.encode_forward(&x)?;
        let refinement = match refine {
            Some(cfg) => Some(refine_latents(&y0, &x, &self.params, cfg)?),
            None => None,
        };
        let y = refinement.as_ref().map_or(&y0, |r| &r.latents);
        let latents = quantize_latents(y);
        self.pack(latents, width, height, refinement)
    }

    /// Entropy-code already quantized latents.
    pub fn encode_latents(&self, latents: Tensor<f32>, width: u32, height: u32) -> Result<Compressed> {
        self.pack(latents, width, height, None)
    }

    fn pack(
        &self,
        latents: Tensor<f32>,
        width: u32,
        height: u32,
        refinement: Option<RefineResult>,
    ) -> Result<Compressed> {
        let [_, ch, lh, lw] = latents.dims4()?;
        let dim16 = |v: usize| {
            u16::try_from(v).map_err(|_| Error::rejected(format!("latent extent {v} exceeds 65535")))
        };
        let symbols: Vec<i32> = latents.data().iter().map(|&v| v as i32).collect();
        let plane = lh * lw;
        let payload = encode_symbols(&symbols, |i| i / plane, &self.tables)?;
        let header = BitstreamHeader {
            model_id: self.model_id,
            lambda_index: lambda_index(self.params.lambda),
            width,
            height,
            latent_channels: dim16(ch)?,
            latent_height: dim16(lh)?,
            latent_width: dim16(lw)?,
            payload_len: 0,
        };
        Ok(Compressed {
            bitstream: Bitstream::new(header, payload)?,
            latents,
            refinement,
        })
    }

    /// Recover the integer latents of a bitstream produced by this model.
    pub fn decode_latents(&self, bitstream: &Bitstream) -> Result<Tensor<f32>> {
        let h = &bitstream.header;
        if h.model_id != self.model_id {
            return Err(Error::ModelMismatch {
                expected: h.model_id,
                actual: self.model_id,
            });
        }
        let d = self.params.config.downsampling();
        let (lc, lh, lw) = (
            h.latent_channels as usize,
            h.latent_height as usize,
            h.latent_width as usize,
        );
        if lc != self.params.config.latent_channels
            || lh != (h.height as usize).div_ceil(d)
            || lw != (h.width as usize).div_ceil(d)
        {
            return Err(Error::Decode(format!(
                "latent extents {lc}×{lh}×{lw} do not fit a {}×{} image",
                h.width, h.height
            )));
        }
        let plane = lh * lw;
        let symbols = decode_symbols(&bitstream.payload, &self.tables, h.symbol_count(), |i| i / plane)?;
        Tensor::new(
            vec![1, lc, lh, lw],
            symbols.into_iter().map(|s| s as f32).collect(),
        )
    }

    pub fn decompress(&self, bitstream: &Bitstream) -> Result<Decompressed> {
        let latents = self.decode_latents(bitstream)?;
        let (full, decoder_ops) = self.params.decode_forward_traced(&latents)?;
        let image = crop(
            &full,
            bitstream.header.height as usize,
            bitstream.header.width as usize,
        )?;
        Ok(Decompressed {
            image,
            latents,
            decoder_ops,
        })
    }
}
