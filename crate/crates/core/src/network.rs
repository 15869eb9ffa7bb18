//! Encoder/decoder transforms, their parameters, and the model file.
//!
//! The encoder is a stack of strided convolutions with leaky-ReLU between
//! layers; the decoder mirrors it with transposed convolutions. Every layer
//! scales spatial extents by exactly its stride, so an input whose sides are
//! multiples of the total down-factor `D` round-trips to its own shape.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::entropy::{FactorizedPrior, SymbolSupport};
use crate::error::{Error, Result};
use crate::tensor::{Element, Padding, Tape, Tensor, Var};

const MODEL_MAGIC: &[u8; 4] = b"LPMD";
pub const MODEL_VERSION: u8 = 1;

/// Shape hyperparameters of the encoder/decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureConfig {
    /// Output widths of every encoder layer except the last.
    pub hidden_channels: Vec<usize>,
    /// Latent channel count `C`.
    pub latent_channels: usize,
    pub kernel: usize,
    /// Stride of each encoder layer (decoder uses them in reverse).
    pub strides: Vec<usize>,
    pub negative_slope: f32,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            hidden_channels: vec![32, 64],
            latent_channels: 48,
            kernel: 5,
            strides: vec![2, 2, 2],
            negative_slope: 0.2,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let layers = self.strides.len();
        if layers == 0 || layers > u8::MAX as usize {
            return Err(Error::Config("need between 1 and 255 layers".into()));
        }
        if self.hidden_channels.len() + 1 != layers {
            return Err(Error::Config(format!(
                "{} strides need {} hidden widths, got {}",
                layers,
                layers - 1,
                self.hidden_channels.len()
            )));
        }
        if self.latent_channels == 0 || self.hidden_channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.kernel == 0 || self.kernel > u8::MAX as usize {
            return Err(Error::Config("kernel size must be in 1..=255".into()));
        }
        if self
            .strides
            .iter()
            .any(|&s| s == 0 || s > self.kernel || s > u8::MAX as usize)
        {
            return Err(Error::Config(
                "strides must be positive and no larger than the kernel".into(),
            ));
        }
        if !(self.negative_slope > 0.0 && self.negative_slope <= 1.0) {
            return Err(Error::Config("negative slope must be in (0, 1]".into()));
        }
        let too_wide = |c: usize| c > u16::MAX as usize;
        if too_wide(self.latent_channels) || self.hidden_channels.iter().any(|&c| too_wide(c)) {
            return Err(Error::Config("channel widths must fit in 16 bits".into()));
        }
        Ok(())
    }

    /// Total spatial down-factor `D`.
    pub fn downsampling(&self) -> usize {
        self.strides.iter().product()
    }

    fn encoder_channels(&self) -> Vec<usize> {
        let mut chans = vec![3];
        chans.extend(&self.hidden_channels);
        chans.push(self.latent_channels);
        chans
    }

    fn padding(&self, stride: usize) -> Padding {
        Padding::same_scale(self.kernel, stride)
    }
}

/// Weight and bias of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

/// Named parameter groups; training modes select among them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Prior,
}

/// All learnable state of a model plus the λ it was trained for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ArchitectureConfig,
    pub lambda: f64,
    /// Seed used for initialization.
    pub seed: u64,
    pub encoder: Vec<ConvLayer>,
    pub decoder: Vec<ConvLayer>,
    pub prior: FactorizedPrior,
}

fn uniform_kernel(shape: [usize; 4], bound: f32, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

impl ModelParams {
    /// Fresh model: fan-in-scaled uniform kernels, zero biases, unit prior.
    pub fn init(config: ArchitectureConfig, lambda: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("invalid lambda {lambda}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel;
        let slope = config.negative_slope;
        let gain = |last: bool| if last { 3.0 } else { 6.0 / (1.0 + slope * slope) };
        let chans = config.encoder_channels();
        let layers = config.strides.len();

        let encoder = (0..layers)
            .map(|i| {
                let (cin, cout) = (chans[i], chans[i + 1]);
                let fan_in = (cin * k * k) as f32;
                let bound = (gain(i + 1 == layers) / fan_in).sqrt();
                ConvLayer {
                    weight: uniform_kernel([cout, cin, k, k], bound, &mut rng),
                    bias: Tensor::zeros(vec![cout]),
                }
            })
            .collect();

        let rev: Vec<usize> = chans.iter().rev().copied().collect();
        let strides: Vec<usize> = config.strides.iter().rev().copied().collect();
        let decoder = (0..layers)
            .map(|i| {
                let (cin, cout) = (rev[i], rev[i + 1]);
                let s = strides[i] as f32;
                let fan_in = (cin * k * k) as f32 / (s * s);
                let bound = (gain(i + 1 == layers) / fan_in).sqrt();
                ConvLayer {
                    weight: uniform_kernel([cin, cout, k, k], bound, &mut rng),
                    bias: Tensor::zeros(vec![cout]),
                }
            })
            .collect();

        let prior = FactorizedPrior::new(config.latent_channels);
        Ok(ModelParams {
            config,
            lambda,
            seed,
            encoder,
            decoder,
            prior,
        })
    }

    /// Every parameter tensor with its group, in canonical order.
    pub fn tensors(&self) -> Vec<(ParamGroup, &Tensor<f32>)> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.push((ParamGroup::Encoder, &l.weight));
            out.push((ParamGroup::Encoder, &l.bias));
        }
        for l in &self.decoder {
            out.push((ParamGroup::Decoder, &l.weight));
            out.push((ParamGroup::Decoder, &l.bias));
        }
        out.push((ParamGroup::Prior, &self.prior.loc));
        out.push((ParamGroup::Prior, &self.prior.log_scale));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor<f32>)> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.push((ParamGroup::Encoder, &mut l.weight));
            out.push((ParamGroup::Encoder, &mut l.bias));
        }
        for l in &mut self.decoder {
            out.push((ParamGroup::Decoder, &mut l.weight));
            out.push((ParamGroup::Decoder, &mut l.bias));
        }
        out.push((ParamGroup::Prior, &mut self.prior.loc));
        out.push((ParamGroup::Prior, &mut self.prior.log_scale));
        out
    }

    /// Little-endian bytes of every tensor in `group`.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        self.tensors()
            .into_iter()
            .filter(|(g, _)| *g == group)
            .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Stable 64-bit identity: leading 8 bytes of SHA-256 over the serialized
    /// configuration and parameters.
    pub fn model_id(&self) -> u64 {
        hash_id(&self.body_bytes())
    }

    /// Register every parameter on `tape`; groups for which `trainable`
    /// returns true become gradient leaves, the rest constants.
    pub fn register<T: Element>(
        &self,
        tape: &mut Tape<T>,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> TapeParams {
        let mut leaf = |group: ParamGroup, t: &Tensor<f32>| tape.leaf(t.cast(), trainable(group));
        let mut layers = |group, ls: &[ConvLayer]| -> Vec<(Var, Var)> {
            ls.iter()
                .map(|l| (leaf(group, &l.weight), leaf(group, &l.bias)))
                .collect()
        };
        let encoder = layers(ParamGroup::Encoder, &self.encoder);
        let decoder = layers(ParamGroup::Decoder, &self.decoder);
        let loc = tape.leaf(self.prior.loc.cast(), trainable(ParamGroup::Prior));
        let log_scale = tape.leaf(self.prior.log_scale.cast(), trainable(ParamGroup::Prior));
        TapeParams {
            encoder,
            decoder,
            loc,
            log_scale,
        }
    }

    fn check_image<T: Element>(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        if c != 3 {
            return Err(Error::rejected(format!("expected 3 image channels, got {c}")));
        }
        let d = self.config.downsampling();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::rejected(format!(
                "image extents {h}x{w} must be positive multiples of {d}; pad first"
            )));
        }
        Ok(())
    }

    fn check_latent<T: Element>(&self, y: &Tensor<T>) -> Result<()> {
        let [_, c, _, _] = y.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::rejected(format!(
                "latent has {c} channels, model expects {}",
                self.config.latent_channels
            )));
        }
        Ok(())
    }

    /// Encoder record on an existing tape.
    pub fn encoder_on_tape<T: Element>(
        &self,
        tape: &mut Tape<T>,
        vars: &TapeParams,
        x: Var,
    ) -> Result<Var> {
        self.check_image(tape.value(x))?;
        let slope = self.config.negative_slope as f64;
        let last = vars.encoder.len() - 1;
        let mut h = x;
        for (i, (&(w, b), &stride)) in vars.encoder.iter().zip(&self.config.strides).enumerate() {
            h = tape.conv2d(h, w, stride, self.config.padding(stride))?;
            h = tape.add_bias(h, b)?;
            if i != last {
                h = tape.leaky_relu(h, slope);
            }
        }
        Ok(h)
    }

    /// Decoder record on an existing tape, without the output clamp.
    pub fn decoder_on_tape<T: Element>(
        &self,
        tape: &mut Tape<T>,
        vars: &TapeParams,
        y: Var,
    ) -> Result<Var> {
        self.check_latent(tape.value(y))?;
        let slope = self.config.negative_slope as f64;
        let last = vars.decoder.len() - 1;
        let mut h = y;
        let strides = self.config.strides.iter().rev();
        for (i, (&(w, b), &stride)) in vars.decoder.iter().zip(strides).enumerate() {
            h = tape.conv_transpose2d(h, w, stride, self.config.padding(stride))?;
            h = tape.add_bias(h, b)?;
            if i != last {
                h = tape.leaky_relu(h, slope);
            }
        }
        Ok(h)
    }

    /// Latents `y = ψ(x)` at the chosen precision.
    pub fn encode_forward_as<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(x)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let y = self.encoder_on_tape(&mut tape, &vars, xv)?;
        Ok(tape.take_value(y))
    }

    /// Latents `y = ψ(x)` for a batch×3×H×W image in `[0, 1]`.
    pub fn encode_forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.encode_forward_as(x)
    }

    /// Reconstruction `x̂ = φ(ŷ)` clamped into `[0, 1]`, with the number of
    /// tape operations the decode executed.
    pub fn decode_forward_traced(&self, y: &Tensor<f32>) -> Result<(Tensor<f32>, usize)> {
        self.check_latent(y)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, |_| false);
        let yv = tape.constant(y.clone());
        let raw = self.decoder_on_tape(&mut tape, &vars, yv)?;
        let out = tape.clamp(raw, 0.0, 1.0);
        let ops = tape.len();
        Ok((tape.take_value(out), ops))
    }

    /// Reconstruction `x̂ = φ(ŷ)` clamped into `[0, 1]`.
    pub fn decode_forward(&self, y: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.decode_forward_traced(y)?.0)
    }

    fn body_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let mut out = Vec::new();
        out.push(cfg.strides.len() as u8);
        out.push(cfg.kernel as u8);
        out.extend((cfg.latent_channels as u16).to_le_bytes());
        out.extend(cfg.strides.iter().map(|&s| s as u8));
        for &c in &cfg.hidden_channels {
            out.extend((c as u16).to_le_bytes());
        }
        out.extend(cfg.negative_slope.to_le_bytes());
        out.extend(self.prior.support.min.to_le_bytes());
        out.extend(self.prior.support.max.to_le_bytes());
        out.push(self.prior.precision as u8);
        out.extend(self.lambda.to_le_bytes());
        out.extend(self.seed.to_le_bytes());
        for (_, t) in self.tensors() {
            out.extend((t.len() as u32).to_le_bytes());
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = self.body_bytes();
        let mut out = Vec::with_capacity(body.len() + 13);
        out.extend(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.extend(&body);
        out.extend(hash_id(&body).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::CorruptModel("missing LPMD magic".into()));
        }
        if bytes[4] != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                found: bytes[4],
                expected: MODEL_VERSION,
            });
        }
        if bytes.len() < 13 {
            return Err(Error::CorruptModel("truncated".into()));
        }
        let (body, trailer) = bytes[5..].split_at(bytes.len() - 13);
        let stored = u64::from_le_bytes(trailer.try_into().unwrap());
        let params = parse_body(body)?;
        if hash_id(body) != stored {
            return Err(Error::CorruptModel(format!(
                "model id {stored:016x} does not match contents"
            )));
        }
        if !params.is_finite() {
            return Err(Error::CorruptModel("non-finite parameter".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Tape handles of every parameter, in the same layout as [`ModelParams`].
#[derive(Clone, Debug)]
pub struct TapeParams {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
    pub loc: Var,
    pub log_scale: Var,
}

impl TapeParams {
    /// Vars in the canonical order of [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in self.encoder.iter().chain(&self.decoder) {
            out.push(w);
            out.push(b);
        }
        out.push(self.loc);
        out.push(self.log_scale);
        out
    }
}

fn hash_id(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptModel("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor<f32>> {
        let n = u32::from_le_bytes(self.array()?) as usize;
        let expected: usize = shape.iter().product();
        if n != expected {
            return Err(Error::CorruptModel(format!(
                "parameter blob of {n} values where {expected} expected"
            )));
        }
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptModel("size".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

fn parse_body(body: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes: body, pos: 0 };
    let layers = r.u8()? as usize;
    let kernel = r.u8()? as usize;
    let latent_channels = u16::from_le_bytes(r.array()?) as usize;
    let strides = (0..layers)
        .map(|_| r.u8().map(usize::from))
        .collect::<Result<Vec<_>>>()?;
    let hidden_channels = (0..layers.saturating_sub(1))
        .map(|_| r.array().map(|b| u16::from_le_bytes(b) as usize))
        .collect::<Result<Vec<_>>>()?;
    let negative_slope = f32::from_le_bytes(r.array()?);
    let config = ArchitectureConfig {
        hidden_channels,
        latent_channels,
        kernel,
        strides,
        negative_slope,
    };
    config
        .validate()
        .map_err(|e| Error::CorruptModel(format!("bad architecture block: {e}")))?;
    let support = SymbolSupport {
        min: i32::from_le_bytes(r.array()?),
        max: i32::from_le_bytes(r.array()?),
    };
    let precision = r.u8()? as u32;
    let lambda = f64::from_le_bytes(r.array()?);
    let seed = u64::from_le_bytes(r.array()?);

    let chans = config.encoder_channels();
    let k = kernel;
    let mut encoder = Vec::with_capacity(layers);
    for i in 0..layers {
        let weight = r.tensor(vec![chans[i + 1], chans[i], k, k])?;
        let bias = r.tensor(vec![chans[i + 1]])?;
        encoder.push(ConvLayer { weight, bias });
    }
    let rev: Vec<usize> = chans.iter().rev().copied().collect();
    let mut decoder = Vec::with_capacity(layers);
    for i in 0..layers {
        let weight = r.tensor(vec![rev[i], rev[i + 1], k, k])?;
        let bias = r.tensor(vec![rev[i + 1]])?;
        decoder.push(ConvLayer { weight, bias });
    }
    let loc = r.tensor(vec![latent_channels])?;
    let log_scale = r.tensor(vec![latent_channels])?;
    if r.pos != body.len() {
        return Err(Error::CorruptModel("trailing bytes after parameters".into()));
    }
    Ok(ModelParams {
        config,
        lambda,
        seed,
        encoder,
        decoder,
        prior: FactorizedPrior {
            loc,
            log_scale,
            support,
            precision,
        },
    })
}

/// Reflect-pad an order-4 image so both sides become multiples of `multiple`.
pub fn pad_to_multiple<T: Element>(x: &Tensor<T>, multiple: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::rejected("cannot pad an empty image"));
    }
    let (ph, pw) = (h.next_multiple_of(multiple), w.next_multiple_of(multiple));
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let reflect = |i: usize, len: usize| -> usize {
        if len == 1 {
            return 0;
        }
        let period = 2 * (len - 1);
        let m = i % period;
        if m < len {
            m
        } else {
            period - m
        }
    };
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in 0..n * c {
        for yy in 0..ph {
            let row = &src[(plane * h + reflect(yy, h)) * w..][..w];
            out.extend((0..pw).map(|xx| row[reflect(xx, w)]));
        }
    }
    Tensor::new(vec![n, c, ph, pw], out)
}

/// Top-left `height × width` crop of an order-4 tensor.
pub fn crop<T: Element>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if height > h || width > w {
        return Err(Error::rejected(format!(
            "crop {height}x{width} larger than {h}x{w}"
        )));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * height * width);
    for plane in 0..n * c {
        for yy in 0..height {
            out.extend_from_slice(&src[(plane * h + yy) * w..][..width]);
        }
    }
    Tensor::new(vec![n, c, height, width], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ArchitectureConfig {
        ArchitectureConfig {
            hidden_channels: vec![4, 6],
            latent_channels: 5,
            kernel: 3,
            strides: vec![2, 2, 2],
            negative_slope: 0.2,
        }
    }

    #[test]
    fn default_shapes() {
        let params = ModelParams::init(ArchitectureConfig::default(), 0.01, 1).unwrap();
        let x = Tensor::full(vec![1, 3, 64, 64], 0.5f32);
        let y = params.encode_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 48, 8, 8]);
        let xr = params.decode_forward(&y).unwrap();
        assert_eq!(xr.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn non_divisible_input_is_rejected() {
        let params = ModelParams::init(small_config(), 0.01, 1).unwrap();
        let x = Tensor::zeros(vec![1, 3, 12, 16]);
        let err = params.encode_forward(&x).unwrap_err();
        assert!(err.to_string().contains("multiples of 8"), "{err}");
    }

    #[test]
    fn zero_image_yields_final_bias_pattern() {
        let mut params = ModelParams::init(small_config(), 0.01, 3).unwrap();
        // Zero biases everywhere except the last encoder layer: a zero image
        // propagates as zeros until the final bias is added.
        let last = params.encoder.last_mut().unwrap();
        last.bias = Tensor::from_fn(vec![5], |i| i as f32 - 2.0);
        let y = params
            .encode_forward(&Tensor::zeros(vec![1, 3, 16, 16]))
            .unwrap();
        for (i, plane) in y.data().chunks(4).enumerate() {
            assert!(plane.iter().all(|&v| v == i as f32 - 2.0));
        }
    }

    #[test]
    fn decoder_output_is_clamped() {
        let params = ModelParams::init(small_config(), 0.01, 5).unwrap();
        let mut i = 0u32;
        let y = Tensor::from_fn(vec![1, 5, 3, 2], |_| {
            i = i.wrapping_mul(1103515245).wrapping_add(12345);
            (i % 200) as f32 - 100.0
        });
        let x = params.decode_forward(&y).unwrap();
        assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn channel_mismatch_in_decoder_rejected() {
        let params = ModelParams::init(small_config(), 0.01, 5).unwrap();
        assert!(params.decode_forward(&Tensor::zeros(vec![1, 4, 2, 2])).is_err());
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        let params = ModelParams::init(small_config(), 0.03, 11).unwrap();
        let bytes = params.to_bytes();
        let loaded = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.model_id(), params.model_id());
    }

    #[test]
    fn truncated_and_tampered_files_rejected() {
        let params = ModelParams::init(small_config(), 0.03, 11).unwrap();
        let bytes = params.to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                ModelParams::from_bytes(&bytes[..cut]),
                Err(Error::CorruptModel(_))
            ));
        }
        let mut tampered = bytes.clone();
        tampered[100] ^= 1;
        assert!(matches!(
            ModelParams::from_bytes(&tampered),
            Err(Error::CorruptModel(_))
        ));
        let mut versioned = bytes;
        versioned[4] = 9;
        assert!(matches!(
            ModelParams::from_bytes(&versioned),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn model_id_sensitive_to_tiny_bias_change() {
        let mut params = ModelParams::init(small_config(), 0.01, 0).unwrap();
        for (_, t) in params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let before = params.model_id();
        params.decoder[0].bias.data_mut()[0] = 1e-6;
        assert_ne!(params.model_id(), before);
    }

    #[test]
    fn reflect_padding_and_crop() {
        let x = Tensor::from_fn(vec![1, 1, 3, 5], |i| i as f32);
        let p = pad_to_multiple(&x, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 8]);
        // Row 3 reflects row 1; column 5 reflects column 3.
        assert_eq!(p.data()[3 * 8], x.data()[5]);
        assert_eq!(p.data()[5], x.data()[3]);
        assert_eq!(crop(&p, 3, 5).unwrap(), x);
        let tiny = Tensor::from_fn(vec![1, 1, 1, 2], |i| i as f32);
        assert_eq!(pad_to_multiple(&tiny, 8).unwrap().shape(), &[1, 1, 8, 8]);
    }
}
