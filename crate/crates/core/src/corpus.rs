//! Synthetic image generators and train/test manifests.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image_io::{load_image, tensor_from_rgb8};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContentKind {
    /// Linear and radial colour ramps.
    Gradients,
    /// Multi-octave value noise.
    Noise,
    /// Flat-coloured geometric shapes on smooth backgrounds.
    Shapes,
    /// Shapes over noise.
    Mixed,
}

impl ContentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ContentKind::Gradients => "gradients",
            ContentKind::Noise => "noise",
            ContentKind::Shapes => "shapes",
            ContentKind::Mixed => "mixed",
        }
    }
}

impl fmt::Display for ContentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(ContentKind::Gradients),
            "noise" => Ok(ContentKind::Noise),
            "shapes" => Ok(ContentKind::Shapes),
            "mixed" => Ok(ContentKind::Mixed),
            other => Err(Error::Config(format!(
                "unknown content kind {other:?} (expected gradients, noise, shapes or mixed)"
            ))),
        }
    }
}

/// Planar float RGB canvas used by the generators.
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas {
            w,
            h,
            px: vec![[0.0; 3]; w * h],
        }
    }

    fn fill(&mut self, f: impl Fn(f32, f32) -> [f32; 3]) {
        for y in 0..self.h {
            for x in 0..self.w {
                self.px[y * self.w + x] = f(x as f32, y as f32);
            }
        }
    }

    fn paint(&mut self, inside: impl Fn(f32, f32) -> bool, color: [f32; 3]) {
        for y in 0..self.h {
            for x in 0..self.w {
                if inside(x as f32 + 0.5, y as f32 + 0.5) {
                    self.px[y * self.w + x] = color;
                }
            }
        }
    }

    fn into_rgb8(self) -> Vec<u8> {
        self.px
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn gradient(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let (a, b) = (random_color(rng), random_color(rng));
    let (w, h) = (canvas.w as f32, canvas.h as f32);
    if rng.random_bool(0.5) {
        let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let span = dx.abs() * w + dy.abs() * h;
        let origin = (if dx < 0.0 { w } else { 0.0 }, if dy < 0.0 { h } else { 0.0 });
        canvas.fill(|x, y| lerp(a, b, ((x - origin.0) * dx + (y - origin.1) * dy) / span));
    } else {
        let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let r = rng.random_range(0.5..1.5) * w.max(h);
        canvas.fill(|x, y| lerp(a, b, (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / r).min(1.0)));
    }
}

fn value_noise(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let (w, h) = (canvas.w, canvas.h);
    let mut acc = vec![[0.0f32; 3]; w * h];
    let base_cell = rng.random_range(6..20) as f32;
    let mut amp = 1.0f32;
    let mut total = 0.0;
    let palette = [random_color(rng), random_color(rng)];
    for octave in 0..3 {
        let cell = (base_cell / (1 << octave) as f32).max(1.5);
        let gw = (w as f32 / cell).ceil() as usize + 2;
        let gh = (h as f32 / cell).ceil() as usize + 2;
        let grid: Vec<[f32; 3]> = (0..gw * gh)
            .map(|_| {
                let t: f32 = rng.random();
                let tint: [f32; 3] = [rng.random(), rng.random(), rng.random()];
                let c = lerp(palette[0], palette[1], t);
                [0, 1, 2].map(|i| 0.8 * c[i] + 0.2 * tint[i])
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f32 / cell, y as f32 / cell);
                let (ix, iy) = (fx as usize, fy as usize);
                let (tx, ty) = (fx - ix as f32, fy - iy as f32);
                let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
                let g = |gx: usize, gy: usize| grid[gy * gw + gx];
                let top = lerp(g(ix, iy), g(ix + 1, iy), sx);
                let bottom = lerp(g(ix, iy + 1), g(ix + 1, iy + 1), sx);
                let v = lerp(top, bottom, sy);
                for c in 0..3 {
                    acc[y * w + x][c] += amp * v[c];
                }
            }
        }
        total += amp;
        amp *= 0.5;
    }
    let grain = rng.random_range(0.02..0.08f32);
    for (dst, src) in canvas.px.iter_mut().zip(&acc) {
        for c in 0..3 {
            dst[c] = src[c] / total + grain * (rng.random::<f32>() - 0.5);
        }
    }
}

fn shapes(canvas: &mut Canvas, rng: &mut ChaCha8Rng, count: usize) {
    let (w, h) = (canvas.w as f32, canvas.h as f32);
    let scale = w.min(h);
    for _ in 0..count {
        let color = random_color(rng);
        let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        match rng.random_range(0..3) {
            0 => {
                let r = rng.random_range(0.06..0.3) * scale;
                canvas.paint(|x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r, color);
            }
            1 => {
                let hw = rng.random_range(0.05..0.35) * scale;
                let hh = rng.random_range(0.05..0.35) * scale;
                canvas.paint(|x, y| (x - cx).abs() <= hw && (y - cy).abs() <= hh, color);
            }
            _ => {
                let r = rng.random_range(0.1..0.35) * scale;
                let pts: Vec<(f32, f32)> = (0..3)
                    .map(|_| {
                        let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect();
                let edge = |(ax, ay): (f32, f32), (bx, by): (f32, f32), x: f32, y: f32| {
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                };
                canvas.paint(
                    |x, y| {
                        let e = [
                            edge(pts[0], pts[1], x, y),
                            edge(pts[1], pts[2], x, y),
                            edge(pts[2], pts[0], x, y),
                        ];
                        e.iter().all(|&v| v >= 0.0) || e.iter().all(|&v| v <= 0.0)
                    },
                    color,
                );
            }
        }
    }
}

/// Interleaved 8-bit RGB image of one kind, a pure function of `(seed, index)`.
pub fn generate_rgb8(kind: ContentKind, width: usize, height: usize, seed: u64, index: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut canvas = Canvas::new(width, height);
    match kind {
        ContentKind::Gradients => gradient(&mut canvas, &mut rng),
        ContentKind::Noise => value_noise(&mut canvas, &mut rng),
        ContentKind::Shapes => {
            if rng.random_bool(0.5) {
                gradient(&mut canvas, &mut rng);
            } else {
                let c = random_color(&mut rng);
                canvas.fill(|_, _| c);
            }
            let n = rng.random_range(3..9);
            shapes(&mut canvas, &mut rng, n);
        }
        ContentKind::Mixed => {
            value_noise(&mut canvas, &mut rng);
            let n = rng.random_range(2..6);
            shapes(&mut canvas, &mut rng, n);
        }
    }
    canvas.into_rgb8()
}

/// Generated image as a 1×3×H×W tensor in `[0, 1]`.
pub fn generate(kind: ContentKind, width: usize, height: usize, seed: u64, index: u64) -> Tensor<f32> {
    let rgb = generate_rgb8(kind, width, height, seed, index);
    tensor_from_rgb8(width, height, &rgb).expect("generator produces a full buffer")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub role: Role,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
}

impl ManifestEntry {
    /// File stem, used as the image id in reports.
    pub fn id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Ordered list of images with train/test roles.
///
/// Text format: one `<role> <path>` pair per line; `#` starts a comment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = CorpusManifest {
            root: root.into(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(Error::Corpus(format!(
                    "{} listed more than once (train and test must be disjoint)",
                    e.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (role, path) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Corpus(format!("line {}: expected `<role> <path>`", n + 1)))?;
            let role = match role {
                "train" => Role::Train,
                "test" => Role::Test,
                other => {
                    return Err(Error::Corpus(format!("line {}: unknown role {other:?}", n + 1)))
                }
            };
            entries.push(ManifestEntry {
                role,
                path: PathBuf::from(path.trim()),
            });
        }
        Self::new(root, entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# role path\n");
        for e in &self.entries {
            out.push_str(&format!("{} {}\n", e.role.as_str(), e.path.display()));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Manifest over every PNG/PPM file in `dir` (sorted by name), with every
    /// `test_every`-th image assigned to the test role.
    pub fn from_folder(dir: impl AsRef<Path>, test_every: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Corpus(format!("no PNG or PPM images in {}", dir.display())));
        }
        let entries = files
            .into_iter()
            .enumerate()
            .map(|(i, p)| ManifestEntry {
                role: if test_every > 0 && i % test_every == test_every - 1 {
                    Role::Test
                } else {
                    Role::Train
                },
                path: p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or(p),
            })
            .collect();
        Self::new(dir, entries)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn entries(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    /// Load every image of a role in manifest order, paired with its id.
    pub fn load_images(&self, role: Role) -> Result<Vec<(String, Tensor<f32>)>> {
        self.entries(role)
            .map(|e| Ok((e.id(), load_image(self.resolve(e))?)))
            .collect()
    }

    /// SHA-256 over roles, paths and file contents, as hex.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.role.as_str().as_bytes());
            h.update(e.path.to_string_lossy().as_bytes());
            h.update(fs::read(self.resolve(e))?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// What [`gen_corpus`] should write.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub kind: ContentKind,
    pub train: usize,
    pub test: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

/// Write generated PNGs and a manifest into `dir`.
pub fn gen_corpus(dir: impl AsRef<Path>, spec: &CorpusSpec) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::Config("corpus images need a positive size".into()));
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let roles = std::iter::repeat_n(Role::Train, spec.train).chain(std::iter::repeat_n(Role::Test, spec.test));
    for (i, role) in roles.enumerate() {
        let name = format!("{}_{}_{i:04}.png", spec.kind, role.as_str());
        let rgb = generate_rgb8(spec.kind, spec.width, spec.height, spec.seed, i as u64);
        let img = image::RgbImage::from_raw(spec.width as u32, spec.height as u32, rgb)
            .ok_or_else(|| Error::rejected("generated buffer size mismatch"))?;
        let path = dir.join(&name);
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path, source })?;
        entries.push(ManifestEntry {
            role,
            path: PathBuf::from(name),
        });
    }
    let manifest = CorpusManifest::new(dir, entries)?;
    manifest.save(dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
