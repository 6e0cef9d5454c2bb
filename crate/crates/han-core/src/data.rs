//! Glyph corpora: PNG ingestion, pairing, deterministic splits, rectangle
//! masking for restoration, batching, the corpus manifest, and a procedural
//! stroke-glyph generator so everything runs without external data.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{fnv1a64, mix_seed};
use crate::tensor::Tensor;

pub const EXTENT: usize = 64;
const AREA: usize = EXTENT * EXTENT;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: expected {EXTENT}x{EXTENT} grayscale, got {w}x{h}")]
    WrongExtent { path: PathBuf, w: u32, h: u32 },
    #[error("glyph {id}: pixel value {value} outside [0, 1]")]
    ValueRange { id: String, value: f64 },
    #[error("glyph {id}: expected [1, {EXTENT}, {EXTENT}] pixels, got {shape:?}")]
    BadShape { id: String, shape: Vec<usize> },
    #[error("no ids shared between {0} and {1}")]
    EmptyIntersection(PathBuf, PathBuf),
    #[error("corpus needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    BadRatio(f64),
    #[error("manifest line {line}: expected id<TAB>source<TAB>target<TAB>split")]
    BadManifestLine { line: usize },
}

/// One 64x64 grayscale glyph in [0, 1], keyed by character id.
#[derive(Clone)]
pub struct GlyphImage {
    pub id: String,
    pub pixels: Tensor, // shape [1, 64, 64]
}

impl fmt::Debug for GlyphImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GlyphImage({})", self.id)
    }
}

impl GlyphImage {
    pub fn new(id: impl Into<String>, pixels: Tensor) -> Result<Self, DataError> {
        let id = id.into();
        if pixels.shape() != [1, EXTENT, EXTENT] {
            return Err(DataError::BadShape { id, shape: pixels.shape().to_vec() });
        }
        if let Some(&bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::ValueRange { id, value: bad });
        }
        Ok(GlyphImage { id, pixels })
    }

    pub fn from_values(id: impl Into<String>, values: Vec<f64>) -> Result<Self, DataError> {
        let t = Tensor::constant(&[1, EXTENT, EXTENT], values).expect("fixed extent");
        GlyphImage::new(id, t)
    }

    pub fn values(&self) -> Vec<f64> {
        self.pixels.to_vec()
    }
}

/// Same character in two typefaces.
#[derive(Clone, Debug)]
pub struct GlyphPair {
    pub source: GlyphImage,
    pub target: GlyphImage,
}

impl GlyphPair {
    pub fn id(&self) -> &str {
        &self.source.id
    }
}

#[derive(Debug)]
pub struct CorpusSplit {
    pub train: Vec<GlyphPair>,
    pub test: Vec<GlyphPair>,
    pub ratio: f64,
    pub seed: u64,
}

// ---- PNG ingestion ----

pub fn load_png(path: &Path, id: &str) -> Result<GlyphImage, DataError> {
    let img = image::ImageReader::open(path)
        .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?
        .decode()
        .map_err(|e| DataError::Decode { path: path.to_path_buf(), message: e.to_string() })?;
    let gray = img.to_luma8();
    if gray.width() as usize != EXTENT || gray.height() as usize != EXTENT {
        return Err(DataError::WrongExtent {
            path: path.to_path_buf(),
            w: gray.width(),
            h: gray.height(),
        });
    }
    let values: Vec<f64> = gray.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    GlyphImage::from_values(id, values)
}

pub fn save_png(path: &Path, img: &GlyphImage) -> Result<(), DataError> {
    save_values_png(path, &img.pixels.data())
}

pub fn save_values_png(path: &Path, values: &[f64]) -> Result<(), DataError> {
    debug_assert_eq!(values.len(), AREA);
    let bytes: Vec<u8> =
        values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(EXTENT as u32, EXTENT as u32, bytes).expect("sized");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        }
    }
    buf.save(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>, DataError> {
    let mut out = Vec::new();
    let entries =
        fs::read_dir(dir).map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?;
    for entry in entries {
        let entry = entry.map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Pair up same-named PNGs from two directories. Ids present on only one side
/// are reported back as warnings and skipped.
pub fn load_corpus(
    source_dir: &Path,
    target_dir: &Path,
) -> Result<(Vec<GlyphPair>, Vec<String>), DataError> {
    let sources = png_stems(source_dir)?;
    let targets = png_stems(target_dir)?;
    let mut warnings = Vec::new();
    let mut pairs = Vec::new();
    let mut ti = targets.iter().peekable();
    let mut target_map: std::collections::BTreeMap<&str, &PathBuf> = Default::default();
    for (id, p) in &targets {
        target_map.insert(id.as_str(), p);
    }
    for (id, spath) in &sources {
        match target_map.remove(id.as_str()) {
            Some(tpath) => {
                pairs.push(GlyphPair {
                    source: load_png(spath, id)?,
                    target: load_png(tpath, id)?,
                });
            }
            None => warnings.push(format!("{id}: present only in {}", source_dir.display())),
        }
    }
    for (id, _) in target_map {
        warnings.push(format!("{id}: present only in {}", target_dir.display()));
    }
    let _ = ti.peek();
    if pairs.is_empty() {
        return Err(DataError::EmptyIntersection(
            source_dir.to_path_buf(),
            target_dir.to_path_buf(),
        ));
    }
    Ok((pairs, warnings))
}

// ---- splitting ----

/// Deterministic split: pairs are ordered by a hash of (seed, id), so the
/// outcome depends only on the id set, the ratio and the seed.
pub fn split_corpus(
    pairs: Vec<GlyphPair>,
    ratio: f64,
    seed: u64,
) -> Result<CorpusSplit, DataError> {
    if pairs.len() < 2 {
        return Err(DataError::TooFewPairs(pairs.len()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::BadRatio(ratio));
    }
    let mut keyed: Vec<(u64, GlyphPair)> = pairs
        .into_iter()
        .map(|p| (mix_seed(seed, fnv1a64(p.id().as_bytes())), p))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id().cmp(b.1.id())));
    let total = keyed.len();
    let n_train = ((ratio * total as f64).round() as usize).min(total);
    let mut train: Vec<GlyphPair> = Vec::with_capacity(n_train);
    let mut test: Vec<GlyphPair> = Vec::with_capacity(total - n_train);
    for (i, (_, p)) in keyed.into_iter().enumerate() {
        if i < n_train {
            train.push(p);
        } else {
            test.push(p);
        }
    }
    train.sort_by(|a, b| a.id().cmp(b.id()));
    test.sort_by(|a, b| a.id().cmp(b.id()));
    Ok(CorpusSplit { train, test, ratio, seed })
}

// ---- masking ----

/// Axis-aligned rectangle covering roughly `coverage` of the glyph area.
#[derive(Clone, Copy, Debug)]
pub struct MaskSpec {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub coverage: f64,
    pub seed: u64,
}

impl MaskSpec {
    /// Sample a rectangle whose area is within +-2% of `coverage * 64 * 64`.
    pub fn random(coverage: f64, seed: u64) -> MaskSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let area = coverage.clamp(0.0, 1.0) * AREA as f64;
        if area < 1.0 {
            return MaskSpec { x0: 0, y0: 0, width: 0, height: 0, coverage, seed };
        }
        let w_min = (area / EXTENT as f64).ceil() as usize;
        let w_min = w_min.max(1);
        let width = rng.gen_range(w_min..=EXTENT);
        let height = ((area / width as f64).round() as usize).clamp(1, EXTENT);
        let x0 = rng.gen_range(0..=EXTENT - width);
        let y0 = rng.gen_range(0..=EXTENT - height);
        MaskSpec { x0, y0, width, height, coverage, seed }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// Zero out the rectangle (background fill); pixels outside are untouched.
pub fn apply_mask(img: &GlyphImage, spec: &MaskSpec) -> GlyphImage {
    let mut v = img.values();
    for y in spec.y0..spec.y0 + spec.height {
        for x in spec.x0..spec.x0 + spec.width {
            v[y * EXTENT + x] = 0.0;
        }
    }
    GlyphImage::from_values(img.id.clone(), v).expect("masking preserves range")
}

// ---- synthetic corpus ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleKind {
    Thicken,
    Thin,
    Shear,
    Twist,
    ShearThicken,
}

impl StyleKind {
    pub fn parse(s: &str) -> Option<StyleKind> {
        match s {
            "thicken" => Some(StyleKind::Thicken),
            "thin" => Some(StyleKind::Thin),
            "shear" => Some(StyleKind::Shear),
            "twist" => Some(StyleKind::Twist),
            "shear_thicken" => Some(StyleKind::ShearThicken),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StyleKind::Thicken => "thicken",
            StyleKind::Thin => "thin",
            StyleKind::Shear => "shear",
            StyleKind::Twist => "twist",
            StyleKind::ShearThicken => "shear_thicken",
        }
    }
}

/// Deterministic glyph-to-glyph style transform; `strength` 0 is the identity.
#[derive(Clone, Copy, Debug)]
pub struct StyleTransform {
    pub kind: StyleKind,
    pub strength: f64,
}

impl StyleTransform {
    pub fn named(kind: StyleKind) -> StyleTransform {
        let strength = match kind {
            StyleKind::Thicken | StyleKind::Thin => 1.0,
            StyleKind::Shear => 0.2,
            StyleKind::Twist => 0.5,
            StyleKind::ShearThicken => 1.0,
        };
        StyleTransform { kind, strength }
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        if self.strength == 0.0 {
            return values.to_vec();
        }
        match self.kind {
            StyleKind::Thicken => dilate(values, self.strength.round() as usize),
            StyleKind::Thin => erode(values, self.strength.round() as usize),
            StyleKind::Shear => shear(values, self.strength),
            StyleKind::Twist => twist(values, self.strength),
            StyleKind::ShearThicken => dilate(&shear(values, 0.15 * self.strength), 1),
        }
    }
}

fn dilate(values: &[f64], iterations: usize) -> Vec<f64> {
    let mut cur = values.to_vec();
    for _ in 0..iterations {
        let mut next = cur.clone();
        for y in 0..EXTENT {
            for x in 0..EXTENT {
                let mut best = cur[y * EXTENT + x];
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                        if (0..EXTENT as i32).contains(&ny) && (0..EXTENT as i32).contains(&nx) {
                            best = best.max(cur[ny as usize * EXTENT + nx as usize]);
                        }
                    }
                }
                next[y * EXTENT + x] = best;
            }
        }
        cur = next;
    }
    cur
}

fn erode(values: &[f64], iterations: usize) -> Vec<f64> {
    let mut cur = values.to_vec();
    for _ in 0..iterations {
        let mut next = cur.clone();
        for y in 0..EXTENT {
            for x in 0..EXTENT {
                let mut worst = cur[y * EXTENT + x];
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                        if (0..EXTENT as i32).contains(&ny) && (0..EXTENT as i32).contains(&nx) {
                            worst = worst.min(cur[ny as usize * EXTENT + nx as usize]);
                        } else {
                            worst = 0.0;
                        }
                    }
                }
                next[y * EXTENT + x] = worst;
            }
        }
        cur = next;
    }
    cur
}

/// Horizontal shear with nearest sampling: out(x, y) = in(x + s * (y - c), y).
fn shear(values: &[f64], amount: f64) -> Vec<f64> {
    let c = (EXTENT as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; AREA];
    for y in 0..EXTENT {
        let shift = amount * (y as f64 - c);
        for x in 0..EXTENT {
            let sx = (x as f64 + shift).round() as isize;
            if (0..EXTENT as isize).contains(&sx) {
                out[y * EXTENT + x] = values[y * EXTENT + sx as usize];
            }
        }
    }
    out
}

/// Swirl: rotate each pixel around the center by an angle that fades with radius.
fn twist(values: &[f64], max_angle: f64) -> Vec<f64> {
    let c = (EXTENT as f64 - 1.0) / 2.0;
    let rmax = c * std::f64::consts::SQRT_2;
    let mut out = vec![0.0; AREA];
    for y in 0..EXTENT {
        for x in 0..EXTENT {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let r = (dx * dx + dy * dy).sqrt();
            let angle = max_angle * (1.0 - r / rmax);
            let (sin, cos) = angle.sin_cos();
            let sx = (c + cos * dx - sin * dy).round() as isize;
            let sy = (c + sin * dx + cos * dy).round() as isize;
            if (0..EXTENT as isize).contains(&sx) && (0..EXTENT as isize).contains(&sy) {
                out[y * EXTENT + x] = values[sy as usize * EXTENT + sx as usize];
            }
        }
    }
    out
}

fn dist_to_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { ((px - ax) * vx + (py - ay) * vy) / len2 };
    let t = t.clamp(0.0, 1.0);
    let (cx, cy) = (ax + t * vx, ay + t * vy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Rasterize one random stroke composition: a few polylines and arcs with
/// soft-edged width, ink = 1 on background 0.
fn random_glyph(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut segments: Vec<(f64, f64, f64, f64, f64)> = Vec::new(); // ax, ay, bx, by, half width
    let n_strokes = rng.gen_range(2..=5usize);
    let lo = 12.0;
    let hi = 52.0;
    for _ in 0..n_strokes {
        let half_w = rng.gen_range(0.8..1.6);
        if rng.gen_bool(0.3) {
            // quadratic arc sampled as a polyline
            let (ax, ay) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
            let (cx, cy) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
            let (bx, by) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
            let steps = 8;
            let mut prev = (ax, ay);
            for i in 1..=steps {
                let t = i as f64 / steps as f64;
                let mx = (1.0 - t) * (1.0 - t) * ax + 2.0 * (1.0 - t) * t * cx + t * t * bx;
                let my = (1.0 - t) * (1.0 - t) * ay + 2.0 * (1.0 - t) * t * cy + t * t * by;
                segments.push((prev.0, prev.1, mx, my, half_w));
                prev = (mx, my);
            }
        } else {
            let points = rng.gen_range(2..=4usize);
            let mut prev = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
            for _ in 1..points {
                let next = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
                segments.push((prev.0, prev.1, next.0, next.1, half_w));
                prev = next;
            }
        }
    }
    let mut out = vec![0.0; AREA];
    for y in 0..EXTENT {
        for x in 0..EXTENT {
            let mut ink: f64 = 0.0;
            for &(ax, ay, bx, by, hw) in &segments {
                let d = dist_to_segment(x as f64, y as f64, ax, ay, bx, by);
                ink = ink.max((hw + 0.5 - d).clamp(0.0, 1.0));
            }
            out[y * EXTENT + x] = ink;
        }
    }
    out
}

/// Procedural corpus: source glyphs are random stroke compositions, targets
/// apply the style transform. Pair i depends only on (seed, i), so prefixes
/// are stable as n grows.
pub fn synth_corpus(n: usize, style: StyleTransform, seed: u64) -> Vec<GlyphPair> {
    assert!(n >= 1, "need at least one pair");
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let id = format!("g{i:05}");
            let src = random_glyph(&mut rng);
            let dst = style.apply(&src);
            GlyphPair {
                source: GlyphImage::from_values(id.clone(), src).expect("raster stays in range"),
                target: GlyphImage::from_values(id, dst).expect("transform stays in range"),
            }
        })
        .collect()
}

// ---- batching ----

/// Per-epoch deterministic shuffle keyed by (seed, epoch).
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch.wrapping_add(0x5eed)));
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Stack selected pairs into [n, 1, 64, 64] source and target tensors.
pub fn batch_tensors(pairs: &[GlyphPair], indices: &[usize]) -> (Tensor, Tensor) {
    let n = indices.len();
    let mut src = Vec::with_capacity(n * AREA);
    let mut dst = Vec::with_capacity(n * AREA);
    for &i in indices {
        src.extend_from_slice(&pairs[i].source.pixels.data());
        dst.extend_from_slice(&pairs[i].target.pixels.data());
    }
    (
        Tensor::constant(&[n, 1, EXTENT, EXTENT], src).expect("sized"),
        Tensor::constant(&[n, 1, EXTENT, EXTENT], dst).expect("sized"),
    )
}

/// Index batches for one epoch; the last partial batch is kept.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let order = epoch_order(len, seed, epoch);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

// ---- manifest ----

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    pub split: String, // "train" | "test"
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.id,
            e.source_path.display(),
            e.target_path.display(),
            e.split
        ));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        }
    }
    fs::write(path, text).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text =
        fs::read_to_string(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 || (fields[3] != "train" && fields[3] != "test") {
            return Err(DataError::BadManifestLine { line: i + 1 });
        }
        out.push(ManifestEntry {
            id: fields[0].to_string(),
            source_path: PathBuf::from(fields[1]),
            target_path: PathBuf::from(fields[2]),
            split: fields[3].to_string(),
        });
    }
    Ok(out)
}

pub fn manifest_hash(path: &Path) -> Result<u64, DataError> {
    let bytes =
        fs::read(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    Ok(fnv1a64(&bytes))
}

/// Load the pairs listed in a manifest, keeping the train/test assignment.
pub fn load_manifest_corpus(path: &Path) -> Result<(Vec<GlyphPair>, Vec<GlyphPair>), DataError> {
    let entries = read_manifest(path)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in entries {
        let pair = GlyphPair {
            source: load_png(&e.source_path, &e.id)?,
            target: load_png(&e.target_path, &e.id)?,
        };
        if e.split == "train" {
            train.push(pair);
        } else {
            test.push(pair);
        }
    }
    Ok((train, test))
}
