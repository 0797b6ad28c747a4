//! Expression corpus: labels, identities, a seeded parametric face renderer,
//! cross-validation folds and on-disk persistence.
//!
//! Each identity is a vector of face-geometry parameters plus a smooth
//! skin-texture field; each expression is a fixed landmark deformation
//! (brow raise and tilt, eye openness, mouth curvature, opening and width)
//! applied identically on top of every identity. Images are quantized to
//! 8-bit levels at generation time so that PNG persistence is lossless.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::FaceImage;

/// The ten canonical expressions, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionLabel {
    Anger,
    Annoyance,
    Delight,
    FakeSmile,
    Fear,
    Neutral,
    Sadness,
    Smile,
    Surprise,
    Wonder,
}

impl ExpressionLabel {
    pub const ALL: [ExpressionLabel; 10] = [
        ExpressionLabel::Anger,
        ExpressionLabel::Annoyance,
        ExpressionLabel::Delight,
        ExpressionLabel::FakeSmile,
        ExpressionLabel::Fear,
        ExpressionLabel::Neutral,
        ExpressionLabel::Sadness,
        ExpressionLabel::Smile,
        ExpressionLabel::Surprise,
        ExpressionLabel::Wonder,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpressionLabel::Anger => "anger",
            ExpressionLabel::Annoyance => "annoyance",
            ExpressionLabel::Delight => "delight",
            ExpressionLabel::FakeSmile => "fake_smile",
            ExpressionLabel::Fear => "fear",
            ExpressionLabel::Neutral => "neutral",
            ExpressionLabel::Sadness => "sadness",
            ExpressionLabel::Smile => "smile",
            ExpressionLabel::Surprise => "surprise",
            ExpressionLabel::Wonder => "wonder",
        }
    }

    /// The three perceptually near-identical pairs.
    pub const NEAR_DUPLICATES: [(ExpressionLabel, ExpressionLabel); 3] = [
        (ExpressionLabel::Smile, ExpressionLabel::FakeSmile),
        (ExpressionLabel::Neutral, ExpressionLabel::Sadness),
        (ExpressionLabel::Surprise, ExpressionLabel::Wonder),
    ];

    pub fn is_near_duplicate_pair(a: Self, b: Self) -> bool {
        Self::NEAR_DUPLICATES
            .iter()
            .any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
    }
}

impl fmt::Display for ExpressionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExpressionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityId(pub u32);

impl IdentityId {
    pub const OBSERVER: IdentityId = IdentityId(0);
}

impl fmt::Display for IdentityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type ExpressionSet = BTreeMap<ExpressionLabel, FaceImage>;

/// Observer training images plus the validation/test subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    dims: (usize, usize),
    seed: u64,
    training: ExpressionSet,
    subjects: BTreeMap<IdentityId, ExpressionSet>,
}

fn check_full_set(set: &ExpressionSet, dims: (usize, usize), who: &str) -> Result<()> {
    for label in ExpressionLabel::ALL {
        let img = set.get(&label).ok_or_else(|| Error::Corpus {
            path: PathBuf::from(who),
            reason: format!("missing expression `{label}`"),
        })?;
        img.check_dims(dims)?;
    }
    if set.len() != ExpressionLabel::ALL.len() {
        return Err(Error::Corpus {
            path: PathBuf::from(who),
            reason: "unexpected extra expressions".into(),
        });
    }
    Ok(())
}

impl Corpus {
    pub fn new(
        dims: (usize, usize),
        seed: u64,
        training: ExpressionSet,
        subjects: BTreeMap<IdentityId, ExpressionSet>,
    ) -> Result<Self> {
        check_full_set(&training, dims, "observer")?;
        for (id, set) in &subjects {
            if *id == IdentityId::OBSERVER {
                return Err(Error::Corpus {
                    path: PathBuf::from("subjects/0"),
                    reason: "identity 0 is reserved for the observer".into(),
                });
            }
            check_full_set(set, dims, &format!("subjects/{id}"))?;
        }
        Ok(Self {
            dims,
            seed,
            training,
            subjects,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn training(&self) -> &ExpressionSet {
        &self.training
    }

    pub fn subjects(&self) -> &BTreeMap<IdentityId, ExpressionSet> {
        &self.subjects
    }

    pub fn subject_ids(&self) -> Vec<IdentityId> {
        self.subjects.keys().copied().collect()
    }

    pub fn subject(&self, id: IdentityId) -> Result<&ExpressionSet> {
        self.subjects.get(&id).ok_or(Error::UnknownIdentity(id.0))
    }

    pub fn image(&self, id: IdentityId, label: ExpressionLabel) -> Result<&FaceImage> {
        if id == IdentityId::OBSERVER {
            return Ok(&self.training[&label]);
        }
        Ok(&self.subject(id)?[&label])
    }

    /// Same corpus with the observer replaced by the pixel-mean of `ids`.
    pub fn with_average_observer(&self, ids: &[IdentityId]) -> Result<Corpus> {
        if ids.is_empty() {
            return Err(Error::param("ids", "need at least one identity to average"));
        }
        let mut training = BTreeMap::new();
        for label in ExpressionLabel::ALL {
            let mut acc = vec![0.0; self.dims.0 * self.dims.1];
            for id in ids {
                for (a, v) in acc.iter_mut().zip(self.subject(*id)?[&label].pixels()) {
                    *a += v;
                }
            }
            let n = ids.len() as f64;
            let pixels = acc.into_iter().map(|v| v / n).collect();
            training.insert(label, FaceImage::from_clamped(self.dims.0, self.dims.1, pixels)?);
        }
        Ok(Corpus {
            training,
            ..self.clone()
        })
    }
}

/// The observer's training image for `label`.
pub fn ground_truth(corpus: &Corpus, label: ExpressionLabel) -> &FaceImage {
    &corpus.training[&label]
}

/// One cross-validation split of the non-observer identities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub validation_ids: Vec<IdentityId>,
    pub test_ids: Vec<IdentityId>,
}

pub const FOLD_COUNT: usize = 4;

/// Seeded 4-fold split; each subject lands in exactly one test set.
pub fn make_folds(corpus: &Corpus, seed: u64) -> Result<Vec<FoldSplit>> {
    let mut ids = corpus.subject_ids();
    if ids.len() < FOLD_COUNT {
        return Err(Error::param(
            "subjects",
            format!("need at least {FOLD_COUNT} subjects for folds, got {}", ids.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let (base, extra) = (ids.len() / FOLD_COUNT, ids.len() % FOLD_COUNT);
    let mut folds = Vec::with_capacity(FOLD_COUNT);
    let mut start = 0;
    for k in 0..FOLD_COUNT {
        let size = base + usize::from(k < extra);
        let mut test_ids = ids[start..start + size].to_vec();
        let mut validation_ids: Vec<IdentityId> = ids[..start]
            .iter()
            .chain(&ids[start + size..])
            .copied()
            .collect();
        test_ids.sort();
        validation_ids.sort();
        folds.push(FoldSplit {
            fold_index: k,
            validation_ids,
            test_ids,
        });
        start += size;
    }
    Ok(folds)
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Geometry of one identity on the 140x154 reference canvas.
#[derive(Clone, Debug)]
struct IdentityParams {
    center_x: f64,
    center_y: f64,
    face_half_width: f64,
    face_half_height: f64,
    eye_spacing: f64,
    eye_y: f64,
    brow_gap: f64,
    nose_length: f64,
    mouth_half_width: f64,
    mouth_y: f64,
    skin_tone: f64,
    ink: f64,
    texture: Vec<Blob>,
}

#[derive(Clone, Debug)]
struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amplitude: f64,
}

/// Landmark deformation shared by every identity.
#[derive(Clone, Copy, Debug)]
struct Deformation {
    brow_raise: f64,
    brow_tilt: f64,
    eye_open: f64,
    mouth_curve: f64,
    mouth_open: f64,
    mouth_width: f64,
}

const fn deform(
    brow_raise: f64,
    brow_tilt: f64,
    eye_open: f64,
    mouth_curve: f64,
    mouth_open: f64,
    mouth_width: f64,
) -> Deformation {
    Deformation {
        brow_raise,
        brow_tilt,
        eye_open,
        mouth_curve,
        mouth_open,
        mouth_width,
    }
}

// Near-duplicate pairs differ in a single component: smile/fake_smile in eye
// openness, neutral/sadness in brows plus a slight mouth droop,
// surprise/wonder in mouth opening.
fn deformation(label: ExpressionLabel) -> Deformation {
    use ExpressionLabel::*;
    match label {
        Anger => deform(-5.0, -0.45, 0.7, -3.5, 0.0, 1.0),
        Annoyance => deform(-1.5, -0.1, 0.9, -1.0, 0.0, 0.7),
        Delight => deform(3.0, 0.0, 0.55, 6.0, 7.0, 1.3),
        FakeSmile => deform(0.0, 0.0, 1.0, 4.0, 1.0, 1.15),
        Fear => deform(4.0, 0.45, 1.45, -2.0, 5.0, 1.15),
        Neutral => deform(0.0, 0.0, 1.0, 0.0, 0.0, 1.0),
        Sadness => deform(0.8, 0.2, 1.0, -0.5, 0.0, 1.0),
        Smile => deform(0.0, 0.0, 0.6, 4.0, 1.0, 1.15),
        Surprise => deform(5.0, 0.0, 1.4, 0.0, 8.0, 0.8),
        Wonder => deform(5.0, 0.0, 1.4, 0.0, 6.0, 0.8),
    }
}

const MIN_WIDTH: usize = 32;
const MIN_HEIGHT: usize = 36;
const BACKGROUND: f64 = 0.12;

fn sample_identity(rng: &mut ChaCha8Rng) -> IdentityParams {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let center_x = 70.0 + u(-3.0, 3.0);
    let center_y = 80.0 + u(-4.0, 4.0);
    let face_half_width = u(47.5, 50.5);
    let face_half_height = u(62.8, 65.2);
    let eye_spacing = u(21.1, 22.9);
    let eye_y = u(65.1, 66.9);
    let brow_gap = u(14.4, 15.6);
    let nose_length = u(22.8, 25.2);
    let mouth_half_width = u(16.1, 17.9);
    let mouth_y = u(110.1, 111.9);
    let skin_tone = u(0.45, 0.75);
    let ink = u(0.08, 0.25);
    let texture = (0..12)
        .map(|_| Blob {
            x: center_x + u(-40.0, 40.0),
            y: center_y + u(-55.0, 55.0),
            sigma: u(3.0, 8.0),
            amplitude: u(-0.21, 0.21),
        })
        .collect();
    IdentityParams {
        center_x,
        center_y,
        face_half_width,
        face_half_height,
        eye_spacing,
        eye_y,
        brow_gap,
        nose_length,
        mouth_half_width,
        mouth_y,
        skin_tone,
        ink,
        texture,
    }
}

/// Coverage of a shape with signed distance `d` (negative inside), one-pixel ramp.
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

fn blend(base: f64, color: f64, alpha: f64) -> f64 {
    base + (color - base) * alpha
}

fn ellipse_distance(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    ((dx * dx + dy * dy).sqrt() - 1.0) * rx.min(ry)
}

fn segment_distance(x: f64, y: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let t = (((x - a.0) * vx + (y - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    let (px, py) = (a.0 + t * vx, a.1 + t * vy);
    ((x - px).powi(2) + (y - py).powi(2)).sqrt()
}

/// Intensity at reference-canvas point (x, y).
fn shade(id: &IdentityParams, ex: &Deformation, x: f64, y: f64) -> f64 {
    let face_d = ellipse_distance(
        x,
        y,
        id.center_x,
        id.center_y,
        id.face_half_width,
        id.face_half_height,
    );
    let face_alpha = coverage(face_d);
    if face_alpha == 0.0 {
        return BACKGROUND;
    }
    let (nx, ny) = (
        (x - id.center_x) / id.face_half_width,
        (y - id.center_y) / id.face_half_height,
    );
    let mut v = id.skin_tone - 0.06 * nx - 0.06 * ny * ny;
    for b in &id.texture {
        let r2 = ((x - b.x).powi(2) + (y - b.y).powi(2)) / (2.0 * b.sigma * b.sigma);
        v += b.amplitude * (-r2).exp();
    }
    let skin = v;

    // Brows: thick segments, inner end raised by positive tilt.
    for side in [-1.0, 1.0] {
        let eye_x = id.center_x + side * id.eye_spacing;
        let base_y = id.eye_y - id.brow_gap - ex.brow_raise;
        let inner = (eye_x - side * 8.0, base_y - ex.brow_tilt * 8.0);
        let outer = (eye_x + side * 9.0, base_y + ex.brow_tilt * 4.0);
        let d = segment_distance(x, y, inner, outer) - 1.8;
        v = blend(v, id.ink, coverage(d));
    }

    // Eyes: sclera ellipse with an iris clipped to it.
    for side in [-1.0, 1.0] {
        let eye_x = id.center_x + side * id.eye_spacing;
        let ry = (4.0 * ex.eye_open).max(0.6);
        let d = ellipse_distance(x, y, eye_x, id.eye_y, 8.0, ry);
        let eye_alpha = coverage(d);
        if eye_alpha > 0.0 {
            let iris = coverage(ellipse_distance(x, y, eye_x, id.eye_y, 3.2, 3.2));
            let inside = blend(0.88, 0.1, iris);
            v = blend(v, inside, eye_alpha);
        }
        let lid = coverage((d.abs() - 0.6).max(0.0) - 0.2);
        v = blend(v, id.ink + 0.1, 0.7 * lid);
    }

    // Nose: ridge highlight, nostrils and a soft shadow below.
    let tip_y = id.eye_y + id.nose_length;
    let ridge = segment_distance(x, y, (id.center_x, id.eye_y + 4.0), (id.center_x + 1.5, tip_y - 3.0));
    v += 0.05 * (-ridge * ridge / 4.0).exp();
    for side in [-1.0, 1.0] {
        let d = ellipse_distance(x, y, id.center_x + side * 5.0, tip_y, 3.0, 2.0);
        v = blend(v, skin - 0.3, coverage(d));
    }
    let shadow = ellipse_distance(x, y, id.center_x, tip_y + 4.0, 9.0, 2.5);
    v -= 0.05 * coverage(shadow);

    // Mouth: curved lip band around an opening whose height tapers to the corners.
    let half_w = id.mouth_half_width * ex.mouth_width;
    let t = (x - id.center_x) / half_w;
    if t.abs() <= 1.2 {
        let tc = t.clamp(-1.0, 1.0);
        let taper = 1.0 - tc * tc;
        let center_line = id.mouth_y - ex.mouth_curve * tc * tc + ex.mouth_curve / 3.0;
        let open = 0.5 * ex.mouth_open * taper;
        let lip = 1.2 + 1.3 * taper;
        let dy = (y - center_line).abs();
        let end = ((x - id.center_x).abs() - half_w) * 1.0;
        let lips_d = (dy - open - lip).max(end);
        let cavity_d = (dy - open).max(end);
        v = blend(v, skin - 0.25, coverage(lips_d));
        if open > 0.0 {
            v = blend(v, 0.06, coverage(cavity_d));
        }
    }

    blend(BACKGROUND, v, face_alpha)
}

fn render(id: &IdentityParams, label: ExpressionLabel, dims: (usize, usize)) -> Result<FaceImage> {
    let ex = deformation(label);
    let (sx, sy) = (140.0 / dims.0 as f64, 154.0 / dims.1 as f64);
    FaceImage::from_fn(dims.0, dims.1, |row, col| {
        let v = shade(id, &ex, (col as f64 + 0.5) * sx, (row as f64 + 0.5) * sy);
        (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
    })
}

fn identity_rng(seed: u64, id: IdentityId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(id.0));
    rng
}

/// Observer (identity 0) plus `num_identities - 1` subjects, deterministic in `seed`.
pub fn generate_corpus(num_identities: usize, dims: (usize, usize), seed: u64) -> Result<Corpus> {
    if num_identities < 2 {
        return Err(Error::param(
            "identities",
            format!("need >= 2 identities (observer plus at least one subject), got {num_identities}"),
        ));
    }
    if dims.0 < MIN_WIDTH || dims.1 < MIN_HEIGHT {
        return Err(Error::param(
            "dims",
            format!(
                "{}x{} is too small to render facial landmarks (minimum {MIN_WIDTH}x{MIN_HEIGHT})",
                dims.0, dims.1
            ),
        ));
    }
    let render_set = |id: IdentityId| -> Result<ExpressionSet> {
        let params = sample_identity(&mut identity_rng(seed, id));
        ExpressionLabel::ALL
            .iter()
            .map(|&l| Ok((l, render(&params, l, dims)?)))
            .collect()
    };
    let training = render_set(IdentityId::OBSERVER)?;
    let subjects = (1..num_identities as u32)
        .map(|i| Ok((IdentityId(i), render_set(IdentityId(i))?)))
        .collect::<Result<_>>()?;
    Corpus::new(dims, seed, training, subjects)
}

// ---------------------------------------------------------------------------
// Persistence

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Raw 8-bit value mapped to intensity 1.0.
    pub white_level: u8,
    pub labels: Vec<ExpressionLabel>,
    pub observer: IdentityId,
    pub identities: Vec<IdentityId>,
}

/// Side information collected while loading a corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub files_read: usize,
    /// Pixels whose normalized value fell outside [0, 1] and were clamped.
    pub clamped_pixels: usize,
}

fn write_png(path: &Path, img: &FaceImage) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = img
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let corpus_err = |e: png::EncodingError| Error::Corpus {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(corpus_err)?;
    writer.write_image_data(&data).map_err(corpus_err)?;
    writer.finish().map_err(corpus_err)
}

/// Reads an 8-bit grayscale PNG as raw levels.
pub fn read_png_levels(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let err = |reason: String| Error::Corpus {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(err(format!(
            "expected 8-bit grayscale, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut levels = Vec::with_capacity(w * h);
    for row in 0..h {
        levels.extend_from_slice(&buf[row * info.line_size..row * info.line_size + w]);
    }
    Ok((w, h, levels))
}

/// Loads an image normalized by 255.
pub fn load_image(path: &Path) -> Result<FaceImage> {
    let (w, h, levels) = read_png_levels(path)?;
    FaceImage::new(w, h, levels.into_iter().map(|v| f64::from(v) / 255.0).collect())
}

pub fn save_image(path: &Path, img: &FaceImage) -> Result<()> {
    write_png(path, img)
}

fn label_file(dir: &Path, label: ExpressionLabel) -> PathBuf {
    dir.join(format!("{}.png", label.name()))
}

pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    let observer_dir = root.join("observer");
    fs::create_dir_all(&observer_dir).map_err(|e| Error::io(&observer_dir, e))?;
    for (label, img) in &corpus.training {
        write_png(&label_file(&observer_dir, *label), img)?;
    }
    for (id, set) in &corpus.subjects {
        let dir = root.join("subjects").join(id.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (label, img) in set {
            write_png(&label_file(&dir, *label), img)?;
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        width: corpus.dims.0,
        height: corpus.dims.1,
        seed: corpus.seed,
        white_level: 255,
        labels: ExpressionLabel::ALL.to_vec(),
        observer: IdentityId::OBSERVER,
        identities: corpus.subject_ids(),
    };
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(root: &Path) -> Result<(Corpus, LoadReport)> {
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Corpus {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let bad_manifest = |reason: String| Error::Corpus {
        path: manifest_path.clone(),
        reason,
    };
    if manifest.format_version != MANIFEST_VERSION {
        return Err(bad_manifest(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if manifest.labels != ExpressionLabel::ALL {
        return Err(bad_manifest("label list differs from the canonical ten".into()));
    }
    if manifest.white_level == 0 {
        return Err(bad_manifest("white_level must be positive".into()));
    }
    let dims = (manifest.width, manifest.height);
    let white = f64::from(manifest.white_level);
    let mut report = LoadReport::default();

    let mut read_set = |dir: PathBuf, who: String| -> Result<ExpressionSet> {
        let mut set = BTreeMap::new();
        for label in ExpressionLabel::ALL {
            let path = label_file(&dir, label);
            if !path.is_file() {
                return Err(Error::Corpus {
                    path,
                    reason: format!("missing expression `{label}` for {who}"),
                });
            }
            let (w, h, levels) = read_png_levels(&path)?;
            if (w, h) != dims {
                return Err(Error::Corpus {
                    path,
                    reason: format!("image is {w}x{h}, manifest says {}x{}", dims.0, dims.1),
                });
            }
            let pixels = levels
                .into_iter()
                .map(|v| {
                    let x = f64::from(v) / white;
                    if x > 1.0 {
                        report.clamped_pixels += 1;
                    }
                    x.min(1.0)
                })
                .collect();
            set.insert(label, FaceImage::new(w, h, pixels)?);
            report.files_read += 1;
        }
        Ok(set)
    };

    let training = read_set(root.join("observer"), "the observer".into())?;
    let mut subjects = BTreeMap::new();
    for id in &manifest.identities {
        let set = read_set(root.join("subjects").join(id.to_string()), format!("subject {id}"))?;
        subjects.insert(*id, set);
    }
    if report.clamped_pixels > 0 {
        log::warn!(
            "{} pixel(s) above white level {} clamped while loading {}",
            report.clamped_pixels,
            manifest.white_level,
            root.display()
        );
    }
    Ok((Corpus::new(dims, manifest.seed, training, subjects)?, report))
}
