//! Grayscale face images, face-region partitions and the SSIM similarity
//! measure used as the matching function throughout the pipeline.
//!
//! SSIM is the mean over every fully-interior window position (stride 1, no
//! padding) of the local index
//!
//! ```text
//! (2 mu_a mu_b + c1)(2 cov_ab + c2) / ((mu_a^2 + mu_b^2 + c1)(var_a + var_b + c2))
//! ```
//!
//! with Gaussian-weighted window statistics. The Gaussian window is separable,
//! so window means are computed with two 1-D passes. [`SsimEngine`] caches the
//! per-image statistics so that comparing one query against many candidates
//! only costs the cross-moment pass.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A grayscale image with row-major intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl FaceImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(pos) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage(format!(
                "intensity {} at index {pos} outside [0, 1]",
                pixels[pos]
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image, clamping every intensity into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(width, height, pixels)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                pixels.push(f(row, col));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub(crate) fn check_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", dims.0, dims.1),
                actual: format!("{}x{}", self.width, self.height),
            });
        }
        Ok(())
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    /// Rectangle spanning the inclusive row and column ranges.
    pub fn rows_cols(rows: (usize, usize), cols: (usize, usize)) -> Self {
        Self::new(rows.0, cols.0, rows.1 + 1 - rows.0, cols.1 + 1 - cols.0)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Name of the region that collects every pixel not covered by a named region.
pub const REST_REGION: &str = "rest";

/// One named face part: a union of disjoint rectangles.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    name: String,
    rects: Vec<Rect>,
    indices: Vec<usize>,
}

impl Region {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    /// Row-major pixel indices belonging to the region.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PartitionSpec {
    width: usize,
    height: usize,
    regions: Vec<(String, Vec<Rect>)>,
}

/// Ordered, disjoint split of an image into named regions. Pixels left
/// uncovered by the named rectangles form a trailing [`REST_REGION`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartitionSpec", into = "PartitionSpec")]
pub struct RegionPartition {
    width: usize,
    height: usize,
    regions: Vec<Region>,
}

impl TryFrom<PartitionSpec> for RegionPartition {
    type Error = Error;

    fn try_from(spec: PartitionSpec) -> Result<Self> {
        let named = spec
            .regions
            .into_iter()
            .filter(|(name, _)| name != REST_REGION)
            .collect();
        RegionPartition::new(spec.width, spec.height, named)
    }
}

impl From<RegionPartition> for PartitionSpec {
    fn from(p: RegionPartition) -> Self {
        PartitionSpec {
            width: p.width,
            height: p.height,
            regions: p
                .regions
                .into_iter()
                .map(|r| (r.name, r.rects))
                .collect(),
        }
    }
}

impl RegionPartition {
    pub fn new(width: usize, height: usize, named: Vec<(String, Vec<Rect>)>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidPartition("image dimensions must be positive".into()));
        }
        let mut owner: Vec<Option<usize>> = vec![None; width * height];
        let mut seen = BTreeSet::new();
        let mut regions = Vec::with_capacity(named.len() + 1);
        for (ri, (name, rects)) in named.into_iter().enumerate() {
            if name.is_empty() || name == REST_REGION {
                return Err(Error::InvalidPartition(format!("reserved region name `{name}`")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidPartition(format!("duplicate region `{name}`")));
            }
            let mut indices = Vec::new();
            for rect in &rects {
                if rect.area() == 0
                    || rect.top + rect.height > height
                    || rect.left + rect.width > width
                {
                    return Err(Error::InvalidPartition(format!(
                        "rectangle {rect:?} of `{name}` lies outside the {width}x{height} image"
                    )));
                }
                for row in rect.top..rect.top + rect.height {
                    for col in rect.left..rect.left + rect.width {
                        let idx = row * width + col;
                        if let Some(other) = owner[idx] {
                            return Err(Error::InvalidPartition(format!(
                                "pixel ({row}, {col}) claimed by region {other} and `{name}`"
                            )));
                        }
                        owner[idx] = Some(ri);
                        indices.push(idx);
                    }
                }
            }
            indices.sort_unstable();
            regions.push(Region {
                name,
                rects,
                indices,
            });
        }
        let rest: Vec<usize> = (0..width * height).filter(|&i| owner[i].is_none()).collect();
        if !rest.is_empty() {
            regions.push(Region {
                name: REST_REGION.to_string(),
                rects: Vec::new(),
                indices: rest,
            });
        }
        Ok(Self {
            width,
            height,
            regions,
        })
    }

    /// A single region covering every pixel.
    pub fn whole_image(width: usize, height: usize, name: &str) -> Result<Self> {
        Self::new(
            width,
            height,
            vec![(name.to_string(), vec![Rect::new(0, 0, height, width)])],
        )
    }

    /// Fixed semantic split used for faces. Row and column boundaries are
    /// defined on the 140x154 canvas and scaled proportionally for other sizes.
    pub fn default_face(width: usize, height: usize) -> Result<Self> {
        let r = |v: usize| ((v * height) as f64 / 154.0).round() as usize;
        let c = |v: usize| ((v * width) as f64 / 140.0).round() as usize;
        let (nose_l, nose_r) = (c(45), c(95));
        let last_col = width - 1;
        let band = |a: usize, b: usize| Rect::rows_cols((r(a), r(b + 1) - 1), (0, last_col));
        let nose_rows = (r(81), r(106) - 1);
        let mouth_end = r(141).min(height) - 1;
        Self::new(
            width,
            height,
            vec![
                ("eyebrows".into(), vec![band(30, 55)]),
                ("eyes".into(), vec![band(56, 80)]),
                (
                    "nose".into(),
                    vec![Rect::rows_cols(nose_rows, (nose_l, nose_r))],
                ),
                (
                    "cheeks".into(),
                    vec![
                        Rect::rows_cols(nose_rows, (0, nose_l - 1)),
                        Rect::rows_cols(nose_rows, (nose_r + 1, last_col)),
                    ],
                ),
                (
                    "mouth".into(),
                    vec![Rect::rows_cols((r(106), mouth_end), (0, last_col))],
                ),
            ],
        )
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, name: &str) -> Result<&Region> {
        self.regions
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::UnknownRegion(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.regions.iter().map(|r| r.name.as_str())
    }
}

/// Pixels of region `name`, flattened row-major.
pub fn extract_region(img: &FaceImage, partition: &RegionPartition, name: &str) -> Result<Vec<f64>> {
    img.check_dims(partition.dims())?;
    let region = partition.region(name)?;
    Ok(region.indices.iter().map(|&i| img.pixels[i]).collect())
}

/// Every region of `img`, keyed by region name.
pub fn extract_all(img: &FaceImage, partition: &RegionPartition) -> Result<BTreeMap<String, Vec<f64>>> {
    img.check_dims(partition.dims())?;
    Ok(partition
        .regions
        .iter()
        .map(|r| {
            (
                r.name.clone(),
                r.indices.iter().map(|&i| img.pixels[i]).collect(),
            )
        })
        .collect())
}

/// Inverse of [`extract_region`] over the whole partition.
pub fn assemble_regions(
    parts: &BTreeMap<String, Vec<f64>>,
    partition: &RegionPartition,
) -> Result<FaceImage> {
    let mut pixels = vec![0.0; partition.width * partition.height];
    for region in &partition.regions {
        let values = parts
            .get(&region.name)
            .ok_or_else(|| Error::UnknownRegion(region.name.clone()))?;
        if values.len() != region.indices.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values for `{}`", region.indices.len(), region.name),
                actual: values.len().to_string(),
            });
        }
        for (&i, &v) in region.indices.iter().zip(values) {
            pixels[i] = v;
        }
    }
    FaceImage::from_clamped(partition.width, partition.height, pixels)
}

/// SSIM configuration. Defaults to an 80x80 Gaussian window with sigma 3.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window_size: usize,
    pub gaussian_sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::with_window(80, 3.0)
    }
}

impl SsimParams {
    /// Standard stabilizers `(0.01 L)^2` and `(0.03 L)^2` for dynamic range `L = 1`.
    pub fn with_window(window_size: usize, gaussian_sigma: f64) -> Self {
        let dynamic_range = 1.0;
        Self {
            window_size,
            gaussian_sigma,
            c1: (0.01 * dynamic_range) * (0.01 * dynamic_range),
            c2: (0.03 * dynamic_range) * (0.03 * dynamic_range),
            dynamic_range,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.window_size == 0 {
            return Err(Error::param("window_size", "must be at least 1"));
        }
        if self.window_size > width.min(height) {
            return Err(Error::param(
                "window_size",
                format!(
                    "window {} exceeds image {}x{}",
                    self.window_size, width, height
                ),
            ));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::param("gaussian_sigma", "must be positive"));
        }
        if !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(Error::param("c1/c2", "stabilizers must be positive"));
        }
        if !(self.dynamic_range > 0.0) {
            return Err(Error::param("dynamic_range", "must be positive"));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn window_taps(&self) -> Vec<f64> {
        let center = (self.window_size as f64 - 1.0) / 2.0;
        let denom = 2.0 * self.gaussian_sigma * self.gaussian_sigma;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - center;
                (-d * d / denom).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

/// Per-image window statistics ready for repeated comparisons.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pixels: Vec<f64>,
    mean: Vec<f64>,
    variance: Vec<f64>,
}

/// SSIM evaluator bound to one image size and parameter set.
#[derive(Clone, Debug)]
pub struct SsimEngine {
    params: SsimParams,
    width: usize,
    height: usize,
    taps: Vec<f64>,
    // Taps outside [first, last) are below 1e-20 of the peak and skipped.
    first: usize,
    last: usize,
    out_w: usize,
    out_h: usize,
}

impl SsimEngine {
    pub fn new(params: SsimParams, width: usize, height: usize) -> Result<Self> {
        params.validate(width, height)?;
        let taps = params.window_taps();
        let peak = taps.iter().cloned().fold(0.0, f64::max);
        let first = taps.iter().position(|&w| w >= peak * 1e-20).unwrap_or(0);
        let last = taps.len() - taps.iter().rev().position(|&w| w >= peak * 1e-20).unwrap_or(0);
        Ok(Self {
            params,
            width,
            height,
            taps,
            first,
            last,
            out_w: width - params.window_size + 1,
            out_h: height - params.window_size + 1,
        })
    }

    pub fn params(&self) -> &SsimParams {
        &self.params
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Number of window positions averaged.
    pub fn window_count(&self) -> usize {
        self.out_w * self.out_h
    }

    fn filter(&self, values: &[f64]) -> Vec<f64> {
        let (w, h, ow, oh) = (self.width, self.height, self.out_w, self.out_h);
        let taps = &self.taps[self.first..self.last];
        let mut horiz = vec![0.0; h * ow];
        for row in 0..h {
            let src = &values[row * w..(row + 1) * w];
            let dst = &mut horiz[row * ow..(row + 1) * ow];
            for (c, out) in dst.iter_mut().enumerate() {
                let seg = &src[c + self.first..c + self.last];
                *out = seg.iter().zip(taps).map(|(x, t)| x * t).sum();
            }
        }
        let mut out = vec![0.0; ow * oh];
        for r in 0..oh {
            let dst = &mut out[r * ow..(r + 1) * ow];
            for (k, &t) in taps.iter().enumerate() {
                let src_row = r + self.first + k;
                let src = &horiz[src_row * ow..(src_row + 1) * ow];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += t * s;
                }
            }
        }
        out
    }

    pub fn prepare(&self, img: &FaceImage) -> Result<PreparedImage> {
        img.check_dims((self.width, self.height))?;
        let pixels = img.pixels().to_vec();
        let mean = self.filter(&pixels);
        let squares: Vec<f64> = pixels.iter().map(|v| v * v).collect();
        let mut variance = self.filter(&squares);
        for (v, m) in variance.iter_mut().zip(&mean) {
            *v -= m * m;
        }
        Ok(PreparedImage {
            pixels,
            mean,
            variance,
        })
    }

    /// Mean SSIM between two prepared images of this engine's size.
    pub fn compare(&self, a: &PreparedImage, b: &PreparedImage) -> f64 {
        let products: Vec<f64> = a.pixels.iter().zip(&b.pixels).map(|(x, y)| x * y).collect();
        let cross = self.filter(&products);
        let (c1, c2) = (self.params.c1, self.params.c2);
        let mut total = 0.0;
        for i in 0..cross.len() {
            let (ma, mb) = (a.mean[i], b.mean[i]);
            let cov = cross[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (a.variance[i] + b.variance[i] + c2);
            total += num / den;
        }
        total / cross.len() as f64
    }

    pub fn ssim(&self, a: &FaceImage, b: &FaceImage) -> Result<f64> {
        Ok(self.compare(&self.prepare(a)?, &self.prepare(b)?))
    }
}

/// Mean windowed SSIM between two equally sized images.
pub fn ssim(a: &FaceImage, b: &FaceImage, params: &SsimParams) -> Result<f64> {
    b.check_dims(a.dims())?;
    SsimEngine::new(*params, a.width(), a.height())?.ssim(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, px: &[f64]) -> FaceImage {
        FaceImage::new(w, h, px.to_vec()).unwrap()
    }

    #[test]
    fn rejects_out_of_range_intensity() {
        assert!(FaceImage::new(1, 2, vec![0.5, 1.2]).is_err());
        assert!(FaceImage::new(2, 2, vec![0.5; 3]).is_err());
        assert!(FaceImage::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn constant_images_reduce_to_luminance_term() {
        let params = SsimParams::with_window(4, 1.5);
        let a = FaceImage::filled(6, 6, 0.2).unwrap();
        let b = FaceImage::filled(6, 6, 0.8).unwrap();
        let expected = (2.0 * 0.2 * 0.8 + params.c1) / (0.2 * 0.2 + 0.8 * 0.8 + params.c1);
        let got = ssim(&a, &b, &params).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn ssim_errors() {
        let a = FaceImage::filled(6, 6, 0.2).unwrap();
        let b = FaceImage::filled(6, 5, 0.2).unwrap();
        assert!(matches!(
            ssim(&a, &b, &SsimParams::with_window(3, 1.0)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(ssim(&a, &a, &SsimParams::with_window(7, 1.0)).is_err());
        let mut bad = SsimParams::with_window(3, 1.0);
        bad.gaussian_sigma = 0.0;
        assert!(ssim(&a, &a, &bad).is_err());
    }

    #[test]
    fn identity_partition_extracts_everything() {
        let image = img(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let p = RegionPartition::whole_image(2, 2, "face").unwrap();
        assert_eq!(extract_region(&image, &p, "face").unwrap(), vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(p.regions().len(), 1);
    }

    #[test]
    fn single_pixel_region_and_rest() {
        let image = img(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let p = RegionPartition::new(3, 2, vec![("eyes".into(), vec![Rect::new(0, 0, 1, 1)])])
            .unwrap();
        assert_eq!(extract_region(&image, &p, "eyes").unwrap(), vec![0.1]);
        assert_eq!(
            extract_region(&image, &p, REST_REGION).unwrap(),
            vec![0.2, 0.3, 0.4, 0.5, 0.6]
        );
        assert!(matches!(
            extract_region(&image, &p, "mouth"),
            Err(Error::UnknownRegion(_))
        ));
    }

    #[test]
    fn partition_validation() {
        let overlap = RegionPartition::new(
            4,
            4,
            vec![
                ("eyes".into(), vec![Rect::new(0, 0, 2, 2)]),
                ("nose".into(), vec![Rect::new(1, 1, 2, 2)]),
            ],
        );
        assert!(overlap.is_err());
        let outside = RegionPartition::new(4, 4, vec![("eyes".into(), vec![Rect::new(3, 0, 2, 2)])]);
        assert!(outside.is_err());
        let dup = RegionPartition::new(
            4,
            4,
            vec![
                ("eyes".into(), vec![Rect::new(0, 0, 1, 1)]),
                ("eyes".into(), vec![Rect::new(1, 1, 1, 1)]),
            ],
        );
        assert!(dup.is_err());
    }

    #[test]
    fn default_face_partition_geometry() {
        let p = RegionPartition::default_face(140, 154).unwrap();
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, ["eyebrows", "eyes", "nose", "cheeks", "mouth", REST_REGION]);
        // rows 106..=140 at full width
        assert_eq!(p.region("mouth").unwrap().len(), 35 * 140);
        assert_eq!(p.region("nose").unwrap().len(), 25 * 51);
        assert_eq!(p.region("cheeks").unwrap().len(), 25 * (140 - 51));
        assert_eq!(p.region("eyebrows").unwrap().len(), 26 * 140);
        assert_eq!(p.region(REST_REGION).unwrap().len(), (30 + 13) * 140);
        let total: usize = p.regions().iter().map(Region::len).sum();
        assert_eq!(total, 140 * 154);
    }

    #[test]
    fn partition_serde_round_trip() {
        let p = RegionPartition::default_face(140, 154).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: RegionPartition = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn assemble_requires_every_region() {
        let p = RegionPartition::new(2, 2, vec![("a".into(), vec![Rect::new(0, 0, 1, 2)])]).unwrap();
        let mut parts = BTreeMap::new();
        parts.insert("a".to_string(), vec![0.0, 0.0]);
        assert!(assemble_regions(&parts, &p).is_err());
        parts.insert(REST_REGION.to_string(), vec![0.0]);
        assert!(assemble_regions(&parts, &p).is_err());
        parts.insert(REST_REGION.to_string(), vec![0.0, 0.0]);
        let zero = assemble_regions(&parts, &p).unwrap();
        assert!(zero.pixels().iter().all(|&v| v == 0.0));
    }
}
