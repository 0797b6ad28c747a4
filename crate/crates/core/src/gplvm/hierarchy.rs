//! Image-valued latent space models: a flat GPLVM over whole images and a
//! two-level hierarchy with one leaf per face region under a shared root.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{fit, FitOptions, FitReport, GplvmModel, LatentInit};
use crate::dataset::{ExpressionLabel, ExpressionSet};
use crate::error::{Error, Result};
use crate::imagecore::{assemble_regions, FaceImage, RegionPartition};
use crate::modelio::ModelFile;

/// Anything that maps latent points to images.
pub trait LatentModel {
    fn dims(&self) -> (usize, usize);
    fn latent_dim(&self) -> usize;
    /// Training latents, one row per training expression.
    fn training_latents(&self) -> &DMatrix<f64>;
    fn labels(&self) -> &[ExpressionLabel];
    /// Predictive-mean image at `x`, clamped to [0, 1].
    fn generate(&self, x: &[f64]) -> Result<FaceImage>;
    /// Gaussian log predictive density of `y` at `x`.
    fn log_predictive_density(&self, x: &[f64], y: &FaceImage) -> Result<f64>;
}

fn gaussian_log_density(values: impl Iterator<Item = (f64, f64)>, variance: f64) -> f64 {
    let norm = -0.5 * (2.0 * PI * variance).ln();
    values.map(|(y, m)| norm - (y - m).powi(2) / (2.0 * variance)).sum()
}

fn stack(training: &ExpressionSet) -> Result<(Vec<ExpressionLabel>, Vec<&FaceImage>)> {
    if training.len() < 2 {
        return Err(Error::param("training", format!("need at least 2 expressions, got {}", training.len())));
    }
    Ok(training.iter().map(|(l, img)| (*l, img)).unzip())
}

fn region_matrix(images: &[&FaceImage], indices: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(images.len(), indices.len(), |i, j| images[i].pixels()[indices[j]])
}

/// GPLVM over whole images.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlatModel {
    width: usize,
    height: usize,
    gp: GplvmModel,
}

impl FlatModel {
    pub fn gp(&self) -> &GplvmModel {
        &self.gp
    }
}

pub fn fit_flat(training: &ExpressionSet, q: usize, options: &FitOptions) -> Result<(FlatModel, FitReport)> {
    let (labels, images) = stack(training)?;
    let (width, height) = images[0].dims();
    for img in &images {
        img.check_dims((width, height))?;
    }
    let all: Vec<usize> = (0..width * height).collect();
    let (gp, report) = fit(&region_matrix(&images, &all), labels, q, LatentInit::Pca, options)?;
    Ok((FlatModel { width, height, gp }, report))
}

impl LatentModel for FlatModel {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn latent_dim(&self) -> usize {
        self.gp.latent_dim()
    }

    fn training_latents(&self) -> &DMatrix<f64> {
        self.gp.latent()
    }

    fn labels(&self) -> &[ExpressionLabel] {
        self.gp.labels()
    }

    fn generate(&self, x: &[f64]) -> Result<FaceImage> {
        let v = self.gp.predict(x)?;
        FaceImage::from_clamped(self.width, self.height, v.as_slice().to_vec())
    }

    fn log_predictive_density(&self, x: &[f64], y: &FaceImage) -> Result<f64> {
        y.check_dims(self.dims())?;
        let mean = self.gp.predict(x)?;
        let var = self.gp.predict_variance(x)?;
        Ok(gaussian_log_density(y.pixels().iter().copied().zip(mean.iter().copied()), var))
    }
}

/// One leaf GPLVM per region, coordinated by a root GPLVM whose outputs are
/// the concatenated leaf latents.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HierarchicalModel {
    partition: RegionPartition,
    root: GplvmModel,
    /// In partition order.
    leaves: Vec<GplvmModel>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HierarchicalReport {
    pub leaves: BTreeMap<String, FitReport>,
    pub root: FitReport,
}

/// Stage-wise fit: every leaf on its region pixels, then the root on the
/// leaf latents.
pub fn fit_hierarchical(
    training: &ExpressionSet,
    partition: &RegionPartition,
    q_leaf: usize,
    q_root: usize,
    options: &FitOptions,
) -> Result<(HierarchicalModel, HierarchicalReport)> {
    let (labels, images) = stack(training)?;
    for img in &images {
        img.check_dims(partition.dims())?;
    }
    let mut leaves = Vec::new();
    let mut reports = BTreeMap::new();
    for region in partition.regions() {
        let y = region_matrix(&images, region.indices());
        let (gp, report) = fit(&y, labels.clone(), q_leaf, LatentInit::Pca, options)?;
        log::debug!(
            "leaf `{}`: log likelihood {:.3} -> {:.3} in {} steps",
            region.name(),
            report.initial_log_likelihood,
            report.final_log_likelihood,
            report.iterations
        );
        reports.insert(region.name().to_string(), report);
        leaves.push(gp);
    }
    let n = images.len();
    let mut root_y = DMatrix::zeros(n, q_leaf * leaves.len());
    for (k, leaf) in leaves.iter().enumerate() {
        root_y.view_mut((0, k * q_leaf), (n, q_leaf)).copy_from(leaf.latent());
    }
    let (root, root_report) = fit(&root_y, labels, q_root, LatentInit::Pca, options)?;
    let model = HierarchicalModel {
        partition: partition.clone(),
        root,
        leaves,
    };
    Ok((
        model,
        HierarchicalReport {
            leaves: reports,
            root: root_report,
        },
    ))
}

impl HierarchicalModel {
    pub fn partition(&self) -> &RegionPartition {
        &self.partition
    }

    pub fn root(&self) -> &GplvmModel {
        &self.root
    }

    pub fn leaf(&self, region: &str) -> Result<&GplvmModel> {
        self.partition
            .regions()
            .iter()
            .position(|r| r.name() == region)
            .map(|i| &self.leaves[i])
            .ok_or_else(|| Error::UnknownRegion(region.to_string()))
    }

    pub fn leaves(&self) -> impl Iterator<Item = (&str, &GplvmModel)> {
        self.partition.regions().iter().map(|r| r.name()).zip(&self.leaves)
    }

    /// Leaf latent coordinates predicted by the root at `x`.
    pub fn leaf_latents(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let z = self.root.predict(x)?;
        let mut offset = 0;
        Ok(self
            .leaves
            .iter()
            .map(|leaf| {
                let q = leaf.latent_dim();
                let part = z.as_slice()[offset..offset + q].to_vec();
                offset += q;
                part
            })
            .collect())
    }

    fn check(&self) -> Result<()> {
        if self.leaves.len() != self.partition.regions().len() {
            return Err(Error::ModelFormat("leaf count differs from partition".into()));
        }
        let n = self.root.len();
        let mut total = 0;
        for (region, leaf) in self.partition.regions().iter().zip(&self.leaves) {
            if leaf.output_dim() != region.len() || leaf.len() != n {
                return Err(Error::ModelFormat(format!("leaf `{}` does not match partition", region.name())));
            }
            total += leaf.latent_dim();
        }
        if self.root.output_dim() != total {
            return Err(Error::ModelFormat(format!(
                "root outputs {} values, leaves need {total}",
                self.root.output_dim()
            )));
        }
        Ok(())
    }
}

impl LatentModel for HierarchicalModel {
    fn dims(&self) -> (usize, usize) {
        self.partition.dims()
    }

    fn latent_dim(&self) -> usize {
        self.root.latent_dim()
    }

    fn training_latents(&self) -> &DMatrix<f64> {
        self.root.latent()
    }

    fn labels(&self) -> &[ExpressionLabel] {
        self.root.labels()
    }

    fn generate(&self, x: &[f64]) -> Result<FaceImage> {
        let mut parts = BTreeMap::new();
        for ((region, leaf), z) in self.partition.regions().iter().zip(&self.leaves).zip(self.leaf_latents(x)?) {
            parts.insert(region.name().to_string(), leaf.predict(&z)?.as_slice().to_vec());
        }
        assemble_regions(&parts, &self.partition)
    }

    fn log_predictive_density(&self, x: &[f64], y: &FaceImage) -> Result<f64> {
        y.check_dims(self.dims())?;
        let mut total = 0.0;
        for ((region, leaf), z) in self.partition.regions().iter().zip(&self.leaves).zip(self.leaf_latents(x)?) {
            let mean = leaf.predict(&z)?;
            let var = leaf.predict_variance(&z)?;
            let pairs = region.indices().iter().map(|&i| y.pixels()[i]).zip(mean.iter().copied());
            total += gaussian_log_density(pairs, var);
        }
        Ok(total)
    }
}

/// Either latent space model, as persisted to disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "snake_case")]
pub enum LatentSpaceModel {
    Flat(FlatModel),
    Hierarchical(HierarchicalModel),
}

impl LatentSpaceModel {
    fn inner(&self) -> &dyn LatentModel {
        match self {
            LatentSpaceModel::Flat(m) => m,
            LatentSpaceModel::Hierarchical(m) => m,
        }
    }
}

impl LatentModel for LatentSpaceModel {
    fn dims(&self) -> (usize, usize) {
        self.inner().dims()
    }

    fn latent_dim(&self) -> usize {
        self.inner().latent_dim()
    }

    fn training_latents(&self) -> &DMatrix<f64> {
        self.inner().training_latents()
    }

    fn labels(&self) -> &[ExpressionLabel] {
        self.inner().labels()
    }

    fn generate(&self, x: &[f64]) -> Result<FaceImage> {
        self.inner().generate(x)
    }

    fn log_predictive_density(&self, x: &[f64], y: &FaceImage) -> Result<f64> {
        self.inner().log_predictive_density(x, y)
    }
}

impl ModelFile for LatentSpaceModel {
    const KIND: &'static str = "latent_space";

    fn validate(&self) -> Result<()> {
        match self {
            LatentSpaceModel::Flat(m) => {
                if m.gp.output_dim() != m.width * m.height {
                    return Err(Error::ModelFormat("flat model output size differs from image size".into()));
                }
            }
            LatentSpaceModel::Hierarchical(m) => m.check()?,
        }
        if self.labels().len() != self.training_latents().nrows() {
            return Err(Error::ModelFormat("every training latent needs a label".into()));
        }
        Ok(())
    }
}

/// `label,x1,..,xq` rows for plotting the latent topology.
pub fn export_latents_csv(model: &dyn LatentModel) -> String {
    let x = model.training_latents();
    let mut out = String::from("label");
    for c in 0..x.ncols() {
        let _ = write!(out, ",x{}", c + 1);
    }
    out.push('\n');
    for (i, label) in model.labels().iter().enumerate() {
        out.push_str(label.name());
        for c in 0..x.ncols() {
            let _ = write!(out, ",{}", x[(i, c)]);
        }
        out.push('\n');
    }
    out
}
