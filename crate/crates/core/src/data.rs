//! Synthetic shifted domain pairs and CSV dataset interchange.
//!
//! Class-count profiles follow the long-tailed construction: geometric decay
//! from `n_max` down to `n_max / mu` (FLT), its reversal (BLT), or uniform
//! counts (Bal). Covariate shift between domains is a rigid motion of
//! feature space: plane rotations by a fixed angle plus a translation, which
//! a nonlinear extractor has to undo.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class-count profile shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionKind {
    /// Forward long-tailed: counts decay geometrically with class index.
    Flt,
    /// Backward long-tailed: the FLT profile reversed.
    Blt,
    /// Balanced: every class at `n_max`.
    Bal,
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistributionKind::Flt => write!(f, "FLT"),
            DistributionKind::Blt => write!(f, "BLT"),
            DistributionKind::Bal => write!(f, "Bal"),
        }
    }
}

impl std::str::FromStr for DistributionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FLT" => Ok(DistributionKind::Flt),
            "BLT" => Ok(DistributionKind::Blt),
            "BAL" => Ok(DistributionKind::Bal),
            other => Err(Error::invalid_argument(format!(
                "unknown distribution kind {other:?} (expected FLT, BLT or Bal)"
            ))),
        }
    }
}

/// A class-count profile: shape plus imbalance ratio mu = N_max / N_min.
#[derive(Debug, Clone, Copy)]
pub struct ClassDistributionSpec {
    pub kind: DistributionKind,
    /// Ratio between the largest and smallest class count; >= 1. Ignored for
    /// balanced profiles.
    pub mu: f64,
}

impl ClassDistributionSpec {
    pub fn balanced() -> Self {
        ClassDistributionSpec { kind: DistributionKind::Bal, mu: 1.0 }
    }
}

/// Rigid covariate shift between source and target feature spaces.
#[derive(Debug, Clone, Copy)]
pub struct DomainShiftSpec {
    /// Rotation angle in radians, applied in randomly chosen coordinate
    /// planes.
    pub rotation_angle: f64,
    /// Magnitude of the fixed random translation added to target samples.
    pub translation_scale: f64,
    /// Per-coordinate Gaussian cluster std in the source domain.
    pub noise_sigma_source: f64,
    /// Per-coordinate Gaussian cluster std in the target domain.
    pub noise_sigma_target: f64,
    /// Distance of every class mean from the origin.
    pub mean_separation: f64,
}

impl DomainShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma_source > 0.0) || !(self.noise_sigma_target > 0.0) {
            return Err(Error::invalid_argument("noise sigmas must be > 0"));
        }
        if !(self.mean_separation > 0.0) {
            return Err(Error::invalid_argument("mean separation must be > 0"));
        }
        Ok(())
    }
}

/// A feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// n x d_in feature matrix.
    pub features: Tensor,
    /// n labels in [0, classes).
    pub labels: Vec<usize>,
    pub classes: usize,
    pub domain_tag: String,
}

impl LabeledDataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        classes: usize,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid_argument(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid_argument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(LabeledDataset { features, labels, classes, domain_tag: domain_tag.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Per-class sample counts for a distribution profile.
///
/// FLT: n_k = round(n_max * mu^(-k / (K-1))); BLT is the FLT list reversed;
/// Bal is `n_max` for every class. Requires `n_max >= mu` so the smallest
/// class keeps at least one sample.
pub fn sample_class_counts(
    spec: &ClassDistributionSpec,
    classes: usize,
    n_max: usize,
) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::invalid_argument("need at least 2 classes"));
    }
    if spec.mu < 1.0 {
        return Err(Error::invalid_argument(format!(
            "imbalance ratio must be >= 1, got {}",
            spec.mu
        )));
    }
    match spec.kind {
        DistributionKind::Bal => Ok(vec![n_max; classes]),
        DistributionKind::Flt | DistributionKind::Blt => {
            if (n_max as f64) < spec.mu {
                return Err(Error::invalid_argument(format!(
                    "n_max {} is below the imbalance ratio {}; the smallest class would be empty",
                    n_max, spec.mu
                )));
            }
            let mut counts: Vec<usize> = (0..classes)
                .map(|k| {
                    let exponent = -(k as f64) / (classes as f64 - 1.0);
                    (n_max as f64 * spec.mu.powf(exponent)).round() as usize
                })
                .collect();
            if spec.kind == DistributionKind::Blt {
                counts.reverse();
            }
            Ok(counts)
        }
    }
}

/// The deterministic geometry behind a domain pair: shared class means and
/// the target-side rigid motion.
#[derive(Debug, Clone)]
pub struct ShiftBlueprint {
    /// K class means, each a length-d vector.
    pub class_means: Vec<Vec<f64>>,
    /// Disjoint coordinate planes rotated by `rotation_angle`.
    rotation_planes: Vec<(usize, usize)>,
    rotation_angle: f64,
    /// Fixed translation added to every target sample.
    pub translation: Vec<f64>,
}

impl ShiftBlueprint {
    fn sample(rng: &mut ChaCha8Rng, classes: usize, dim: usize, shift: &DomainShiftSpec) -> Self {
        let class_means = (0..classes)
            .map(|_| {
                let v = random_unit_vector(rng, dim);
                v.into_iter().map(|x| x * shift.mean_separation).collect()
            })
            .collect();

        // Pair up a random permutation of the coordinates into disjoint planes.
        let mut perm: Vec<usize> = (0..dim).collect();
        for i in (1..dim).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let rotation_planes = perm.chunks_exact(2).map(|c| (c[0], c[1])).collect();

        let translation = if shift.translation_scale > 0.0 {
            random_unit_vector(rng, dim)
                .into_iter()
                .map(|x| x * shift.translation_scale)
                .collect()
        } else {
            vec![0.0; dim]
        };

        ShiftBlueprint {
            class_means,
            rotation_planes,
            rotation_angle: shift.rotation_angle,
            translation,
        }
    }

    /// Apply the target-side rigid motion to a point (in place).
    pub fn apply_shift(&self, point: &mut [f64]) {
        if self.rotation_angle != 0.0 {
            let (sin, cos) = self.rotation_angle.sin_cos();
            for &(a, b) in &self.rotation_planes {
                let (x, y) = (point[a], point[b]);
                point[a] = cos * x - sin * y;
                point[b] = sin * x + cos * y;
            }
        }
        for (p, t) in point.iter_mut().zip(&self.translation) {
            *p += t;
        }
    }
}

fn random_unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Deterministically derive the geometry a given seed produces.
pub fn shift_blueprint(
    seed: u64,
    classes: usize,
    dim: usize,
    shift: &DomainShiftSpec,
) -> Result<ShiftBlueprint> {
    shift.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ShiftBlueprint::sample(&mut rng, classes, dim, shift))
}

/// Generate a source/target domain pair fully determined by `seed`.
///
/// Source samples are `mean_k + N(0, sigma_s^2 I)`; target samples are the
/// source construction with the target sigma, pushed through the blueprint's
/// rotation and translation. Both domains share the class means.
pub fn generate_domain_pair(
    seed: u64,
    classes: usize,
    dim: usize,
    counts_source: &[usize],
    counts_target: &[usize],
    shift: &DomainShiftSpec,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if counts_source.len() != classes || counts_target.len() != classes {
        return Err(Error::invalid_argument(format!(
            "count lists must have length {classes}"
        )));
    }
    shift.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blueprint = ShiftBlueprint::sample(&mut rng, classes, dim, shift);

    let sample_domain = |rng: &mut ChaCha8Rng,
                         counts: &[usize],
                         sigma: f64,
                         shifted: bool,
                         tag: &str|
     -> Result<LabeledDataset> {
        let n: usize = counts.iter().sum();
        let mut features = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        let mut point = vec![0.0; dim];
        for (k, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                for (d, p) in point.iter_mut().enumerate() {
                    let noise: f64 = rng.sample(StandardNormal);
                    *p = blueprint.class_means[k][d] + sigma * noise;
                }
                if shifted {
                    blueprint.apply_shift(&mut point);
                }
                features.extend_from_slice(&point);
                labels.push(k);
            }
        }
        LabeledDataset::new(Tensor::from_vec(&[n, dim], features)?, labels, classes, tag)
    };

    let source = sample_domain(&mut rng, counts_source, shift.noise_sigma_source, false, "source")?;
    let target = sample_domain(&mut rng, counts_target, shift.noise_sigma_target, true, "target")?;
    Ok((source, target))
}

/// Write a dataset as CSV: header `f0,...,f{d-1},label`, one sample per row.
pub fn save_csv(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let d = dataset.input_dim();
    let header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    writeln!(w, "{},label", header.join(","))?;
    for i in 0..dataset.len() {
        let row: Vec<String> = dataset.features.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{}", row.join(","), dataset.labels[i])?;
    }
    w.flush()?;
    Ok(())
}

/// Load a CSV dataset written by [`save_csv`]. `classes` bounds the labels;
/// malformed rows are reported with their line number.
pub fn load_csv(path: &Path, classes: usize) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file, expected a header"))??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 2 || cols[cols.len() - 1] != "label" {
        return Err(Error::parse(1, "header must be f0,...,f{d-1},label"));
    }
    let dim = cols.len() - 1;
    for (j, c) in cols[..dim].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::parse(1, format!("unexpected header column {c:?}")));
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::parse(
                line_no,
                format!("expected {} fields, got {}", dim + 1, fields.len()),
            ));
        }
        for f in &fields[..dim] {
            let v: f64 = f.parse().map_err(|_| {
                Error::parse(line_no, format!("non-numeric feature {f:?}"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(line_no, format!("non-finite feature {f:?}")));
            }
            features.push(v);
        }
        let label: usize = fields[dim]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad label {:?}", fields[dim])))?;
        if label >= classes {
            return Err(Error::parse(
                line_no,
                format!("label {label} out of range for {classes} classes"),
            ));
        }
        labels.push(label);
    }

    let n = labels.len();
    LabeledDataset::new(Tensor::from_vec(&[n, dim], features)?, labels, classes, "csv")
}
