//! Stage two: adapt the source model to unlabeled target data.
//!
//! Shared machinery for both adaptation variants lives here: centroid
//! pseudo-labeling, the momentum prediction bank, the target feature bank,
//! the projection head, and the per-epoch report. [`cpga`] aligns target
//! features to generated prototypes using the source model's own pseudo
//! labels; [`tcpga`] additionally ensembles a zero-shot oracle into the
//! pseudo labels and trains a target-distribution-aware classifier head.

mod cpga;
mod losses;
mod tcpga;

pub use cpga::{adapt_cpga, CpgaConfig, CpgaOutcome};
pub use losses::{elr_batch, elr_step, loss_nc, nc_batch, weighted_infonce};
pub use tcpga::{
    adapt_tcpga, confidence_t, ensemble_prediction, ensemble_weights, predict_final,
    TargetClassifier, TcpgaConfig, TcpgaOutcome, ZeroShotOracle,
};

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Mlp, MlpVars};
use crate::tensor::{softmax_rows, Tape, Tensor, Var};

/// Per-class centroids in extractor feature space.
#[derive(Debug, Clone)]
pub struct Centroids {
    /// K x d_f matrix, one row per class.
    pub matrix: Tensor,
}

impl Centroids {
    pub fn classes(&self) -> usize {
        self.matrix.rows()
    }
}

/// Prediction-weighted feature means: centroid k averages all features with
/// weights taken from column k of `soft_preds`. A class whose total weight
/// is zero falls back to the global feature mean (and is logged).
pub fn init_centroids(features: &Tensor, soft_preds: &Tensor) -> Result<Centroids> {
    let (n, d) = (features.rows(), features.cols());
    let k = soft_preds.cols();
    if soft_preds.rows() != n {
        return Err(Error::invalid_argument(format!(
            "{n} features but {} prediction rows",
            soft_preds.rows()
        )));
    }
    let mut sums = vec![0.0; k * d];
    let mut weights = vec![0.0; k];
    let mut global = vec![0.0; d];
    for i in 0..n {
        let q = features.row(i);
        let p = soft_preds.row(i);
        for (j, &qj) in q.iter().enumerate() {
            global[j] += qj;
        }
        for (c, &w) in p.iter().enumerate() {
            weights[c] += w;
            for (j, &qj) in q.iter().enumerate() {
                sums[c * d + j] += w * qj;
            }
        }
    }
    for g in global.iter_mut() {
        *g /= n as f64;
    }
    for c in 0..k {
        if weights[c] == 0.0 {
            log::warn!("class {c} has zero total prediction weight; centroid set to global mean");
            sums[c * d..(c + 1) * d].copy_from_slice(&global);
        } else {
            for j in 0..d {
                sums[c * d + j] /= weights[c];
            }
        }
    }
    Ok(Centroids { matrix: Tensor::from_vec(&[k, d], sums)? })
}

/// Indicator-weighted centroid refresh: centroid k becomes the mean of the
/// features currently labeled k; classes with no assigned samples keep their
/// previous centroid.
pub fn update_centroids(
    features: &Tensor,
    hard_labels: &[usize],
    previous: &Centroids,
) -> Result<Centroids> {
    let (n, d) = (features.rows(), features.cols());
    let k = previous.classes();
    if hard_labels.len() != n {
        return Err(Error::invalid_argument(format!(
            "{n} features but {} labels",
            hard_labels.len()
        )));
    }
    if let Some(&bad) = hard_labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid_argument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &l) in hard_labels.iter().enumerate() {
        counts[l] += 1;
        for (j, &qj) in features.row(i).iter().enumerate() {
            sums[l * d + j] += qj;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            sums[c * d..(c + 1) * d].copy_from_slice(previous.matrix.row(c));
        } else {
            for j in 0..d {
                sums[c * d + j] /= counts[c] as f64;
            }
        }
    }
    Ok(Centroids { matrix: Tensor::from_vec(&[k, d], sums)? })
}

/// Centroid-similarity predictions: soft rows are the temperature softmax of
/// cosine similarities to every centroid; hard labels are the row argmax
/// with ties broken toward the lower class index.
pub fn pseudo_labels(
    features: &Tensor,
    centroids: &Centroids,
    temperature: f64,
) -> Result<(Tensor, Vec<usize>)> {
    let sims = cosine_to_centroids(features, centroids)?;
    let soft = softmax_rows(&sims, temperature)?;
    let hard = crate::model::argmax_rows(&soft);
    Ok((soft, hard))
}

/// Confidence weight of each sample: its soft prediction at the pseudo-label
/// index. Shares the pseudo-label computation, so the equality between the
/// weight and the soft prediction entry is structural.
pub fn confidence_weight(soft: &Tensor, hard_labels: &[usize]) -> Vec<f64> {
    hard_labels.iter().enumerate().map(|(i, &l)| soft.row(i)[l]).collect()
}

fn cosine_to_centroids(features: &Tensor, centroids: &Centroids) -> Result<Tensor> {
    let (n, k) = (features.rows(), centroids.classes());
    let mut out = vec![0.0; n * k];
    for c in 0..k {
        let row = centroids.matrix.row(c);
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateInput(format!("centroid {c} is the zero vector")));
        }
    }
    for i in 0..n {
        let q = features.row(i);
        for c in 0..k {
            out[i * k + c] = crate::tensor::cosine_similarity(q, centroids.matrix.row(c))?;
        }
    }
    Tensor::from_vec(&[n, k], out)
}

/// Momentum bank of non-parametric predictions, one simplex row per target
/// sample. Rows are initialized with the first prediction they observe and
/// blended as `h <- beta * h + (1 - beta) * o` afterwards.
#[derive(Debug, Clone)]
pub struct ElrBank {
    rows: Vec<f64>,
    initialized: Vec<bool>,
    classes: usize,
    pub beta: f64,
}

impl ElrBank {
    pub fn new(samples: usize, classes: usize, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid_argument(format!(
                "momentum must be in [0, 1], got {beta}"
            )));
        }
        Ok(ElrBank {
            rows: vec![0.0; samples * classes],
            initialized: vec![false; samples],
            classes,
            beta,
        })
    }

    /// Seed row `i` directly (used by tests and warm starts).
    pub fn set_row(&mut self, i: usize, h: &[f64]) {
        self.rows[i * self.classes..(i + 1) * self.classes].copy_from_slice(h);
        self.initialized[i] = true;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.classes..(i + 1) * self.classes]
    }

    pub fn len(&self) -> usize {
        self.initialized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initialized.is_empty()
    }

    /// Fold a fresh prediction into row `i` and return the updated row.
    pub fn update_row(&mut self, i: usize, o: &[f64]) -> &[f64] {
        let row = &mut self.rows[i * self.classes..(i + 1) * self.classes];
        if self.initialized[i] {
            for (h, &oi) in row.iter_mut().zip(o) {
                *h = self.beta * *h + (1.0 - self.beta) * oi;
            }
        } else {
            row.copy_from_slice(o);
            self.initialized[i] = true;
        }
        &self.rows[i * self.classes..(i + 1) * self.classes]
    }

    /// Check that every initialized row is still a simplex point: sum within
    /// `1e-9` of one, entries no more negative than `-1e-12`.
    pub fn check_simplex(&self) -> Result<()> {
        for (i, &init) in self.initialized.iter().enumerate() {
            if !init {
                continue;
            }
            let row = self.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!("bank row {i} sums to {sum}")));
            }
            if row.iter().any(|&v| v < -1e-12) {
                return Err(Error::Numeric(format!("bank row {i} has a negative entry")));
            }
        }
        Ok(())
    }
}

/// All current target features, aligned with sample indices; refreshed once
/// per epoch when features are re-extracted.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    /// n_t x d_f raw features.
    pub features: Tensor,
    /// Row-normalized copy used for similarity lookups.
    pub unit: Tensor,
}

impl FeatureBank {
    pub fn new(features: Tensor) -> Result<Self> {
        let unit = normalize_rows_tensor(&features)?;
        Ok(FeatureBank { features, unit })
    }

    pub fn refresh(&mut self, features: Tensor) -> Result<()> {
        self.unit = normalize_rows_tensor(&features)?;
        self.features = features;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

pub(crate) fn normalize_rows_tensor(m: &Tensor) -> Result<Tensor> {
    let (r, c) = (m.rows(), m.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = m.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateInput(format!("cannot normalize zero row {i}")));
        }
        for j in 0..c {
            out[i * c + j] = row[j] / norm;
        }
    }
    Tensor::from_vec(&[r, c], out)
}

/// Projection head: FC stack with ReLU inside and an L2-normalized output,
/// so contrastive features always sit on the unit sphere.
#[derive(Debug, Clone)]
pub struct Projector {
    pub mlp: Mlp,
}

impl Projector {
    pub fn init(
        feature_dim: usize,
        hidden: (usize, usize),
        contrast_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Projector { mlp: Mlp::init(&[feature_dim, hidden.0, hidden.1, contrast_dim], rng) }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        self.mlp.register(tape, trainable)
    }

    pub fn forward_on(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let h = self.mlp.forward_on(tape, vars, x);
        tape.normalize_rows(h)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        normalize_rows_tensor(&self.mlp.apply(x)?)
    }
}

/// One row of the per-epoch adaptation report. Loss columns hold the means
/// over the epoch's batches; the epoch-0 row is the pre-adaptation
/// evaluation and carries zero losses by convention.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_con: f64,
    pub loss_elr: f64,
    pub loss_nc: f64,
    pub overall_acc: f64,
    pub per_class_acc: f64,
    pub d_pdd: f64,
}

/// Write the report with the fixed column set
/// `epoch,loss_con,loss_elr,loss_nc,overall_acc,per_class_acc,d_pdd`.
pub fn write_report_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "epoch,loss_con,loss_elr,loss_nc,overall_acc,per_class_acc,d_pdd")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch, r.loss_con, r.loss_elr, r.loss_nc, r.overall_acc, r.per_class_acc, r.d_pdd
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Discrepancy for reporting: `NaN` when some class has no true samples.
pub(crate) fn report_discrepancy(pseudo: &[usize], truth: &[usize], classes: usize) -> f64 {
    crate::metrics::pseudo_label_discrepancy(pseudo, truth, classes).unwrap_or(f64::NAN)
}

/// A serializable model: extractor + frozen classifier, plus the target
/// head when the oracle-ensembled variant produced one.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub kind: String,
    pub model: crate::model::SourceModel,
    pub head: Option<TargetClassifier>,
}

impl ModelBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = crate::modelio::ModelFile::new(self.kind.clone());
        crate::model::write_mlp(&mut f, "extractor", &self.model.extractor);
        crate::model::write_classifier(&mut f, &self.model.classifier);
        if let Some(head) = &self.head {
            f.push_tensor("target_head.weight", head.weight.clone());
            f.push_tensor(
                "target_head.bias",
                Tensor::from_vec(&[1, head.bias.numel()], head.bias.data().to_vec())?,
            );
        }
        f.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = crate::modelio::ModelFile::load(path)?;
        let model = crate::model::SourceModel {
            extractor: crate::model::read_mlp(&f, "extractor")?,
            classifier: crate::model::read_classifier(&f)?,
        };
        let head = if f.tensors_with_prefix("target_head.").is_empty() {
            None
        } else {
            let weight = f.tensor("target_head.weight")?.clone();
            let bias = f.tensor("target_head.bias")?;
            Some(TargetClassifier {
                weight,
                bias: Tensor::from_vec(&[bias.numel()], bias.data().to_vec())?,
            })
        };
        Ok(ModelBundle { kind: f.kind, model, head })
    }

    /// Class probabilities: the classifier alone, or its average with the
    /// target head when one is present.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        match &self.head {
            Some(head) => predict_final(&self.model, head, x),
            None => {
                let q = crate::model::extract_features(&self.model.extractor, x)?;
                crate::model::classify(&self.model.classifier, &q)
            }
        }
    }
}
