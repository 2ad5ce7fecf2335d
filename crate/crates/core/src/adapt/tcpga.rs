//! Oracle-ensembled prototype adaptation for unknown class-distribution
//! shift.
//!
//! The pseudo labels blend two predictors whose margins decide their mix:
//! the centroid predictions of the source model and a zero-shot oracle
//! (simulated here, or loaded from file). A small linear head trained on the
//! blended soft labels learns the target class distribution; final
//! predictions average it with the frozen source classifier.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::cpga::{evaluation_row, gather_rows};
use super::losses::{elr_batch, nc_batch, weighted_infonce};
use super::{
    init_centroids, pseudo_labels, update_centroids, CpgaConfig, ElrBank, EpochRecord,
    FeatureBank, Projector,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{
    argmax_rows, classify, extract_features, shuffle, soft_cross_entropy, SourceModel,
};
use crate::proto::{generate, sample_noise, PrototypeGenerator};
use crate::tensor::{softmax_rows, Sgd, SgdConfig, Tape, Tensor, Var};

/// Zero-shot predictions for every target sample, fixed at construction.
#[derive(Debug, Clone)]
pub struct ZeroShotOracle {
    probs: Tensor,
}

impl ZeroShotOracle {
    /// Simulate an oracle of accuracy `accuracy`: each sample's predicted
    /// class is its true label with that probability, otherwise a uniformly
    /// random wrong label; the one-hot is then smoothed by `smoothing`.
    /// Draws happen once and are cached.
    pub fn simulated(
        true_labels: &[usize],
        classes: usize,
        accuracy: f64,
        smoothing: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(accuracy > 0.0 && accuracy <= 1.0) {
            return Err(Error::invalid_argument(format!(
                "oracle accuracy must be in (0, 1], got {accuracy}"
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid_argument(format!(
                "oracle smoothing must be in [0, 1), got {smoothing}"
            )));
        }
        if let Some(&bad) = true_labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid_argument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Vec::with_capacity(true_labels.len() * classes);
        for &y in true_labels {
            let predicted = if rng.gen::<f64>() < accuracy {
                y
            } else {
                // uniform over the other classes
                let mut wrong = rng.gen_range(0..classes - 1);
                if wrong >= y {
                    wrong += 1;
                }
                wrong
            };
            let mut row = vec![smoothing / classes as f64; classes];
            row[predicted] += 1.0 - smoothing;
            probs.extend(row);
        }
        Ok(ZeroShotOracle {
            probs: Tensor::from_vec(&[true_labels.len(), classes], probs)?,
        })
    }

    /// Load per-sample probabilities from a CSV with header `p0,...,p{K-1}`.
    /// The row count must match the target sample count exactly; rows are
    /// validated as (approximate) simplex points and renormalized.
    pub fn from_csv(path: &Path, expected_samples: usize, classes: usize) -> Result<Self> {
        use std::io::BufRead;
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty oracle file"))??;
        let want: Vec<String> = (0..classes).map(|k| format!("p{k}")).collect();
        if header.trim() != want.join(",") {
            return Err(Error::parse(1, format!("expected header {}", want.join(","))));
        }
        let mut probs = Vec::new();
        let mut rows = 0usize;
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != classes {
                return Err(Error::parse(
                    line_no,
                    format!("expected {classes} probabilities, got {}", fields.len()),
                ));
            }
            let mut row = Vec::with_capacity(classes);
            for f in fields {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::parse(line_no, format!("bad probability {f:?}")))?;
                if !(0.0..=1.0 + 1e-9).contains(&v) {
                    return Err(Error::parse(line_no, format!("probability {v} out of range")));
                }
                row.push(v);
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::parse(line_no, format!("row sums to {sum}, expected 1")));
            }
            probs.extend(row.into_iter().map(|v| v / sum));
            rows += 1;
        }
        if rows != expected_samples {
            return Err(Error::invalid_argument(format!(
                "oracle file has {rows} rows but the target has {expected_samples} samples"
            )));
        }
        Ok(ZeroShotOracle { probs: Tensor::from_vec(&[rows, classes], probs)? })
    }

    /// Cached prediction for one sample.
    pub fn predict(&self, sample: usize) -> &[f64] {
        self.probs.row(sample)
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    /// Hard labels of the cached predictions.
    pub fn hard_labels(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }
}

fn top_two(row: &[f64]) -> (f64, f64) {
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in row {
        if v > best {
            second = best;
            best = v;
        } else if v > second {
            second = v;
        }
    }
    (best, second)
}

/// Margin-based ensemble weights: each predictor's margin is its largest
/// minus second-largest probability; the pair of margins is softmaxed so the
/// weights are positive and sum to one.
pub fn ensemble_weights(oracle_probs: &[f64], model_probs: &[f64]) -> Result<(f64, f64)> {
    if oracle_probs.len() < 2 || model_probs.len() != oracle_probs.len() {
        return Err(Error::invalid_argument(
            "ensemble weights need two probability rows over at least 2 classes",
        ));
    }
    let (c1, c2) = top_two(oracle_probs);
    let (p1, p2) = top_two(model_probs);
    let margin_oracle = c1 - c2;
    let margin_model = p1 - p2;
    let max = margin_oracle.max(margin_model);
    let eo = (margin_oracle - max).exp();
    let em = (margin_model - max).exp();
    Ok((eo / (eo + em), em / (eo + em)))
}

/// Convex blend of the two predictions under the given weights.
pub fn ensemble_prediction(
    oracle_probs: &[f64],
    model_probs: &[f64],
    weight_oracle: f64,
    weight_model: f64,
) -> Vec<f64> {
    oracle_probs
        .iter()
        .zip(model_probs)
        .map(|(c, p)| weight_oracle * c + weight_model * p)
        .collect()
}

/// Confidence of an ensembled prediction: its maximum entry.
pub fn confidence_t(prediction: &[f64]) -> f64 {
    prediction.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Linear classifier head trained on the target during adaptation.
#[derive(Debug, Clone)]
pub struct TargetClassifier {
    /// K x d_f weight.
    pub weight: Tensor,
    /// K biases.
    pub bias: Tensor,
}

impl TargetClassifier {
    pub fn init(classes: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (feature_dim as f64).sqrt();
        let data: Vec<f64> = (0..classes * feature_dim)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        TargetClassifier {
            weight: Tensor::from_vec(&[classes, feature_dim], data).unwrap(),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn logits_on(&self, tape: &mut Tape, weight: Var, bias: Var, q: Var) -> Var {
        let z = tape.matmul_nt(q, weight);
        tape.add_bias(z, bias)
    }

    pub fn probabilities(&self, q: &Tensor) -> Result<Tensor> {
        let (n, d) = (q.rows(), q.cols());
        let k = self.weight.rows();
        if d != self.weight.cols() {
            return Err(Error::invalid_argument(format!(
                "features have {d} columns, target head wants {}",
                self.weight.cols()
            )));
        }
        let mut logits = vec![0.0; n * k];
        for i in 0..n {
            for c in 0..k {
                let dot: f64 =
                    q.row(i).iter().zip(self.weight.row(c)).map(|(a, b)| a * b).sum();
                logits[i * k + c] = dot + self.bias.data()[c];
            }
        }
        softmax_rows(&Tensor::from_vec(&[n, k], logits)?, 1.0)
    }
}

/// Average-ensemble inference: the mean of the frozen source classifier's
/// probabilities and the target head's probabilities.
pub fn predict_final(
    model: &SourceModel,
    head: &TargetClassifier,
    x: &Tensor,
) -> Result<Tensor> {
    let q = extract_features(&model.extractor, x)?;
    let a = classify(&model.classifier, &q)?;
    let b = head.probabilities(&q)?;
    let data: Vec<f64> =
        a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Stage-two hyperparameters for the oracle-ensembled variant.
#[derive(Debug, Clone, Default)]
pub struct TcpgaConfig {
    pub base: CpgaConfig,
    /// Also train the source classifier on the blended soft labels instead
    /// of keeping it frozen. Off by default.
    pub update_source_classifier: bool,
}

/// Adapted model pieces plus the per-epoch report.
pub struct TcpgaOutcome {
    pub model: SourceModel,
    pub projector: Projector,
    pub head: TargetClassifier,
    pub report: Vec<EpochRecord>,
}

/// Run oracle-ensembled prototype adaptation. The oracle must cover every
/// target sample; true labels feed only the report and the simulated oracle.
pub fn adapt_tcpga(
    source: &SourceModel,
    generator: &PrototypeGenerator,
    target: &LabeledDataset,
    oracle: &ZeroShotOracle,
    cfg: &TcpgaConfig,
) -> Result<TcpgaOutcome> {
    cfg.base.validate()?;
    if target.is_empty() {
        return Err(Error::invalid_argument("target dataset is empty"));
    }
    if oracle.len() != target.len() || oracle.classes() != target.classes {
        return Err(Error::invalid_argument(format!(
            "oracle covers {} samples x {} classes, target needs {} x {}",
            oracle.len(),
            oracle.classes(),
            target.len(),
            target.classes
        )));
    }

    let base = &cfg.base;
    let classes = source.classes();
    let n = target.len();
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    let mut model = source.clone();
    let mut projector = Projector::init(
        source.feature_dim(),
        base.projector_hidden,
        base.contrast_dim,
        &mut rng,
    );
    let mut head = TargetClassifier::init(classes, source.feature_dim(), &mut rng);
    let mut sgd_backbone = Sgd::new(SgdConfig {
        learning_rate: base.learning_rate * base.extractor_lr_scale,
        momentum: 0.9,
        weight_decay: 0.0,
    })?;
    let mut sgd_heads = Sgd::new(SgdConfig {
        learning_rate: base.learning_rate,
        momentum: 0.9,
        weight_decay: 0.0,
    })?;

    let mut report = Vec::with_capacity(base.epochs + 1);
    let mut features = extract_features(&model.extractor, &target.features)?;
    let source_pred = argmax_rows(&classify(&model.classifier, &features)?);
    report.push(evaluation_row(0, [0.0; 3], &source_pred, &source_pred, target)?);
    if base.epochs == 0 {
        return Ok(TcpgaOutcome { model, projector, head, report });
    }

    let soft0 = classify(&model.classifier, &features)?;
    let mut centroids = init_centroids(&features, &soft0)?;
    let ensembled = ensemble_all(&features, &centroids, oracle, base.temperature)?;
    let (mut blended, mut hard, mut weights) = ensembled;
    let mut bank = FeatureBank::new(features.clone())?;
    let mut elr = ElrBank::new(n, classes, base.momentum_beta)?;

    let proto_labels: Vec<usize> = (0..classes).collect();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=base.epochs {
        shuffle(&mut order, &mut rng);
        let mut loss_sums = [0.0f64; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(base.batch_size) {
            let z = sample_noise(classes, generator.noise_dim(), &mut rng);
            let prototypes = generate(generator, &proto_labels, &z)?;

            let xb = gather_rows(&target.features, chunk);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| hard[i]).collect();
            let batch_weights: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            let soft_targets = gather_rows(&blended, chunk);

            let mut tape = Tape::new();
            let ext_vars = model.extractor.register(&mut tape, true);
            let proj_vars = projector.register(&mut tape, true);
            let head_w = tape.param(&head.weight);
            let head_b = tape.param(&head.bias);
            let cls_vars = cfg.update_source_classifier.then(|| {
                (tape.param(&model.classifier.direction), tape.param(&model.classifier.scale))
            });

            let x = tape.constant(&xb);
            let qb = model.extractor.forward_on(&mut tape, &ext_vars, x);
            let u = projector.forward_on(&mut tape, &proj_vars, qb)?;
            let pc = tape.constant(&prototypes);
            let v = projector.forward_on(&mut tape, &proj_vars, pc)?;

            let l_con = weighted_infonce(
                &mut tape,
                u,
                v,
                &batch_labels,
                &batch_weights,
                base.temperature,
            )?;
            let head_logits = head.logits_on(&mut tape, head_w, head_b, qb);
            let l_head = soft_cross_entropy(&mut tape, head_logits, &soft_targets);
            let mut total = tape.add(l_con, l_head);

            if let Some((dir, gain)) = cls_vars {
                let cls_logits = model.classifier.logits_on(&mut tape, dir, gain, qb)?;
                let l_cls = soft_cross_entropy(&mut tape, cls_logits, &soft_targets);
                total = tape.add(total, l_cls);
            }

            let mut l_elr_val = 0.0;
            if base.elr_weight > 0.0 {
                let l_elr = elr_batch(&mut tape, u, v, &mut elr, chunk, base.temperature)?;
                l_elr_val = tape.value(l_elr).item();
                let scaled = tape.scale(l_elr, base.elr_weight);
                total = tape.add(total, scaled);
            }
            let mut l_nc_val = 0.0;
            if base.nc_weight > 0.0 {
                let l_nc = nc_batch(&mut tape, qb, &bank, chunk, base.temperature)?;
                l_nc_val = tape.value(l_nc).item();
                let scaled = tape.scale(l_nc, base.nc_weight);
                total = tape.add(total, scaled);
            }
            tape.value(total).assert_finite("adaptation loss")?;
            tape.backward(total)?;

            let ext_grads = model.extractor.grads(&tape, &ext_vars);
            sgd_backbone.step(&mut model.extractor.params_mut(), &ext_grads)?;

            let mut grads = projector.mlp.grads(&tape, &proj_vars);
            grads.push(tape.grad(head_w));
            grads.push(tape.grad(head_b));
            let mut params = projector.mlp.params_mut();
            params.push(&mut head.weight);
            params.push(&mut head.bias);
            if let Some((dir, gain)) = cls_vars {
                grads.push(tape.grad(dir));
                grads.push(tape.grad(gain));
                params.push(&mut model.classifier.direction);
                params.push(&mut model.classifier.scale);
            }
            sgd_heads.step(&mut params, &grads)?;

            loss_sums[0] += tape.value(l_con).item();
            loss_sums[1] += l_elr_val;
            loss_sums[2] += l_nc_val;
            batches += 1;
        }

        features = extract_features(&model.extractor, &target.features)?;
        bank.refresh(features.clone())?;
        centroids = update_centroids(&features, &hard, &centroids)?;
        let refreshed = ensemble_all(&features, &centroids, oracle, base.temperature)?;
        blended = refreshed.0;
        hard = refreshed.1;
        weights = refreshed.2;

        let pred = argmax_rows(&predict_final(&model, &head, &target.features)?);
        let means = loss_sums.map(|s| s / batches as f64);
        let row = evaluation_row(epoch, means, &pred, &hard, target)?;
        if log::log_enabled!(log::Level::Debug) {
            let acc = |p: &[usize]| {
                crate::metrics::accuracies(p, &target.labels, classes)
                    .map(|r| r.overall_acc)
                    .unwrap_or(f64::NAN)
            };
            let gy = argmax_rows(&classify(&model.classifier, &features)?);
            let gt = argmax_rows(&head.probabilities(&features)?);
            log::debug!(
                "tcpga epoch {epoch}: final {:.3} gy {:.3} gt {:.3} pseudo {:.3} d_pdd {:.2}",
                row.overall_acc,
                acc(&gy),
                acc(&gt),
                acc(&hard),
                row.d_pdd
            );
        }
        report.push(row);
    }

    Ok(TcpgaOutcome { model, projector, head, report })
}

/// Blend the centroid predictions with the oracle for every sample. Returns
/// the blended soft predictions, their hard labels, and the per-sample
/// confidence weights.
fn ensemble_all(
    features: &Tensor,
    centroids: &super::Centroids,
    oracle: &ZeroShotOracle,
    temperature: f64,
) -> Result<(Tensor, Vec<usize>, Vec<f64>)> {
    let (model_soft, _) = pseudo_labels(features, centroids, temperature)?;
    let n = features.rows();
    let k = model_soft.cols();
    let mut blended = Vec::with_capacity(n * k);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let (wo, wm) = ensemble_weights(oracle.predict(i), model_soft.row(i))?;
        let row = ensemble_prediction(oracle.predict(i), model_soft.row(i), wo, wm);
        weights.push(confidence_t(&row));
        blended.extend(row);
    }
    let blended = Tensor::from_vec(&[n, k], blended)?;
    let hard = argmax_rows(&blended);
    Ok((blended, hard, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn perfect_oracle_is_one_hot() {
        let labels = [2usize, 0, 1];
        let o = ZeroShotOracle::simulated(&labels, 3, 1.0, 0.0, 7).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let row = o.predict(i);
            assert_eq!(row[y], 1.0);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn smoothed_oracle_closed_form() {
        // accuracy 1, smoothing 0.2, K=4 -> [0.85, 0.05, 0.05, 0.05].
        let o = ZeroShotOracle::simulated(&[0], 4, 1.0, 0.2, 1).unwrap();
        let row = o.predict(0);
        assert!((row[0] - 0.85).abs() < 1e-15);
        for v in &row[1..] {
            assert!((v - 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_accuracy_concentrates() {
        let mut r = rng(5);
        let labels: Vec<usize> = (0..10_000).map(|_| r.gen_range(0..6)).collect();
        let o = ZeroShotOracle::simulated(&labels, 6, 0.85, 0.2, 99).unwrap();
        let hard = o.hard_labels();
        let acc = hard.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / 10_000.0;
        assert!((acc - 0.85).abs() < 0.02, "oracle accuracy {acc}");
    }

    #[test]
    fn oracle_cache_is_stable() {
        let labels = [0usize, 1, 2, 1];
        let o = ZeroShotOracle::simulated(&labels, 3, 0.6, 0.1, 3).unwrap();
        for i in 0..labels.len() {
            assert_eq!(o.predict(i), o.predict(i));
        }
    }

    #[test]
    fn ensemble_weights_symmetric_and_closed_form() {
        // equal margins -> exactly (0.5, 0.5)
        let (a, b) = ensemble_weights(&[0.7, 0.3], &[0.3, 0.7]).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(b, 0.5);

        // margins (0.8, 0): softmax -> e^0.8 / (e^0.8 + 1)
        let (a, b) = ensemble_weights(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        let want = (0.8f64).exp() / ((0.8f64).exp() + 1.0);
        assert!((a - want).abs() < 1e-12);
        assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ensemble_weights_sum_to_one_randomized() {
        let mut r = rng(11);
        for _ in 0..1000 {
            let k = r.gen_range(2..7);
            let mk = |r: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
            };
            let c = mk(&mut r);
            let p = mk(&mut r);
            let (a, b) = ensemble_weights(&c, &p).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
            assert!(a > 0.0 && a < 1.0);
            let blend = ensemble_prediction(&c, &p, a, b);
            let sum: f64 = blend.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_weight_returns_oracle_prediction() {
        let c = [0.8, 0.2];
        let p = [0.6, 0.4];
        assert_eq!(ensemble_prediction(&c, &p, 1.0, 0.0), c.to_vec());
        // (0.5, 0.5) -> [0.7, 0.3]
        let blend = ensemble_prediction(&c, &p, 0.5, 0.5);
        assert!((blend[0] - 0.7).abs() < 1e-15);
        assert!((blend[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn confidence_is_the_max_entry() {
        assert_eq!(confidence_t(&[0.2, 0.5, 0.3]), 0.5);
        assert_eq!(confidence_t(&[0.0, 1.0]), 1.0);
        let k = 8;
        let uniform = vec![1.0 / k as f64; k];
        assert!((confidence_t(&uniform) - 1.0 / k as f64).abs() < 1e-15);
    }

    #[test]
    fn average_ensemble_prediction_cases() {
        let mut r = rng(13);
        // idempotence: identical heads average to themselves; and the argmax
        // of the average can only differ from both when they disagree.
        for _ in 0..1000 {
            let k = 4;
            let mk = |r: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
            };
            let a = mk(&mut r);
            let b = mk(&mut r);
            let avg: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let am = argmax_slice(&a);
            let bm = argmax_slice(&b);
            let vm = argmax_slice(&avg);
            if am == bm {
                assert_eq!(vm, am, "agreement must be preserved by averaging");
            }
        }
    }

    fn argmax_slice(v: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn target_head_loss_closed_forms() {
        use crate::model::soft_cross_entropy;
        use crate::tensor::Tape;

        // Uniform targets against uniform outputs: loss = log K.
        let k = 8;
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::from_vec(&[2, k], vec![0.0; 2 * k]).unwrap());
        let targets = Tensor::from_vec(&[2, k], vec![1.0 / k as f64; 2 * k]).unwrap();
        let loss = soft_cross_entropy(&mut tape, logits, &targets);
        assert!((tape.value(loss).item() - (k as f64).ln()).abs() < 1e-12);

        // One-hot target matched by a saturated prediction: loss ~ 0.
        let mut tape = Tape::new();
        let mut row = vec![0.0; k];
        row[3] = 60.0;
        let logits = tape.constant(&Tensor::from_vec(&[1, k], row).unwrap());
        let mut onehot = vec![0.0; k];
        onehot[3] = 1.0;
        let targets = Tensor::from_vec(&[1, k], onehot).unwrap();
        let loss = soft_cross_entropy(&mut tape, logits, &targets);
        assert!(tape.value(loss).item() < 1e-10);
    }

    #[test]
    fn final_prediction_is_the_elementwise_mean() {
        use crate::model::{classify, extract_features, Mlp, SourceModel, WeightNormClassifier};

        let mut r = rng(17);
        let model = SourceModel {
            extractor: Mlp::init(&[5, 10, 6], &mut r),
            classifier: WeightNormClassifier::init(4, 6, &mut r),
        };
        let head = TargetClassifier::init(4, 6, &mut r);
        let x = Tensor::from_vec(&[3, 5], (0..15).map(|i| (i as f64 * 0.47).sin()).collect())
            .unwrap();
        let combined = predict_final(&model, &head, &x).unwrap();
        let q = extract_features(&model.extractor, &x).unwrap();
        let a = classify(&model.classifier, &q).unwrap();
        let b = head.probabilities(&q).unwrap();
        for i in 0..combined.numel() {
            assert!((combined.data()[i] - 0.5 * (a.data()[i] + b.data()[i])).abs() < 1e-15);
            assert!(combined.data()[i] >= 0.0);
        }
        for i in 0..3 {
            let sum: f64 = combined.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_csv_round_trip_and_mismatch() {
        let dir = std::env::temp_dir().join("protoadapt_oracle_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("oracle.csv");
        std::fs::write(&path, "p0,p1,p2\n0.7,0.2,0.1\n0.1,0.8,0.1\n").unwrap();
        let o = ZeroShotOracle::from_csv(&path, 2, 3).unwrap();
        assert!((o.predict(0)[0] - 0.7).abs() < 1e-12);
        assert!(matches!(
            ZeroShotOracle::from_csv(&path, 5, 3),
            Err(Error::InvalidArgument(_))
        ));

        let bad = dir.join("bad.csv");
        std::fs::write(&bad, "p0,p1,p2\n0.7,0.2,0.4\n").unwrap();
        assert!(ZeroShotOracle::from_csv(&bad, 1, 3).is_err());
    }
}
