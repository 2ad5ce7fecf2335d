//! The given source model: an MLP feature extractor and a weight-normalized
//! classifier, trained with label-smoothed cross-entropy on (possibly
//! heavily skewed) source data. No rebalancing is applied: the model is
//! allowed to inherit whatever class bias the source distribution induces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::modelio::ModelFile;
use crate::tensor::{Sgd, SgdConfig, Tape, Tensor, Var};
use crate::{data::LabeledDataset, tensor::softmax_rows};

/// Fully connected stack with ReLU between layers and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    /// One (in x out) weight per layer.
    pub weights: Vec<Tensor>,
    /// One length-out bias per layer.
    pub biases: Vec<Tensor>,
}

/// Tape handles for one registration of an [`Mlp`]'s parameters.
pub struct MlpVars {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl Mlp {
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * std
                })
                .collect();
            weights.push(Tensor::from_vec(&[fan_in, fan_out], data).unwrap());
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Mlp { dims: dims.to_vec(), weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Register the parameters on a tape (trainable or frozen).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let reg = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        MlpVars {
            weights: self.weights.iter().map(|w| reg(tape, w)).collect(),
            biases: self.biases.iter().map(|b| reg(tape, b)).collect(),
        }
    }

    /// Forward pass on the tape through registered parameters.
    pub fn forward_on(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Var {
        let last = self.weights.len() - 1;
        let mut h = x;
        for i in 0..=last {
            let z = tape.matmul(h, vars.weights[i]);
            h = tape.add_bias(z, vars.biases[i]);
            if i != last {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Plain forward pass without gradient tracking.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::invalid_argument(format!(
                "input has {} columns, extractor wants {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let n = x.rows();
        let last = self.weights.len() - 1;
        let mut h = x.data().to_vec();
        let mut h_cols = x.cols();
        for i in 0..=last {
            let (win, wout) = (self.dims[i], self.dims[i + 1]);
            debug_assert_eq!(h_cols, win);
            let wd = self.weights[i].data();
            let bd = self.biases[i].data();
            let mut out = vec![0.0; n * wout];
            for r in 0..n {
                let hrow = &h[r * win..(r + 1) * win];
                let orow = &mut out[r * wout..(r + 1) * wout];
                orow.copy_from_slice(bd);
                for (l, &hv) in hrow.iter().enumerate() {
                    if hv == 0.0 {
                        continue;
                    }
                    let wrow = &wd[l * wout..(l + 1) * wout];
                    for j in 0..wout {
                        orow[j] += hv * wrow[j];
                    }
                }
            }
            if i != last {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            h = out;
            h_cols = wout;
        }
        Tensor::from_vec(&[n, h_cols], h)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().chain(self.biases.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    /// Gradients for this registration, in [`Mlp::params`] order.
    pub fn grads(&self, tape: &Tape, vars: &MlpVars) -> Vec<Tensor> {
        vars.weights
            .iter()
            .chain(vars.biases.iter())
            .map(|&v| tape.grad(v))
            .collect()
    }
}

/// The feature extractor G in the source model.
pub type FeatureExtractor = Mlp;

/// Classifier with structurally unit-norm class directions: logits are
/// `scale[k] * dot(direction_hat[k], q)` where `direction_hat` re-normalizes
/// `direction` on every forward pass.
#[derive(Debug, Clone)]
pub struct WeightNormClassifier {
    /// K x d_f unnormalized class directions.
    pub direction: Tensor,
    /// K per-class positive scales.
    pub scale: Tensor,
}

impl WeightNormClassifier {
    pub fn init(classes: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (feature_dim as f64).sqrt();
        let data: Vec<f64> = (0..classes * feature_dim)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        WeightNormClassifier {
            direction: Tensor::from_vec(&[classes, feature_dim], data).unwrap(),
            scale: Tensor::from_vec(&[classes], vec![1.0; classes]).unwrap(),
        }
    }

    pub fn classes(&self) -> usize {
        self.direction.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.direction.cols()
    }

    /// K x d_f matrix of unit-norm rows scaled by the per-class gains.
    pub fn effective_weight(&self) -> Tensor {
        let (k, d) = (self.classes(), self.feature_dim());
        let mut out = vec![0.0; k * d];
        for i in 0..k {
            let row = self.direction.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let g = self.scale.data()[i];
            for j in 0..d {
                out[i * d + j] = g * row[j] / norm;
            }
        }
        Tensor::from_vec(&[k, d], out).unwrap()
    }

    /// Logits on a tape, with gradient flow into `direction` and `scale`
    /// when they were registered as parameters.
    pub fn logits_on(&self, tape: &mut Tape, dir: Var, scale: Var, q: Var) -> Result<Var> {
        let unit = tape.normalize_rows(dir)?;
        let weight = tape.scale_rows(unit, scale);
        Ok(tape.matmul_nt(q, weight))
    }

    /// Plain logits without gradient tracking.
    pub fn logits(&self, q: &Tensor) -> Result<Tensor> {
        if q.cols() != self.feature_dim() {
            return Err(Error::invalid_argument(format!(
                "features have {} columns, classifier wants {}",
                q.cols(),
                self.feature_dim()
            )));
        }
        let w = self.effective_weight();
        let (n, k) = (q.rows(), self.classes());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let qrow = q.row(i);
            for c in 0..k {
                let wrow = w.row(c);
                out[i * k + c] = qrow.iter().zip(wrow).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::from_vec(&[n, k], out)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.direction, &self.scale]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.direction, &mut self.scale]
    }
}

/// The pre-trained artifact adaptation starts from.
#[derive(Debug, Clone)]
pub struct SourceModel {
    pub extractor: FeatureExtractor,
    pub classifier: WeightNormClassifier,
}

impl SourceModel {
    pub fn classes(&self) -> usize {
        self.classifier.classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = ModelFile::new("source");
        write_mlp(&mut f, "extractor", &self.extractor);
        write_classifier(&mut f, &self.classifier);
        f.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = ModelFile::load(path)?;
        if f.kind != "source" {
            return Err(Error::invalid_argument(format!(
                "expected a source model file, got kind {:?}",
                f.kind
            )));
        }
        Ok(SourceModel {
            extractor: read_mlp(&f, "extractor")?,
            classifier: read_classifier(&f)?,
        })
    }
}

pub(crate) fn write_mlp(f: &mut ModelFile, prefix: &str, mlp: &Mlp) {
    for (i, (w, b)) in mlp.weights.iter().zip(&mlp.biases).enumerate() {
        f.push_tensor(format!("{prefix}.layer{i}.weight"), w.clone());
        let bias = Tensor::from_vec(&[1, b.numel()], b.data().to_vec()).unwrap();
        f.push_tensor(format!("{prefix}.layer{i}.bias"), bias);
    }
}

pub(crate) fn read_mlp(f: &ModelFile, prefix: &str) -> Result<Mlp> {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for i in 0.. {
        let wname = format!("{prefix}.layer{i}.weight");
        if f.tensors_with_prefix(&wname).is_empty() {
            break;
        }
        let w = f.tensor(&wname)?.clone();
        let b = f.tensor(&format!("{prefix}.layer{i}.bias"))?;
        biases.push(Tensor::from_vec(&[b.numel()], b.data().to_vec())?);
        weights.push(w);
    }
    if weights.is_empty() {
        return Err(Error::invalid_argument(format!(
            "model file has no layers under {prefix:?}"
        )));
    }
    let mut dims = vec![weights[0].rows()];
    for w in &weights {
        dims.push(w.cols());
    }
    Ok(Mlp { dims, weights, biases })
}

pub(crate) fn write_classifier(f: &mut ModelFile, c: &WeightNormClassifier) {
    f.push_tensor("classifier.direction", c.direction.clone());
    f.push_tensor(
        "classifier.scale",
        Tensor::from_vec(&[1, c.scale.numel()], c.scale.data().to_vec()).unwrap(),
    );
}

pub(crate) fn read_classifier(f: &ModelFile) -> Result<WeightNormClassifier> {
    let direction = f.tensor("classifier.direction")?.clone();
    let scale = f.tensor("classifier.scale")?;
    Ok(WeightNormClassifier {
        direction,
        scale: Tensor::from_vec(&[scale.numel()], scale.data().to_vec())?,
    })
}

/// Extract features for a batch of inputs.
pub fn extract_features(extractor: &FeatureExtractor, x: &Tensor) -> Result<Tensor> {
    let q = extractor.apply(x)?;
    q.assert_finite("extracted features")?;
    Ok(q)
}

/// Class probabilities (softmax at temperature 1 over weight-normalized
/// logits). Rows sum to 1.
pub fn classify(classifier: &WeightNormClassifier, q: &Tensor) -> Result<Tensor> {
    let logits = classifier.logits(q)?;
    softmax_rows(&logits, 1.0)
}

/// Source-training hyperparameters.
#[derive(Debug, Clone)]
pub struct SourceTrainConfig {
    /// Label smoothing epsilon in [0, 1).
    pub label_smoothing: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Hidden layer widths of the extractor.
    pub hidden: Vec<usize>,
    /// Extractor output dimension d_f.
    pub feature_dim: usize,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            label_smoothing: 0.1,
            learning_rate: 0.05,
            epochs: 120,
            batch_size: 64,
            seed: 0,
            hidden: vec![64],
            feature_dim: 32,
        }
    }
}

/// Train a source model with smoothed cross-entropy. The per-class targets
/// are `(1 - eps) * onehot + eps / K`; no class rebalancing of any kind.
/// Deterministic for a fixed config.
pub fn train_source(data: &LabeledDataset, cfg: &SourceTrainConfig) -> Result<SourceModel> {
    if data.is_empty() {
        return Err(Error::invalid_argument("cannot train on an empty dataset"));
    }
    if !(0.0..1.0).contains(&cfg.label_smoothing) {
        return Err(Error::invalid_argument(format!(
            "label smoothing must be in [0, 1), got {}",
            cfg.label_smoothing
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid_argument("batch size must be positive"));
    }

    let classes = data.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![data.input_dim()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(cfg.feature_dim);
    let mut extractor = Mlp::init(&dims, &mut rng);
    let mut classifier = WeightNormClassifier::init(classes, cfg.feature_dim, &mut rng);

    let mut sgd = Sgd::new(SgdConfig {
        learning_rate: cfg.learning_rate,
        momentum: 0.9,
        weight_decay: 0.0,
    })?;

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (xb, targets) = smoothed_batch(data, chunk, cfg.label_smoothing);

            let mut tape = Tape::new();
            let ext_vars = extractor.register(&mut tape, true);
            let dir = tape.param(&classifier.direction);
            let gain = tape.param(&classifier.scale);
            let x = tape.constant(&xb);
            let q = extractor.forward_on(&mut tape, &ext_vars, x);
            let logits = classifier.logits_on(&mut tape, dir, gain, q)?;
            let loss = soft_cross_entropy(&mut tape, logits, &targets);
            tape.value(loss).assert_finite("source training loss")?;
            tape.backward(loss)?;

            let mut grads = extractor.grads(&tape, &ext_vars);
            grads.push(tape.grad(dir));
            grads.push(tape.grad(gain));
            let mut params = extractor.params_mut();
            params.push(&mut classifier.direction);
            params.push(&mut classifier.scale);
            sgd.step(&mut params, &grads)?;
        }
    }

    Ok(SourceModel { extractor, classifier })
}

/// Mean soft-label cross-entropy: -(1/B) sum_i sum_k t_ik log p_ik.
pub fn soft_cross_entropy(tape: &mut Tape, logits: Var, targets: &Tensor) -> Var {
    let lp = tape.log_softmax_rows(logits, 1.0);
    let t = tape.constant(targets);
    let prod = tape.mul(t, lp);
    let rows = tape.row_sum(prod);
    let mean = tape.mean_all(rows);
    tape.neg(mean)
}

/// Smoothed one-hot targets for one class index.
pub fn smoothed_target(label: usize, classes: usize, eps: f64) -> Vec<f64> {
    let mut row = vec![eps / classes as f64; classes];
    row[label] += 1.0 - eps;
    row
}

fn smoothed_batch(data: &LabeledDataset, idx: &[usize], eps: f64) -> (Tensor, Tensor) {
    let d = data.input_dim();
    let k = data.classes;
    let mut x = Vec::with_capacity(idx.len() * d);
    let mut t = Vec::with_capacity(idx.len() * k);
    for &i in idx {
        x.extend_from_slice(data.features.row(i));
        t.extend_from_slice(&smoothed_target(data.labels[i], k, eps));
    }
    (
        Tensor::from_vec(&[idx.len(), d], x).unwrap(),
        Tensor::from_vec(&[idx.len(), k], t).unwrap(),
    )
}

pub(crate) fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Hard predictions of the source model on raw inputs.
pub fn predict_labels(model: &SourceModel, x: &Tensor) -> Result<Vec<usize>> {
    let q = extract_features(&model.extractor, x)?;
    let probs = classify(&model.classifier, &q)?;
    Ok(argmax_rows(&probs))
}

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax_rows(m: &Tensor) -> Vec<usize> {
    let (r, c) = (m.rows(), m.cols());
    (0..r)
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain_pair, DomainShiftSpec};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut mlp = Mlp::init(&[3, 4, 2], &mut rng(0));
        for w in &mut mlp.weights {
            for v in w.data_mut() {
                *v = 0.0;
            }
        }
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let q = mlp.apply(&x).unwrap();
        assert!(q.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_sample_matches_batched_row() {
        let mlp = Mlp::init(&[4, 8, 3], &mut rng(1));
        let x = Tensor::from_vec(
            &[3, 4],
            (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect(),
        )
        .unwrap();
        let batched = mlp.apply(&x).unwrap();
        for i in 0..3 {
            let single =
                mlp.apply(&Tensor::from_vec(&[1, 4], x.row(i).to_vec()).unwrap()).unwrap();
            for (a, b) in single.data().iter().zip(batched.row(i)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        // Independent oracle: explicit per-neuron loops.
        let mlp = Mlp::init(&[5, 7, 4], &mut rng(2));
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.77).sin()).collect();
        let xt = Tensor::from_vec(&[2, 5], x.clone()).unwrap();
        let got = mlp.apply(&xt).unwrap();

        for r in 0..2 {
            let inp = &x[r * 5..(r + 1) * 5];
            let mut h = [0.0; 7];
            for j in 0..7 {
                let mut acc = mlp.biases[0].data()[j];
                for (l, item) in inp.iter().enumerate() {
                    acc += item * mlp.weights[0].data()[l * 7 + j];
                }
                h[j] = acc.max(0.0);
            }
            for j in 0..4 {
                let mut acc = mlp.biases[1].data()[j];
                for (l, item) in h.iter().enumerate() {
                    acc += item * mlp.weights[1].data()[l * 4 + j];
                }
                assert!((acc - got.row(r)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classify_uniform_when_scales_are_zero() {
        let mut c = WeightNormClassifier::init(5, 8, &mut rng(3));
        for v in c.scale.data_mut() {
            *v = 0.0;
        }
        let q = Tensor::from_vec(&[2, 8], (0..16).map(|i| i as f64).collect()).unwrap();
        let p = classify(&c, &q).unwrap();
        for v in p.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn classify_saturates_along_a_class_direction() {
        let mut c = WeightNormClassifier::init(3, 4, &mut rng(4));
        // Make class directions orthogonal and crank the gain of class 1.
        c.direction = Tensor::from_vec(
            &[3, 4],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        c.scale = Tensor::from_vec(&[3], vec![50.0, 50.0, 50.0]).unwrap();
        let q = Tensor::from_vec(&[1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let p = classify(&c, &q).unwrap();
        assert!(p.data()[1] > 0.999999);
    }

    #[test]
    fn classify_matches_brute_force_softmax() {
        let c = WeightNormClassifier::init(4, 6, &mut rng(5));
        let q = Tensor::from_vec(&[3, 6], (0..18).map(|i| (i as f64 * 0.31).cos()).collect())
            .unwrap();
        let got = classify(&c, &q).unwrap();
        for i in 0..3 {
            let mut logits = [0.0; 4];
            for k in 0..4 {
                let row = c.direction.row(k);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = row.iter().zip(q.row(i)).map(|(a, b)| a * b).sum();
                logits[k] = c.scale.data()[k] * dot / norm;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for k in 0..4 {
                assert!((got.row(i)[k] - exps[k] / sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smoothed_targets_closed_form() {
        // eps=0.1, K=4, class 0 -> [0.925, 0.025, 0.025, 0.025]
        let t = smoothed_target(0, 4, 0.1);
        assert!((t[0] - 0.925).abs() < 1e-15);
        for v in &t[1..] {
            assert!((v - 0.025).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_smoothing_reduces_to_plain_cross_entropy() {
        let k = 3;
        let logits = Tensor::from_vec(&[2, 3], vec![1.0, -0.5, 0.3, 0.0, 2.0, -1.0]).unwrap();
        let labels = [2usize, 1];

        let mut tape = Tape::new();
        let lv = tape.constant(&logits);
        let targets = Tensor::from_vec(
            &[2, 3],
            labels.iter().flat_map(|&l| smoothed_target(l, k, 0.0)).collect(),
        )
        .unwrap();
        let loss = soft_cross_entropy(&mut tape, lv, &targets);
        let got = tape.value(loss).item();

        // Plain CE computed directly.
        let mut want = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            want -= row[l] - lse;
        }
        want /= labels.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn training_separable_blobs_reaches_high_accuracy() {
        let shift = DomainShiftSpec {
            rotation_angle: 0.0,
            translation_scale: 0.0,
            noise_sigma_source: 0.4,
            noise_sigma_target: 0.4,
            mean_separation: 3.0,
        };
        for seed in 0..3u64 {
            let (source, _) =
                generate_domain_pair(seed, 2, 8, &[100, 100], &[10, 10], &shift).unwrap();
            let cfg = SourceTrainConfig {
                epochs: 60,
                seed,
                hidden: vec![32],
                feature_dim: 16,
                ..SourceTrainConfig::default()
            };
            let model = train_source(&source, &cfg).unwrap();
            let pred = predict_labels(&model, &source.features).unwrap();
            let correct =
                pred.iter().zip(&source.labels).filter(|(a, b)| a == b).count() as f64;
            let acc = correct / source.len() as f64;
            assert!(acc >= 0.99, "seed {seed}: train accuracy {acc}");
        }
    }

    #[test]
    fn effective_weight_rows_stay_unit_norm_through_training() {
        let shift = DomainShiftSpec {
            rotation_angle: 0.0,
            translation_scale: 0.0,
            noise_sigma_source: 0.6,
            noise_sigma_target: 0.6,
            mean_separation: 2.0,
        };
        let (source, _) = generate_domain_pair(7, 3, 6, &[30, 30, 30], &[5, 5, 5], &shift).unwrap();
        let cfg = SourceTrainConfig {
            epochs: 5,
            seed: 7,
            hidden: vec![16],
            feature_dim: 8,
            ..SourceTrainConfig::default()
        };
        let model = train_source(&source, &cfg).unwrap();
        let w = model.classifier.effective_weight();
        for i in 0..w.rows() {
            let norm_over_gain = {
                let g = model.classifier.scale.data()[i];
                let norm = w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                norm / g.abs()
            };
            assert!((norm_over_gain - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = LabeledDataset::new(Tensor::zeros(&[0, 4]), vec![], 3, "empty").unwrap();
        assert!(train_source(&data, &SourceTrainConfig::default()).is_err());
    }

    #[test]
    fn model_round_trips_through_disk() {
        let dir = std::env::temp_dir().join("protoadapt_model_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("source.txt");
        let mut r = rng(11);
        let model = SourceModel {
            extractor: Mlp::init(&[6, 12, 8], &mut r),
            classifier: WeightNormClassifier::init(4, 8, &mut r),
        };
        model.save(&path).unwrap();
        let loaded = SourceModel::load(&path).unwrap();
        assert_eq!(loaded.extractor.dims, model.extractor.dims);
        for (a, b) in loaded.extractor.params().iter().zip(model.extractor.params()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(loaded.classifier.direction.data(), model.classifier.direction.data());
        assert_eq!(loaded.classifier.scale.data(), model.classifier.scale.data());
    }
}
