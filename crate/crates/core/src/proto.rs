//! Stage one: train a class-conditional generator against the frozen source
//! classifier so that generated prototypes are classified as their
//! conditioning class, collapse within a class, and spread apart across
//! classes.
//!
//! The generator gates a learned class embedding with uniform noise
//! (elementwise product) and maps the result through a small FC stack into
//! extractor feature space. Training combines the classifier's cross-entropy
//! with an InfoNCE term over cosine similarities: one same-class positive and
//! one prototype from every other class as negatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{Mlp, MlpVars, WeightNormClassifier};
use crate::modelio::ModelFile;
use crate::tensor::{cosine_similarity, Sgd, SgdConfig, Tape, Tensor, Var};

/// Class-conditional prototype generator.
#[derive(Debug, Clone)]
pub struct PrototypeGenerator {
    /// K x z_dim class embedding table.
    pub embedding: Tensor,
    /// FC stack z_dim -> hidden -> d_f, ReLU inside, linear output.
    pub stack: Mlp,
}

/// Tape registration of the generator parameters.
pub struct GeneratorVars {
    embedding: Var,
    stack: MlpVars,
}

impl PrototypeGenerator {
    pub fn init(
        classes: usize,
        noise_dim: usize,
        hidden: usize,
        feature_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let data: Vec<f64> = (0..classes * noise_dim).map(|_| rng.sample(StandardNormal)).collect();
        PrototypeGenerator {
            embedding: Tensor::from_vec(&[classes, noise_dim], data).unwrap(),
            stack: Mlp::init(&[noise_dim, hidden, feature_dim], rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.embedding.rows()
    }

    pub fn noise_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.stack.output_dim()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> GeneratorVars {
        let embedding =
            if trainable { tape.param(&self.embedding) } else { tape.constant(&self.embedding) };
        GeneratorVars { embedding, stack: self.stack.register(tape, trainable) }
    }

    /// Tape forward: prototypes for `labels` under noise `z` (one row per
    /// label, entries in [0, 1)).
    pub fn generate_on(
        &self,
        tape: &mut Tape,
        vars: &GeneratorVars,
        labels: &[usize],
        z: Var,
    ) -> Var {
        let gates = tape.embed(vars.embedding, labels);
        let gated = tape.mul(gates, z);
        self.stack.forward_on(tape, &vars.stack, gated)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![&mut self.embedding];
        v.extend(self.stack.params_mut());
        v
    }

    pub fn grads(&self, tape: &Tape, vars: &GeneratorVars) -> Vec<Tensor> {
        let mut g = vec![tape.grad(vars.embedding)];
        g.extend(self.stack.grads(tape, &vars.stack));
        g
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = ModelFile::new("generator");
        f.set_meta("classes", self.classes() as i64);
        f.set_meta("noise_dim", self.noise_dim() as i64);
        f.push_tensor("embedding", self.embedding.clone());
        crate::model::write_mlp(&mut f, "stack", &self.stack);
        f.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = ModelFile::load(path)?;
        if f.kind != "generator" {
            return Err(Error::invalid_argument(format!(
                "expected a generator file, got kind {:?}",
                f.kind
            )));
        }
        Ok(PrototypeGenerator {
            embedding: f.tensor("embedding")?.clone(),
            stack: crate::model::read_mlp(&f, "stack")?,
        })
    }
}

/// Plain (no-gradient) prototype generation. `z` must be labels.len() x
/// z_dim with entries in [0, 1); every label must be < K.
pub fn generate(gen: &PrototypeGenerator, labels: &[usize], z: &Tensor) -> Result<Tensor> {
    let k = gen.classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid_argument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    if z.rows() != labels.len() || z.cols() != gen.noise_dim() {
        return Err(Error::invalid_argument(format!(
            "noise must be {} x {}, got {:?}",
            labels.len(),
            gen.noise_dim(),
            z.shape()
        )));
    }
    let d = gen.noise_dim();
    let mut gated = Vec::with_capacity(labels.len() * d);
    for (i, &l) in labels.iter().enumerate() {
        let e = gen.embedding.row(l);
        let zr = z.row(i);
        gated.extend(e.iter().zip(zr).map(|(a, b)| a * b));
    }
    gen.stack.apply(&Tensor::from_vec(&[labels.len(), d], gated)?)
}

/// Draw uniform noise rows in [0, 1).
pub fn sample_noise(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * dim).map(|_| rng.gen::<f64>()).collect();
    Tensor::from_vec(&[rows, dim], data).unwrap()
}

/// Classifier cross-entropy over generated prototypes: the mean negative log
/// probability the frozen classifier assigns to each conditioning class.
pub fn loss_proto_ce(
    tape: &mut Tape,
    prototypes: Var,
    labels: &[usize],
    classifier: &WeightNormClassifier,
) -> Var {
    let w = tape.constant(&classifier.effective_weight());
    let logits = tape.matmul_nt(prototypes, w);
    let lp = tape.log_softmax_rows(logits, 1.0);
    let picked = tape.gather_cols(lp, labels);
    let mean = tape.mean_all(picked);
    tape.neg(mean)
}

/// InfoNCE over prototype cosine similarities: for every anchor, one random
/// same-class positive and one random prototype from each other class as
/// negatives. Every class must contribute at least two prototypes.
pub fn loss_proto_con(
    tape: &mut Tape,
    prototypes: Var,
    labels: &[usize],
    classes: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid_argument("temperature must be > 0"));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid_argument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        members[l].push(i);
    }
    if let Some(k) = members.iter().position(|m| m.len() < 2) {
        return Err(Error::InvalidBatch(format!(
            "class {k} has {} prototypes in the batch; need at least 2",
            members[k].len()
        )));
    }

    let b = labels.len();
    // Column selection per anchor: positive first, then one negative per
    // other class.
    let mut cols = Vec::with_capacity(b * classes);
    for (i, &l) in labels.iter().enumerate() {
        let same: Vec<usize> = members[l].iter().copied().filter(|&j| j != i).collect();
        cols.push(same[rng.gen_range(0..same.len())]);
        for (c, group) in members.iter().enumerate() {
            if c == l {
                continue;
            }
            cols.push(group[rng.gen_range(0..group.len())]);
        }
    }

    let unit = tape.normalize_rows(prototypes)?;
    let sims = tape.matmul_nt(unit, unit);
    let picked = tape.select_cols(sims, &cols, classes);
    let lp = tape.log_softmax_rows(picked, temperature);
    let pos = tape.gather_cols(lp, &vec![0; b]);
    let mean = tape.mean_all(pos);
    Ok(tape.neg(mean))
}

/// Stage-one hyperparameters.
#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub epochs: usize,
    /// Prototypes drawn per class per batch; at least 2 so every anchor has
    /// a positive.
    pub prototypes_per_class: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub noise_dim: usize,
    /// Hidden width of the generator stack.
    pub hidden: usize,
    /// Drop the contrastive term and train with cross-entropy only
    /// (ablation switch).
    pub contrastive: bool,
    /// Temperature at the start of training; annealed exponentially down to
    /// `temperature`. Equal values disable the anneal.
    pub initial_temperature: f64,
    /// L2 weight decay on the generator parameters.
    pub weight_decay: f64,
    /// The learning rate decays exponentially to `learning_rate *
    /// final_lr_fraction` over the epochs; 1.0 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 1000,
            prototypes_per_class: 2,
            temperature: 0.07,
            learning_rate: 0.2,
            seed: 0,
            noise_dim: 100,
            hidden: 128,
            contrastive: true,
            initial_temperature: 1.0,
            weight_decay: 0.0,
            final_lr_fraction: 1.0,
        }
    }
}

/// Train a fresh generator against the frozen classifier. Only generator
/// parameters are updated; the classifier is read-only throughout.
pub fn train_stage1(
    classifier: &WeightNormClassifier,
    cfg: &Stage1Config,
) -> Result<PrototypeGenerator> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gen = PrototypeGenerator::init(
        classifier.classes(),
        cfg.noise_dim,
        cfg.hidden,
        classifier.feature_dim(),
        &mut rng,
    );
    train_stage1_from(gen, classifier, cfg)
}

/// Train an existing generator against the frozen classifier.
pub fn train_stage1_from(
    mut gen: PrototypeGenerator,
    classifier: &WeightNormClassifier,
    cfg: &Stage1Config,
) -> Result<PrototypeGenerator> {
    if cfg.prototypes_per_class < 2 {
        return Err(Error::invalid_argument(
            "need at least 2 prototypes per class for positive pairs",
        ));
    }
    if gen.classes() != classifier.classes() || gen.feature_dim() != classifier.feature_dim() {
        return Err(Error::invalid_argument(
            "generator and classifier disagree on classes or feature dimension",
        ));
    }
    let classes = classifier.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5131));
    let mut sgd = Sgd::new(SgdConfig {
        learning_rate: cfg.learning_rate,
        momentum: 0.9,
        weight_decay: cfg.weight_decay,
    })?;

    let labels: Vec<usize> =
        (0..classes).flat_map(|k| std::iter::repeat_n(k, cfg.prototypes_per_class)).collect();

    for epoch in 0..cfg.epochs {
        let t = if cfg.epochs > 1 { epoch as f64 / (cfg.epochs - 1) as f64 } else { 1.0 };
        if cfg.final_lr_fraction != 1.0 {
            sgd.set_learning_rate(cfg.learning_rate * cfg.final_lr_fraction.powf(t))?;
        }
        let temperature = if cfg.initial_temperature > cfg.temperature {
            cfg.initial_temperature * (cfg.temperature / cfg.initial_temperature).powf(t)
        } else {
            cfg.temperature
        };
        let z = sample_noise(labels.len(), cfg.noise_dim, &mut rng);
        let mut tape = Tape::new();
        let vars = gen.register(&mut tape, true);
        let zc = tape.constant(&z);
        let p = gen.generate_on(&mut tape, &vars, &labels, zc);
        let ce = loss_proto_ce(&mut tape, p, &labels, classifier);
        let loss = if cfg.contrastive {
            let con =
                loss_proto_con(&mut tape, p, &labels, classes, temperature, &mut rng)?;
            tape.add(ce, con)
        } else {
            ce
        };
        tape.value(loss).assert_finite("stage-1 loss")?;
        tape.backward(loss)?;
        let grads = gen.grads(&tape, &vars);
        sgd.step(&mut gen.params_mut(), &grads)?;
    }
    Ok(gen)
}

/// Cosine-distance spread statistics over per-class prototype sets.
///
/// `intra` averages pairwise distance (1 - cosine similarity) within each
/// class, then over classes; `inter` averages over all cross-class sample
/// pairs. Both live in [0, 2].
pub fn prototype_stats(samples: &[Tensor]) -> Result<(f64, f64)> {
    for (k, s) in samples.iter().enumerate() {
        if s.rows() < 2 {
            return Err(Error::invalid_argument(format!(
                "class {k} has {} prototype samples; need at least 2",
                s.rows()
            )));
        }
    }

    let mut intra_sum = 0.0;
    for s in samples {
        let n = s.rows();
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += 1.0 - cosine_similarity(s.row(i), s.row(j))?;
                pairs += 1;
            }
        }
        intra_sum += acc / pairs as f64;
    }
    let intra = intra_sum / samples.len() as f64;

    let mut inter_acc = 0.0;
    let mut inter_pairs = 0usize;
    for a in 0..samples.len() {
        for b in (a + 1)..samples.len() {
            for i in 0..samples[a].rows() {
                for j in 0..samples[b].rows() {
                    inter_acc +=
                        1.0 - cosine_similarity(samples[a].row(i), samples[b].row(j))?;
                    inter_pairs += 1;
                }
            }
        }
    }
    Ok((inter_acc / inter_pairs as f64, intra))
}

/// Draw `per_class` fresh prototypes for every class; returns one matrix per
/// class.
pub fn sample_prototypes_per_class(
    gen: &PrototypeGenerator,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor>> {
    (0..gen.classes())
        .map(|k| {
            let z = sample_noise(per_class, gen.noise_dim(), rng);
            generate(gen, &vec![k; per_class], &z)
        })
        .collect()
}
