//! Prototype adaptation driven by the source model's own pseudo labels.
//!
//! Each epoch refreshes target features, the feature bank, and the centroid
//! pseudo labels; each batch aligns projected target features to one freshly
//! generated prototype per class with a confidence-weighted InfoNCE, plus
//! the early-learning regularizer and the neighborhood-clustering entropy.
//! Only the extractor and projector train; the source classifier and the
//! generator stay frozen throughout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{elr_batch, nc_batch, weighted_infonce};
use super::{
    confidence_weight, init_centroids, pseudo_labels, report_discrepancy, update_centroids,
    ElrBank, EpochRecord, FeatureBank, Projector,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::accuracies;
use crate::model::{argmax_rows, classify, extract_features, shuffle, SourceModel};
use crate::proto::{generate, sample_noise, PrototypeGenerator};
use crate::tensor::{Sgd, SgdConfig, Tape, Tensor};

/// Stage-two hyperparameters.
#[derive(Debug, Clone)]
pub struct CpgaConfig {
    pub epochs: usize,
    pub temperature: f64,
    /// Momentum of the prediction bank.
    pub momentum_beta: f64,
    /// Weight of the early-learning regularizer.
    pub elr_weight: f64,
    /// Weight of the neighborhood-clustering term.
    pub nc_weight: f64,
    pub learning_rate: f64,
    /// The extractor trains at `learning_rate * extractor_lr_scale`; the
    /// freshly initialized heads use the full rate.
    pub extractor_lr_scale: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Projector hidden widths.
    pub projector_hidden: (usize, usize),
    /// Contrastive feature dimension.
    pub contrast_dim: usize,
    /// Use centroid-confidence weights; with `false` every anchor weighs 1
    /// (ablation switch).
    pub confidence_weighting: bool,
}

impl Default for CpgaConfig {
    fn default() -> Self {
        CpgaConfig {
            epochs: 50,
            temperature: 0.07,
            momentum_beta: 0.9,
            elr_weight: 2.0,
            nc_weight: 0.05,
            learning_rate: 0.01,
            extractor_lr_scale: 1.0,
            batch_size: 64,
            seed: 0,
            projector_hidden: (64, 64),
            contrast_dim: 32,
            confidence_weighting: true,
        }
    }
}

impl CpgaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid_argument("temperature must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum_beta) {
            return Err(Error::invalid_argument("momentum must be in [0, 1)"));
        }
        if self.elr_weight < 0.0 || self.nc_weight < 0.0 {
            return Err(Error::invalid_argument("loss weights must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_argument("batch size must be positive"));
        }
        if self.extractor_lr_scale <= 0.0 {
            return Err(Error::invalid_argument("extractor lr scale must be > 0"));
        }
        Ok(())
    }
}

/// Adapted model pieces plus the per-epoch report.
pub struct CpgaOutcome {
    pub model: SourceModel,
    pub projector: Projector,
    pub report: Vec<EpochRecord>,
}

/// Run prototype adaptation. `target.labels` are never shown to the learner;
/// they feed only the per-epoch evaluation columns of the report.
pub fn adapt_cpga(
    source: &SourceModel,
    generator: &PrototypeGenerator,
    target: &LabeledDataset,
    cfg: &CpgaConfig,
) -> Result<CpgaOutcome> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::invalid_argument("target dataset is empty"));
    }
    if generator.feature_dim() != source.feature_dim() {
        return Err(Error::invalid_argument(
            "generator feature dimension does not match the source model",
        ));
    }

    let classes = source.classes();
    let n = target.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = source.clone();
    let mut projector = Projector::init(
        source.feature_dim(),
        cfg.projector_hidden,
        cfg.contrast_dim,
        &mut rng,
    );
    let mut sgd_backbone = Sgd::new(SgdConfig {
        learning_rate: cfg.learning_rate * cfg.extractor_lr_scale,
        momentum: 0.9,
        weight_decay: 0.0,
    })?;
    let mut sgd_heads = Sgd::new(SgdConfig {
        learning_rate: cfg.learning_rate,
        momentum: 0.9,
        weight_decay: 0.0,
    })?;

    let mut report = Vec::with_capacity(cfg.epochs + 1);
    let mut features = extract_features(&model.extractor, &target.features)?;
    let source_pred = argmax_rows(&classify(&model.classifier, &features)?);
    report.push(evaluation_row(0, [0.0; 3], &source_pred, &source_pred, target)?);
    if cfg.epochs == 0 {
        return Ok(CpgaOutcome { model, projector, report });
    }

    // Initial centroids from the classifier's soft predictions, then
    // centroid-based pseudo labels.
    let soft0 = classify(&model.classifier, &features)?;
    let mut centroids = init_centroids(&features, &soft0)?;
    let (mut soft, mut hard) = pseudo_labels(&features, &centroids, cfg.temperature)?;
    let mut bank = FeatureBank::new(features.clone())?;
    let mut elr = ElrBank::new(n, classes, cfg.momentum_beta)?;

    let proto_labels: Vec<usize> = (0..classes).collect();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.epochs {
        let weights = if cfg.confidence_weighting {
            confidence_weight(&soft, &hard)
        } else {
            vec![1.0; n]
        };

        shuffle(&mut order, &mut rng);
        let mut loss_sums = [0.0f64; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let z = sample_noise(classes, generator.noise_dim(), &mut rng);
            let prototypes = generate(generator, &proto_labels, &z)?;

            let xb = gather_rows(&target.features, chunk);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| hard[i]).collect();
            let batch_weights: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();

            let mut tape = Tape::new();
            let ext_vars = model.extractor.register(&mut tape, true);
            let proj_vars = projector.register(&mut tape, true);
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
                cfg.temperature,
            )?;
            let mut total = l_con;
            let mut l_elr_val = 0.0;
            if cfg.elr_weight > 0.0 {
                let l_elr = elr_batch(&mut tape, u, v, &mut elr, chunk, cfg.temperature)?;
                l_elr_val = tape.value(l_elr).item();
                let scaled = tape.scale(l_elr, cfg.elr_weight);
                total = tape.add(total, scaled);
            }
            let mut l_nc_val = 0.0;
            if cfg.nc_weight > 0.0 {
                let l_nc = nc_batch(&mut tape, qb, &bank, chunk, cfg.temperature)?;
                l_nc_val = tape.value(l_nc).item();
                let scaled = tape.scale(l_nc, cfg.nc_weight);
                total = tape.add(total, scaled);
            }
            tape.value(total).assert_finite("adaptation loss")?;
            tape.backward(total)?;

            let ext_grads = model.extractor.grads(&tape, &ext_vars);
            sgd_backbone.step(&mut model.extractor.params_mut(), &ext_grads)?;
            let head_grads = projector.mlp.grads(&tape, &proj_vars);
            sgd_heads.step(&mut projector.mlp.params_mut(), &head_grads)?;

            loss_sums[0] += tape.value(l_con).item();
            loss_sums[1] += l_elr_val;
            loss_sums[2] += l_nc_val;
            batches += 1;
        }

        // Epoch-boundary refresh: new features, bank, centroids, labels.
        features = extract_features(&model.extractor, &target.features)?;
        bank.refresh(features.clone())?;
        centroids = update_centroids(&features, &hard, &centroids)?;
        let refreshed = pseudo_labels(&features, &centroids, cfg.temperature)?;
        soft = refreshed.0;
        hard = refreshed.1;

        let pred = argmax_rows(&classify(&model.classifier, &features)?);
        let means = loss_sums.map(|s| s / batches as f64);
        let row = evaluation_row(epoch, means, &pred, &hard, target)?;
        if log::log_enabled!(log::Level::Debug) {
            let pl_acc = crate::metrics::accuracies(&hard, &target.labels, classes)
                .map(|r| r.overall_acc)
                .unwrap_or(f64::NAN);
            log::debug!(
                "cpga epoch {epoch}: acc {:.3} pseudo_acc {pl_acc:.3} d_pdd {:.2} con {:.4}",
                row.overall_acc,
                row.d_pdd,
                row.loss_con
            );
        }
        report.push(row);
    }

    Ok(CpgaOutcome { model, projector, report })
}

pub(crate) fn gather_rows(m: &Tensor, idx: &[usize]) -> Tensor {
    let d = m.cols();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(m.row(i));
    }
    Tensor::from_vec(&[idx.len(), d], out).unwrap()
}

pub(crate) fn evaluation_row(
    epoch: usize,
    losses: [f64; 3],
    predictions: &[usize],
    pseudo: &[usize],
    target: &LabeledDataset,
) -> Result<EpochRecord> {
    let rep = accuracies(predictions, &target.labels, target.classes)?;
    Ok(EpochRecord {
        epoch,
        loss_con: losses[0],
        loss_elr: losses[1],
        loss_nc: losses[2],
        overall_acc: rep.overall_acc,
        per_class_acc: rep.per_class_acc,
        d_pdd: report_discrepancy(pseudo, &target.labels, target.classes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain_pair, DomainShiftSpec};
    use crate::model::{train_source, SourceTrainConfig};
    use crate::proto::{train_stage1, Stage1Config};

    fn tiny_setup() -> (SourceModel, PrototypeGenerator, LabeledDataset) {
        let shift = DomainShiftSpec {
            rotation_angle: 0.3,
            translation_scale: 0.5,
            noise_sigma_source: 0.5,
            noise_sigma_target: 0.5,
            mean_separation: 2.0,
        };
        let (source, target) =
            generate_domain_pair(21, 3, 8, &[60, 60, 60], &[40, 40, 40], &shift).unwrap();
        let model = train_source(
            &source,
            &SourceTrainConfig {
                epochs: 40,
                seed: 21,
                hidden: vec![32],
                feature_dim: 16,
                ..SourceTrainConfig::default()
            },
        )
        .unwrap();
        let gen = train_stage1(
            &model.classifier,
            &Stage1Config { epochs: 150, seed: 21, noise_dim: 20, hidden: 32, ..Default::default() },
        )
        .unwrap();
        (model, gen, target)
    }

    #[test]
    fn zero_epochs_returns_model_unchanged_with_single_row() {
        let (model, gen, target) = tiny_setup();
        let cfg = CpgaConfig { epochs: 0, seed: 1, ..Default::default() };
        let out = adapt_cpga(&model, &gen, &target, &cfg).unwrap();
        assert_eq!(out.report.len(), 1);
        assert_eq!(out.report[0].epoch, 0);
        for (a, b) in out
            .model
            .extractor
            .params()
            .iter()
            .zip(model.extractor.params())
        {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn ablation_path_runs_and_contrastive_loss_decreases() {
        let (model, gen, target) = tiny_setup();
        let cfg = CpgaConfig {
            epochs: 10,
            elr_weight: 0.0,
            nc_weight: 0.0,
            confidence_weighting: false,
            seed: 2,
            projector_hidden: (32, 32),
            contrast_dim: 16,
            ..Default::default()
        };
        let out = adapt_cpga(&model, &gen, &target, &cfg).unwrap();
        assert_eq!(out.report.len(), 11);
        let first = out.report[1].loss_con;
        let last = out.report.last().unwrap().loss_con;
        assert!(last < first, "contrastive loss did not decrease: {first} -> {last}");
        assert!(out.report.iter().skip(1).all(|r| r.loss_elr == 0.0 && r.loss_nc == 0.0));
    }

    #[test]
    fn classifier_and_generator_stay_bitwise_frozen() {
        let (model, gen, target) = tiny_setup();
        let dir_bits: Vec<u64> =
            model.classifier.direction.data().iter().map(|v| v.to_bits()).collect();
        let gain_bits: Vec<u64> =
            model.classifier.scale.data().iter().map(|v| v.to_bits()).collect();
        let gen_bits: Vec<u64> = gen.embedding.data().iter().map(|v| v.to_bits()).collect();

        let cfg = CpgaConfig {
            epochs: 3,
            seed: 3,
            projector_hidden: (32, 32),
            contrast_dim: 16,
            ..Default::default()
        };
        let out = adapt_cpga(&model, &gen, &target, &cfg).unwrap();

        let dir_after: Vec<u64> =
            out.model.classifier.direction.data().iter().map(|v| v.to_bits()).collect();
        let gain_after: Vec<u64> =
            out.model.classifier.scale.data().iter().map(|v| v.to_bits()).collect();
        let gen_after: Vec<u64> = gen.embedding.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(dir_bits, dir_after);
        assert_eq!(gain_bits, gain_after);
        assert_eq!(gen_bits, gen_after);
    }

    #[test]
    fn adaptation_is_deterministic() {
        let (model, gen, target) = tiny_setup();
        let cfg = CpgaConfig {
            epochs: 2,
            seed: 5,
            projector_hidden: (32, 32),
            contrast_dim: 16,
            ..Default::default()
        };
        let a = adapt_cpga(&model, &gen, &target, &cfg).unwrap();
        let b = adapt_cpga(&model, &gen, &target, &cfg).unwrap();
        for (ra, rb) in a.report.iter().zip(&b.report) {
            assert_eq!(ra.loss_con.to_bits(), rb.loss_con.to_bits());
            assert_eq!(ra.overall_acc.to_bits(), rb.overall_acc.to_bits());
        }
        for (pa, pb) in a.model.extractor.params().iter().zip(b.model.extractor.params()) {
            assert_eq!(pa.data(), pb.data());
        }
    }
}
