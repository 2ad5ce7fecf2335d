//! Pipeline stages behind the CLI commands. Each stage writes its artifact
//! into the run directory and reuses what is already there, so the natural
//! checkpoints (datasets, source model, generator) can be shared between
//! adaptation runs.

use std::io::Write;
use std::path::Path;

use protoadapt::adapt::{
    adapt_cpga, adapt_tcpga, write_report_csv, EpochRecord, ModelBundle, TcpgaConfig,
    ZeroShotOracle,
};
use protoadapt::data::{generate_domain_pair, load_csv, sample_class_counts, save_csv, LabeledDataset};
use protoadapt::metrics::{accuracies, pseudo_label_discrepancy};
use protoadapt::model::{argmax_rows, train_source, SourceModel};
use protoadapt::proto::{train_stage1, PrototypeGenerator};

use crate::config::ExperimentConfig;
use crate::CliError;

// Stage seeds derive from the experiment seed by fixed offsets so artifacts
// stay reproducible when stages run separately.
const SOURCE_SEED_OFFSET: u64 = 0x10001;
const STAGE1_SEED_OFFSET: u64 = 0x20002;
const STAGE2_SEED_OFFSET: u64 = 0x30003;
const ORACLE_SEED_OFFSET: u64 = 0x40004;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Cpga,
    Tcpga,
}

impl Method {
    fn name(&self) -> &'static str {
        match self {
            Method::Cpga => "cpga",
            Method::Tcpga => "tcpga",
        }
    }
}

pub fn parse_method(text: &str) -> Result<Method, CliError> {
    match text.to_ascii_lowercase().as_str() {
        "cpga" => Ok(Method::Cpga),
        "tcpga" => Ok(Method::Tcpga),
        other => Err(CliError::Config(format!(
            "unknown method {other:?} (expected cpga or tcpga)"
        ))),
    }
}

pub fn parse_shift(text: &str) -> Result<(String, String), CliError> {
    let parts: Vec<&str> = text.split('-').collect();
    if parts.len() != 2 {
        return Err(CliError::Config(format!(
            "shift {text:?} must look like FLT-BLT (source-target)"
        )));
    }
    for p in &parts {
        p.parse::<protoadapt::data::DistributionKind>()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok((parts[0].to_string(), parts[1].to_string()))
}

pub fn ensure_datasets(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    std::fs::create_dir_all(dir).map_err(protoadapt::Error::from)?;
    let source_path = dir.join("source.csv");
    let target_path = dir.join("target.csv");
    if source_path.exists() && target_path.exists() {
        let source = load_csv(&source_path, cfg.dataset.classes)?;
        let target = load_csv(&target_path, cfg.dataset.classes)?;
        return Ok((source, target));
    }
    let counts_source = sample_class_counts(
        &cfg.dataset.source.to_spec()?,
        cfg.dataset.classes,
        cfg.dataset.samples_max,
    )?;
    let counts_target = sample_class_counts(
        &cfg.dataset.target.to_spec()?,
        cfg.dataset.classes,
        cfg.dataset.samples_max,
    )?;
    let (source, target) = generate_domain_pair(
        cfg.seed,
        cfg.dataset.classes,
        cfg.dataset.input_dim,
        &counts_source,
        &counts_target,
        &cfg.dataset.shift.to_spec(),
    )?;
    save_csv(&source_path, &source)?;
    save_csv(&target_path, &target)?;
    Ok((source, target))
}

pub fn ensure_source_model(cfg: &ExperimentConfig, dir: &Path) -> Result<SourceModel, CliError> {
    let path = dir.join("source_model.txt");
    if path.exists() {
        return Ok(SourceModel::load(&path)?);
    }
    let (source, _) = ensure_datasets(cfg, dir)?;
    let train_cfg = cfg.source_training.to_core(cfg.seed.wrapping_add(SOURCE_SEED_OFFSET));
    let model = train_source(&source, &train_cfg)?;
    model.save(&path)?;
    Ok(model)
}

pub fn ensure_generator(
    cfg: &ExperimentConfig,
    dir: &Path,
    model: &SourceModel,
) -> Result<PrototypeGenerator, CliError> {
    let path = dir.join("generator.txt");
    if path.exists() {
        return Ok(PrototypeGenerator::load(&path)?);
    }
    let stage1 = cfg.stage1.to_core(cfg.seed.wrapping_add(STAGE1_SEED_OFFSET));
    let gen = train_stage1(&model.classifier, &stage1)?;
    gen.save(&path)?;
    Ok(gen)
}

pub fn run_adaptation(
    cfg: &ExperimentConfig,
    dir: &Path,
    method: Method,
) -> Result<String, CliError> {
    let (_, target) = ensure_datasets(cfg, dir)?;
    let model = ensure_source_model(cfg, dir)?;
    let generator = ensure_generator(cfg, dir, &model)?;
    let stage2 = cfg.stage2.to_core(cfg.seed.wrapping_add(STAGE2_SEED_OFFSET));

    let (bundle, report) = match method {
        Method::Cpga => {
            let out = adapt_cpga(&model, &generator, &target, &stage2)?;
            (
                ModelBundle { kind: "adapted-cpga".into(), model: out.model, head: None },
                out.report,
            )
        }
        Method::Tcpga => {
            let oracle = build_oracle(cfg, &target)?;
            let tcfg = TcpgaConfig {
                base: stage2,
                update_source_classifier: cfg
                    .stage2
                    .update_source_classifier
                    .unwrap_or(false),
            };
            let out = adapt_tcpga(&model, &generator, &target, &oracle, &tcfg)?;
            (
                ModelBundle {
                    kind: "adapted-tcpga".into(),
                    model: out.model,
                    head: Some(out.head),
                },
                out.report,
            )
        }
    };

    bundle.save(&dir.join(format!("adapted_{}.txt", method.name())))?;
    write_report_csv(&dir.join(format!("report_{}.csv", method.name())), &report)?;
    let summary = summary_line(cfg, method, report.last().expect("report has epoch 0"));
    let summary_path = dir.join(format!("summary_{}.csv", method.name()));
    let file = std::fs::File::create(&summary_path).map_err(protoadapt::Error::from)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "method,shift,mu,overall_acc,per_class_acc,d_pdd,seed")
        .map_err(protoadapt::Error::from)?;
    writeln!(w, "{summary}").map_err(protoadapt::Error::from)?;
    w.flush().map_err(protoadapt::Error::from)?;
    Ok(summary)
}

fn build_oracle(
    cfg: &ExperimentConfig,
    target: &LabeledDataset,
) -> Result<ZeroShotOracle, CliError> {
    if let Some(file) = &cfg.stage2.oracle.file {
        return Ok(ZeroShotOracle::from_csv(file, target.len(), target.classes)?);
    }
    let accuracy = cfg.stage2.oracle.accuracy.unwrap_or(0.85);
    let smoothing = cfg.stage2.oracle.smoothing.unwrap_or(0.2);
    Ok(ZeroShotOracle::simulated(
        &target.labels,
        target.classes,
        accuracy,
        smoothing,
        cfg.seed.wrapping_add(ORACLE_SEED_OFFSET),
    )?)
}

fn summary_line(cfg: &ExperimentConfig, method: Method, last: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        method.name(),
        cfg.shift_label(),
        cfg.summary_mu(),
        last.overall_acc,
        last.per_class_acc,
        last.d_pdd,
        cfg.seed
    )
}

pub fn evaluate(model_path: &Path, data_path: &Path, classes: usize) -> Result<String, CliError> {
    let bundle = ModelBundle::load(model_path)?;
    let data = load_csv(data_path, classes)?;
    let probs = bundle.predict_probs(&data.features)?;
    let pred = argmax_rows(&probs);
    let rep = accuracies(&pred, &data.labels, classes)?;
    let d_pdd = pseudo_label_discrepancy(&pred, &data.labels, classes)
        .map(|v| v.to_string())
        .unwrap_or_else(|_| "NaN".to_string());
    Ok(format!(
        "kind={} overall_acc={} per_class_acc={} d_pdd={}",
        bundle.kind, rep.overall_acc, rep.per_class_acc, d_pdd
    ))
}

pub fn run_sweep(
    base: &ExperimentConfig,
    dir: &Path,
    methods: &[Method],
    shifts: &[(String, String)],
    ratios: &[f64],
    seeds: &[u64],
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(protoadapt::Error::from)?;
    let mut rows = Vec::new();
    for (source_kind, target_kind) in shifts {
        for &mu in ratios {
            for &seed in seeds {
                // One cell directory per (shift, mu, seed); methods share its
                // datasets, source model and generator.
                let cell = dir.join(format!("{source_kind}-{target_kind}_mu{mu}_seed{seed}"));
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.dataset.source.kind = source_kind.clone();
                cfg.dataset.source.mu = mu;
                cfg.dataset.target.kind = target_kind.clone();
                cfg.dataset.target.mu = mu;
                for &method in methods {
                    rows.push(run_adaptation(&cfg, &cell, method)?);
                }
            }
        }
    }
    let path = dir.join("sweep_summary.csv");
    let file = std::fs::File::create(&path).map_err(protoadapt::Error::from)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "method,shift,mu,overall_acc,per_class_acc,d_pdd,seed")
        .map_err(protoadapt::Error::from)?;
    for row in &rows {
        writeln!(w, "{row}").map_err(protoadapt::Error::from)?;
    }
    w.flush().map_err(protoadapt::Error::from)?;
    Ok(())
}
