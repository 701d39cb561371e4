//! Subcommand implementations.

use std::path::{Path, PathBuf};

use vitbench_core::model::{
    gradient_check, read_checkpoint, train as train_model, write_checkpoint, CheckpointMeta,
    GradCheckConfig, ModelParams,
};
use vitbench_core::phantom::{cvit_covid_counts, generate_dataset, read_manifest, Label, Split};
use vitbench_core::trial::{
    aggregate_slice_scores, emit_report, evaluate_cases, import_slice_scores, make_case_loader,
    overall_roc, read_case_scores, split_by_patient, stratify_by_dose, stratify_by_extent,
    write_case_scores, CaseScore, Report,
};

use crate::config::{parse_counts, RunConfig};
use crate::{CliError, ConfigArgs};

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    RunConfig::load(args.config.as_deref(), &args.sets, args.seed)
}

pub fn gen(
    args: &ConfigArgs,
    preset: Option<&str>,
    counts: Option<&str>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let rows = match (preset, counts) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "--preset and --counts are mutually exclusive".into(),
            ))
        }
        (Some("cvit-covid"), None) => cvit_covid_counts(),
        (Some(other), None) => {
            return Err(CliError::Config(format!("unknown preset {other:?}")));
        }
        (None, Some(spec)) => parse_counts(spec)?,
        (None, None) => cfg
            .generate
            .counts
            .clone()
            .ok_or_else(|| CliError::Config("no counts: pass --preset, --counts or generate.counts".into()))?,
    };
    let manifest = generate_dataset(
        &rows,
        &cfg.phantom,
        &cfg.noise,
        &cfg.lesion_fraction_dist,
        &cfg.gen_options(),
        cfg.seed,
        out,
    )?;
    let n_pos = manifest
        .cases
        .iter()
        .filter(|c| c.label == Label::Positive)
        .count();
    println!(
        "generated {} cases ({} positive, {} negative) into {} (seed {})",
        manifest.cases.len(),
        n_pos,
        manifest.cases.len() - n_pos,
        out.display(),
        cfg.seed
    );
    Ok(())
}

pub fn train(
    args: &ConfigArgs,
    manifest_path: &Path,
    out_checkpoint: &Path,
    history: Option<&Path>,
    split_manifest: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let manifest = read_manifest(manifest_path)?;
    let split = split_by_patient(&manifest, cfg.ratios, cfg.seed)?;

    let split_path = split_manifest.map(PathBuf::from).unwrap_or_else(|| {
        let stem = manifest_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "manifest".into());
        manifest_path.with_file_name(format!("{stem}.split.csv"))
    });
    write_split_manifest(&split, &split_path)?;

    let loader = make_case_loader(manifest_path.to_path_buf(), cfg.preprocess.clone());
    let outcome = train_model(&split, &cfg.train, &loader)?;
    for r in &outcome.history {
        println!(
            "epoch {} train_loss {:.6} val_auc {:.4} lr {:.6}",
            r.epoch, r.train_loss, r.val_auc, r.lr
        );
    }
    println!(
        "best epoch {} (val AUC {:.4}); class weights ({:.4}, {:.4})",
        outcome.best_epoch, outcome.best_val_auc, outcome.class_weights.0, outcome.class_weights.1
    );

    if let Some(parent) = out_checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    write_checkpoint(
        &outcome.params,
        &CheckpointMeta {
            epoch: outcome.best_epoch,
            val_auc: Some(outcome.best_val_auc),
        },
        out_checkpoint,
    )?;
    println!("checkpoint written to {}", out_checkpoint.display());

    let history_path = history.map(PathBuf::from).unwrap_or_else(|| {
        out_checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("history.csv")
    });
    let mut body = String::from("epoch,train_loss,val_auc,lr\n");
    for r in &outcome.history {
        body.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_auc, r.lr
        ));
    }
    std::fs::write(&history_path, body)
        .map_err(|e| CliError::Io(format!("{}: {e}", history_path.display())))?;
    println!(
        "history written to {} ({} rows); split manifest at {}",
        history_path.display(),
        outcome.history.len(),
        split_path.display()
    );
    Ok(())
}

fn write_split_manifest(
    manifest: &vitbench_core::phantom::Manifest,
    path: &Path,
) -> Result<(), CliError> {
    let mut body = String::from("case_id,label,dose_mas,lesion_fraction,path,split\n");
    for c in &manifest.cases {
        body.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.case_id,
            c.label.as_str(),
            c.dose_mas,
            c.lesion_fraction,
            c.path,
            c.split.as_str()
        ));
    }
    std::fs::write(path, body).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn parse_split(name: &str, manifest: &vitbench_core::phantom::Manifest) -> Result<Option<Split>, CliError> {
    match name {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        "auto" => {
            let any_test = manifest.cases.iter().any(|c| c.split == Split::Test);
            Ok(if any_test { Some(Split::Test) } else { None })
        }
        other => Err(CliError::Config(format!(
            "unknown split {other:?}; expected auto, train, val, test or all"
        ))),
    }
}

pub fn eval(
    args: &ConfigArgs,
    manifest_path: &Path,
    checkpoint: Option<&Path>,
    slice_scores: Option<&Path>,
    split: &str,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let manifest = read_manifest(manifest_path)?;
    let split = parse_split(split, &manifest)?;

    let scores: Vec<CaseScore> = match (slice_scores, checkpoint) {
        (Some(table), _) => {
            let tables = import_slice_scores(table)?;
            aggregate_slice_scores(&tables, &manifest, split, cfg.eval.top_fraction)?
        }
        (None, Some(ckpt_path)) => {
            let (params, _meta): (ModelParams, CheckpointMeta) = read_checkpoint(ckpt_path)?;
            evaluate_cases(&params, &manifest, manifest_path, split, &cfg.preprocess)?
        }
        (None, None) => {
            return Err(CliError::Config(
                "eval needs --checkpoint or --slice-scores".into(),
            ))
        }
    };

    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    write_case_scores(&scores, &out.join("scores.csv"))?;
    emit_stratified_report(&cfg, &scores, out)
}

pub fn report(args: &ConfigArgs, scores_path: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let scores = read_case_scores(scores_path)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    emit_stratified_report(&cfg, &scores, out)
}

fn emit_stratified_report(
    cfg: &RunConfig,
    scores: &[CaseScore],
    out: &Path,
) -> Result<(), CliError> {
    let overall = overall_roc(scores, &cfg.eval)?;
    let by_dose = stratify_by_dose(scores, &cfg.eval)?;
    let by_extent = stratify_by_extent(scores, &cfg.eval)?;
    let report = Report {
        config: cfg.eval.clone(),
        overall,
        by_dose,
        by_extent,
    };
    let written = emit_report(&report, out)?;
    println!(
        "overall AUC {:.4} [{:.4}, {:.4}] over {} cases",
        report.overall.roc.auc,
        report.overall.roc.ci.0,
        report.overall.roc.ci.1,
        scores.len()
    );
    for s in report.by_dose.iter().chain(&report.by_extent) {
        println!(
            "{}: AUC {:.4} [{:.4}, {:.4}] ({} pos, {} neg)",
            s.key, s.roc.auc, s.roc.ci.0, s.roc.ci.1, s.roc.n_pos, s.roc.n_neg
        );
    }
    println!("report written to {}", written[0].display());
    Ok(())
}

pub fn gradcheck(
    args: &ConfigArgs,
    eps: f64,
    tol: f64,
    inject_nonfinite: bool,
) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    if !(eps > 0.0) || !(tol > 0.0) {
        return Err(CliError::Config(format!(
            "eps {eps} and tol {tol} must be positive"
        )));
    }
    if inject_nonfinite {
        // corrupt one weight and prove the forward pass reports it
        use vitbench_core::model::{forward_train, FeatureMap};
        use vitbench_core::rng::derive_rng;
        let mut params = ModelParams::init(2, 4, cfg.seed);
        params.stem.weights[0] = f64::NAN;
        let batch = vec![FeatureMap::zeros(1, 8, 16, 16)];
        let err = forward_train(&mut params, &batch, 0.0, &mut derive_rng(cfg.seed, "inject"))
            .err()
            .map(|e| e.to_string())
            .unwrap_or_else(|| "non-finite parameter went undetected".into());
        return Err(CliError::Numerical(err));
    }
    let check_cfg = GradCheckConfig {
        eps,
        seed: cfg.seed,
        ..GradCheckConfig::default()
    };
    let report = gradient_check(&check_cfg)?;
    for (group, err) in &report.per_group {
        println!("{group:18} max relative error {err:.3e}");
    }
    println!(
        "max relative error {:.6e} in {} (eps {:.1e})",
        report.max_rel_err, report.worst_group, eps
    );
    if report.max_rel_err < tol {
        println!("gradcheck PASS (tol {tol:.1e})");
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradcheck FAIL: max relative error {:.6e} >= tol {tol:.1e}",
            report.max_rel_err
        )))
    }
}
