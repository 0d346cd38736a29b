use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use salseg_core::dataset::{
    self, generate_synthetic_labelled, load_dataset, load_dataset_with, make_fold_plan_k, FoldPlan, Sample,
    SyntheticConfig, DEFAULT_FOLDS,
};
use salseg_core::metrics::{
    self, read_image_csv, wilcoxon_signed_rank, write_comparison_csv, write_fold_csv, write_image_csv,
    ComparisonResult, ImageRow, Metric,
};
use salseg_core::model::{ModelSpec, Variant, ENCODER_LEVELS};
use salseg_core::pipeline::{self, evaluate_fold, prepare_for_variant, resize_all, PipelineError};
use salseg_core::saliency::{filter_dataset, ConfidenceParams};
use salseg_core::trainer::{check_plan, train_plan_fold, Checkpoint, TrainConfig};

use crate::config::{pick, require, FileConfig};
use crate::error::{io_error, CliError, CliResult};
use crate::manifest::{checkpoint_path, fold_dir, RunManifest, RunSettings, EVAL_DIR, PLAN_FILE, RECORD_FILE};
use crate::{CompareArgs, EvaluateArgs, FilterArgs, FilterFlags, SynthArgs, TrainArgs};

pub const KEPT_IDS_FILE: &str = "kept_ids.txt";
pub const CONFIDENCE_REPORT_FILE: &str = "confidence_report.csv";
pub const QUALITIES_FILE: &str = "qualities.csv";
pub const PER_FOLD_FILE: &str = "per_fold.csv";
pub const SUMMARY_FILE: &str = "summary.md";
pub const PRED_DIR: &str = "pred";

pub fn per_image_file(variant: Variant) -> String {
    format!("{}_per_image.csv", variant.name())
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(io_error(path.display()))
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn csv_finish<W: std::io::Write>(path: &Path, mut w: csv::Writer<W>) -> CliResult<()> {
    w.flush().map_err(io_error(path.display()))
}

fn csv_row<W: std::io::Write, I, S>(path: &Path, w: &mut csv::Writer<W>, row: I) -> CliResult<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

pub fn filter_params(flags: &FilterFlags, file: &FileConfig) -> CliResult<ConfidenceParams> {
    let d = ConfidenceParams::default();
    let f = &file.filter;
    let p = ConfidenceParams {
        threshold: pick(flags.threshold, f.threshold, d.threshold),
        a1: pick(flags.a1, f.a1, d.a1),
        a2: pick(flags.a2, f.a2, d.a2),
        a3: pick(flags.a3, f.a3, d.a3),
        a4: pick(flags.a4, f.a4, d.a4),
    };
    p.validate().map_err(|e| CliError::validation(e.to_string()))?;
    Ok(p)
}

pub fn synth(args: &SynthArgs, file: &FileConfig) -> CliResult<()> {
    let out = require(args.out.clone(), file.out.clone(), "out")?;
    let d = SyntheticConfig::default();
    let s = &file.synth;
    let mix = pick(args.mix.clone(), s.quality_mix.clone(), d.quality_mix.to_vec());
    let quality_mix: [f64; 4] = mix
        .as_slice()
        .try_into()
        .map_err(|_| CliError::validation(format!("--mix needs 4 proportions, got {}", mix.len())))?;
    let cfg = SyntheticConfig {
        count: pick(args.count, s.count, d.count),
        size: pick(args.size, s.size, d.size),
        quality_mix,
        seed: pick(args.seed, s.seed, d.seed),
    };
    let labelled = generate_synthetic_labelled(&cfg)?;
    let samples: Vec<Sample> = labelled.iter().map(|(s, _)| s.clone()).collect();
    dataset::save_dataset(&out, &samples)?;
    let qpath = out.join(QUALITIES_FILE);
    let mut w = csv_writer(&qpath)?;
    csv_row(&qpath, &mut w, ["id", "quality"])?;
    for (s, q) in &labelled {
        let q = serde_json::to_value(q).expect("quality serializes");
        csv_row(&qpath, &mut w, [s.id.as_str(), q.as_str().unwrap_or_default()])?;
    }
    csv_finish(&qpath, w)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

pub fn filter(args: &FilterArgs, file: &FileConfig) -> CliResult<()> {
    let data = require(args.data.clone(), file.data.clone(), "data")?;
    let out = args.out.clone().unwrap_or_else(|| data.clone());
    let params = filter_params(&args.params, file)?;
    let samples = load_dataset(&data)?;
    let total = samples.len();
    let (kept, reports) = filter_dataset(samples, &params);
    create_dir(&out)?;

    let kept_path = out.join(KEPT_IDS_FILE);
    let text: String = kept.iter().map(|s| format!("{}\n", s.id)).collect();
    std::fs::write(&kept_path, text).map_err(io_error(kept_path.display()))?;

    let report_path = out.join(CONFIDENCE_REPORT_FILE);
    let mut w = csv_writer(&report_path)?;
    csv_row(
        &report_path,
        &mut w,
        ["id", "n_contours", "i_max", "i_second", "m_of_i_max", "m_max", "rejected", "fired_rule"],
    )?;
    let mut per_rule = [0usize; 3];
    for r in &reports {
        let stats = r.stats();
        let num = |f: fn(&salseg_core::saliency::RuleStats) -> f64| stats.as_ref().map_or(0.0, f).to_string();
        if let Some(rule) = r.fired_rule {
            per_rule[usize::from(rule) - 1] += 1;
        }
        csv_row(
            &report_path,
            &mut w,
            [
                r.id.clone(),
                r.contours.len().to_string(),
                num(|s| s.i_max),
                num(|s| s.i_second),
                num(|s| s.m_of_i_max),
                num(|s| s.m_max),
                r.rejected.to_string(),
                r.fired_rule.map_or_else(String::new, |v| v.to_string()),
            ],
        )?;
    }
    csv_finish(&report_path, w)?;
    println!(
        "kept {} of {total} (removed {}: rule 1 {}, rule 2 {}, rule 3 {})",
        kept.len(),
        total - kept.len(),
        per_rule[0],
        per_rule[1],
        per_rule[2]
    );
    Ok(())
}

pub fn read_ids(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read id list {}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Keeps the samples listed in `ids`; every listed id must exist.
fn restrict(samples: Vec<Sample>, ids: &[String]) -> CliResult<Vec<Sample>> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let present: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let unknown: Vec<&str> = wanted.difference(&present).copied().collect();
    if !unknown.is_empty() {
        return Err(CliError::validation(format!(
            "ids not in the dataset: {}",
            unknown.join(", ")
        )));
    }
    Ok(samples.into_iter().filter(|s| wanted.contains(s.id.as_str())).collect())
}

fn parse_variants(names: &[String]) -> CliResult<Vec<Variant>> {
    let mut out = Vec::new();
    for n in names {
        let v: Variant = n.parse().map_err(CliError::validation)?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(CliError::validation("--variant is required (flag or config key)"));
    }
    Ok(out)
}

fn run_settings(args: &TrainArgs, file: &FileConfig) -> CliResult<RunSettings> {
    let dataset_root = require(args.data.clone(), file.data.clone(), "data")?;
    let names = if args.variants.is_empty() {
        file.variants.clone().unwrap_or_default()
    } else {
        args.variants.clone()
    };
    let variants = parse_variants(&names)?;
    let d_spec = ModelSpec::default();
    let filters = pick(args.filters.clone(), file.filters.clone(), d_spec.encoder_filters.to_vec());
    let encoder_filters: [usize; ENCODER_LEVELS] = filters.as_slice().try_into().map_err(|_| {
        CliError::validation(format!("--filters needs {ENCODER_LEVELS} values, got {}", filters.len()))
    })?;
    let d = TrainConfig::default();
    let t = &file.train;
    let train = TrainConfig {
        learning_rate: pick(args.lr, t.learning_rate, d.learning_rate),
        batch_size: pick(args.batch, t.batch_size, d.batch_size),
        patience: pick(args.patience, t.patience, d.patience),
        max_epochs: pick(args.max_epochs, t.max_epochs, d.max_epochs),
        loss_smoothing: pick(args.smoothing, t.loss_smoothing, d.loss_smoothing),
        seed: pick(args.seed, t.seed, d.seed),
    };
    train.validate()?;
    let settings = RunSettings {
        dataset_root,
        ids_file: args.ids.clone().or_else(|| file.ids.clone()),
        variants,
        folds: pick(args.folds, file.folds, DEFAULT_FOLDS),
        fold_seed: pick(args.fold_seed, file.fold_seed, 0),
        input_side: pick(args.size, file.size, d_spec.input_side),
        encoder_filters,
        attention_channels: pick(args.attention_channels, file.attention_channels, d_spec.attention_channels),
        train,
        filter: filter_params(&args.params, file)?,
    };
    for v in &settings.variants {
        model_spec(&settings, *v)
            .validate()
            .map_err(|e| CliError::validation(e.to_string()))?;
    }
    Ok(settings)
}

pub fn model_spec(settings: &RunSettings, variant: Variant) -> ModelSpec {
    ModelSpec {
        variant: variant.architecture(),
        input_side: settings.input_side,
        encoder_filters: settings.encoder_filters,
        attention_channels: settings.attention_channels,
        init_seed: 0,
    }
}

/// Loads, restricts and resizes the samples a run uses.
fn run_samples(settings: &RunSettings, root: &Path, ids: Option<&[String]>) -> CliResult<Vec<Sample>> {
    let with_saliency = settings.variants.iter().any(|v| v.uses_saliency());
    let mut samples = load_dataset_with(root, with_saliency)?;
    if let Some(ids) = ids {
        samples = restrict(samples, ids)?;
    }
    Ok(resize_all(&samples, settings.input_side)?)
}

pub fn train(args: &TrainArgs, file: &FileConfig, config_path: Option<PathBuf>) -> CliResult<()> {
    let out = require(args.out.clone(), file.out.clone(), "out")?;
    let settings = run_settings(args, file)?;
    let manifest_exists = RunManifest::path(&out).exists();
    let mut manifest = if manifest_exists {
        if !args.resume {
            return Err(CliError::validation(format!(
                "{} already holds a run; pass --resume to continue it or choose another --out",
                out.display()
            )));
        }
        let m = RunManifest::load(&out)?;
        if m.settings != settings {
            return Err(CliError::validation(
                "settings differ from the run being resumed; rerun with the original flags",
            ));
        }
        m
    } else {
        RunManifest::new(&out, config_path, settings.clone())
    };
    create_dir(&out)?;

    let ids = settings.ids_file.as_deref().map(read_ids).transpose()?;
    let samples = run_samples(&settings, &settings.dataset_root, ids.as_deref())?;
    let plan_path = out.join(PLAN_FILE);
    let plan = if manifest_exists && plan_path.exists() {
        FoldPlan::load(&plan_path)?
    } else {
        let all: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let plan = make_fold_plan_k(&all, settings.folds, settings.fold_seed)?;
        plan.save(&plan_path)?;
        plan
    };
    check_plan(&plan, &samples)?;
    manifest.add_artifact(&plan_path);
    manifest.save()?;

    let mut trained = 0usize;
    for &variant in &settings.variants {
        let prepared = prepare_for_variant(&samples, variant, &settings.filter);
        let spec = model_spec(&settings, variant);
        for fold in 1..=plan.num_folds() {
            if manifest.is_complete(variant, fold) {
                log::info!("{variant} fold {fold} already complete");
                continue;
            }
            if args.stop_after.is_some_and(|n| trained >= n) {
                println!("stopped after {trained} folds; rerun with --resume to continue");
                return Ok(());
            }
            let (checkpoint, record) = train_plan_fold(&spec, &settings.train, variant, &plan, &prepared, fold)?;
            let dir = fold_dir(&out, variant, fold);
            create_dir(&dir)?;
            let ck_path = checkpoint_path(&out, variant, fold);
            checkpoint.save(&ck_path)?;
            let rec_path = dir.join(RECORD_FILE);
            record.save(&rec_path)?;
            manifest.add_artifact(&ck_path);
            manifest.add_artifact(&rec_path);
            manifest.mark_complete(variant, fold);
            manifest.save()?;
            trained += 1;
            println!(
                "{variant} fold {fold}: {} epochs, best epoch {} (val loss {:.5})",
                record.epochs_run,
                record.best_epoch + 1,
                record.best_val_loss
            );
        }
    }
    println!("run complete in {}", out.display());
    Ok(())
}

fn load_checkpoint(out: &Path, settings: &RunSettings, variant: Variant, fold: usize) -> CliResult<Checkpoint> {
    let path = checkpoint_path(out, variant, fold);
    if !path.exists() {
        return Err(CliError::validation(format!(
            "missing checkpoint {} (train the run to completion first)",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.variant != variant || ck.fold != fold {
        return Err(PipelineError::CheckpointMismatch {
            found: ck.variant,
            found_fold: ck.fold,
            expected: variant,
            expected_fold: fold,
        }
        .into());
    }
    let mut expected = model_spec(settings, variant);
    expected.init_seed = ck.spec.init_seed;
    if ck.spec != expected {
        return Err(CliError::validation(format!(
            "{}: model spec {:?} does not match the run settings {:?}",
            path.display(),
            ck.spec,
            expected
        )));
    }
    Ok(ck)
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<()> {
    if args.batch == 0 {
        return Err(CliError::validation("--batch must be positive"));
    }
    let out = &args.run;
    let mut manifest = RunManifest::load(out)?;
    let settings = manifest.settings.clone();
    let plan = FoldPlan::load(&out.join(PLAN_FILE))?;
    let root = args.data.clone().unwrap_or_else(|| settings.dataset_root.clone());
    let ids: Vec<String> = plan.all_ids().into_iter().collect();
    let samples = run_samples(&settings, &root, Some(&ids))?;

    let eval_dir = out.join(EVAL_DIR);
    create_dir(&eval_dir)?;
    let mut fold_rows = Vec::new();
    for &variant in &settings.variants {
        let prepared = prepare_for_variant(&samples, variant, &settings.filter);
        let pred_dir = eval_dir.join(PRED_DIR).join(variant.name());
        create_dir(&pred_dir)?;
        let mut rows: Vec<ImageRow> = Vec::new();
        for fold in 1..=plan.num_folds() {
            let ck = load_checkpoint(out, &settings, variant, fold)?;
            let ev = evaluate_fold(&ck, &plan, &prepared, args.batch)?;
            for (row, p) in ev.rows.iter().zip(&ev.probabilities) {
                let path = pred_dir.join(format!("{}.png", row.id));
                dataset::write_unit_png(&path, p)?;
                manifest.add_artifact(&path);
            }
            rows.extend(ev.rows);
            fold_rows.push(ev.fold);
        }
        let path = eval_dir.join(per_image_file(variant));
        write_image_csv(&path, &rows)?;
        manifest.add_artifact(&path);
        println!(
            "{variant}: {} images, mean DSC {:.4}",
            rows.len(),
            pipeline::mean_over_images(&rows, Metric::Dsc).unwrap_or(f64::NAN)
        );
    }
    let fold_path = eval_dir.join(PER_FOLD_FILE);
    write_fold_csv(&fold_path, &fold_rows)?;
    let summary = pipeline::summary_table(&fold_rows);
    let summary_path = eval_dir.join(SUMMARY_FILE);
    std::fs::write(&summary_path, &summary).map_err(io_error(summary_path.display()))?;
    manifest.add_artifact(&fold_path);
    manifest.add_artifact(&summary_path);
    manifest.save()?;
    print!("{summary}");
    Ok(())
}

fn model_name(rows: &[ImageRow], path: &Path) -> String {
    let variants: BTreeSet<Variant> = rows.iter().map(|r| r.variant).collect();
    match variants.iter().next() {
        Some(v) if variants.len() == 1 => v.label().to_string(),
        _ => path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
    }
}

fn by_id<'a>(rows: &'a [ImageRow], path: &Path) -> CliResult<BTreeMap<&'a str, &'a ImageRow>> {
    let mut map = BTreeMap::new();
    for r in rows {
        if map.insert(r.id.as_str(), r).is_some() {
            return Err(CliError::validation(format!("{}: duplicate id {}", path.display(), r.id)));
        }
    }
    Ok(map)
}

pub fn compare(args: &CompareArgs) -> CliResult<()> {
    let rows_a = read_image_csv(&args.a)?;
    let rows_b = read_image_csv(&args.b)?;
    let map_a = by_id(&rows_a, &args.a)?;
    let map_b = by_id(&rows_b, &args.b)?;
    let only_a: Vec<&str> = map_a.keys().filter(|k| !map_b.contains_key(*k)).copied().collect();
    let only_b: Vec<&str> = map_b.keys().filter(|k| !map_a.contains_key(*k)).copied().collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        let mut parts = Vec::new();
        if !only_a.is_empty() {
            parts.push(format!("only in {}: {}", args.a.display(), only_a.join(", ")));
        }
        if !only_b.is_empty() {
            parts.push(format!("only in {}: {}", args.b.display(), only_b.join(", ")));
        }
        return Err(CliError::validation(format!("unmatched ids; {}", parts.join("; "))));
    }
    let name_a = model_name(&rows_a, &args.a);
    let name_b = model_name(&rows_b, &args.b);

    let mut results = Vec::new();
    let mut failed = Vec::new();
    println!("{name_a} vs {name_b}");
    println!("| Metric | p-value | n |");
    println!("|---|---|---|");
    for metric in Metric::PER_IMAGE {
        let (a, b): (Vec<f64>, Vec<f64>) = map_a
            .iter()
            .filter_map(|(id, ra)| Some((ra.metrics.get(metric)?, map_b[id].metrics.get(metric)?)))
            .unzip();
        match wilcoxon_signed_rank(&a, &b) {
            Ok(test) => {
                let r = ComparisonResult::new(metric, &name_a, &name_b, &test);
                println!("| {} | {:.4}{} | {} |", metric.label(), r.p_value, r.stars(), r.n_pairs);
                results.push(r);
            }
            Err(e) => {
                println!("| {} | n/a | {} |", metric.label(), a.len());
                eprintln!("{}: {e}", metric.label());
                failed.push(metric.label());
            }
        }
    }
    let out = args.out.clone().unwrap_or_else(|| {
        let stem = |p: &Path| p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let dir = args.a.parent().map_or_else(PathBuf::new, Path::to_path_buf);
        dir.join(format!("comparison_{}_vs_{}.csv", stem(&args.a), stem(&args.b)))
    });
    write_comparison_csv(&out, &results)?;
    println!("{} significant at p < {}", results.iter().filter(|r| r.significant).count(), metrics::SIGNIFICANCE_LEVEL);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::validation(format!("test undefined for {}", failed.join(", "))))
    }
}
