use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use salseg_core::dataset::read_unit_png;
use salseg_core::metrics::{COMPARISON_CSV_HEADER, FOLD_CSV_HEADER, IMAGE_CSV_HEADER};
use tempfile::TempDir;

const COUNT: usize = 20;
const SIDE: usize = 32;
const NET: [&str; 8] = ["--size", "32", "--filters", "2,2,2,2,2", "--attention-channels", "2", "--max-epochs", "1"];

fn salseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn ok(args: &[&str]) -> Output {
    let o = salseg(args);
    assert_eq!(code(&o), 0, "salseg {args:?} failed: {}", stderr(&o));
    o
}

fn synth(dir: &Path, extra: &[&str]) {
    let count = COUNT.to_string();
    let size = SIDE.to_string();
    let mut args = vec!["synth", "--out", s(dir), "--count", &count, "--size", &size, "--seed", "3"];
    args.extend_from_slice(extra);
    ok(&args);
}

fn train_args<'a>(data: &'a Path, out: &'a Path, variants: &'a str) -> Vec<&'a str> {
    let mut a = vec!["train", "--data", s(data), "--out", s(out), "--variant", variants];
    a.extend_from_slice(&NET);
    a
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dest = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &dest);
        } else {
            std::fs::copy(entry.path(), dest).unwrap();
        }
    }
}

/// Relative path to contents, for every file below `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

/// Dataset plus a fully trained and evaluated three-variant run, shared
/// read-only by the tests below.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        synth(&data, &[]);
        ok(&train_args(&data, &run, "unet,unet-sa,unet-sa-c"));
        ok(&["evaluate", "--run", s(&run)]);
        Fixture { _dir: dir, data, run }
    })
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&salseg(&["--help"])), 0);
    assert_eq!(code(&salseg(&["--version"])), 0);
    assert_eq!(code(&salseg(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&salseg(&[])), 1);
    assert_eq!(code(&salseg(&["frobnicate"])), 1);
    assert_eq!(code(&salseg(&["synth", "--count", "many"])), 1);
}

#[test]
fn synth_writes_count_and_is_byte_identical_on_rerun() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, &[]);
    synth(&b, &[]);
    for sub in ["images", "masks", "saliency"] {
        assert_eq!(std::fs::read_dir(a.join(sub)).unwrap().count(), COUNT);
    }
    assert_eq!(snapshot(&a), snapshot(&b));
    let (header, rows) = csv_rows(&a.join("qualities.csv"));
    assert_eq!(header, ["id", "quality"]);
    assert_eq!(rows.len(), COUNT);
}

#[test]
fn synth_rejects_invalid_mix() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    let o = salseg(&["synth", "--out", s(&out), "--count", "5", "--mix", "0.5,0.2,0.1,0.1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("mix"), "{}", stderr(&o));
    let o = salseg(&["synth", "--out", s(&out), "--count", "5", "--mix", "0.5,0.5"]);
    assert_eq!(code(&o), 1);
    assert!(!out.join("images").exists());
}

#[test]
fn synth_without_out_is_a_validation_error() {
    let o = salseg(&["synth"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("salseg.toml");
    let out = dir.path().join("d");
    std::fs::write(&cfg, format!("out = {:?}\n[synth]\ncount = 3\nsize = 32\n", s(&out))).unwrap();
    ok(&["--config", s(&cfg), "synth"]);
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 3);
    let out2 = dir.path().join("e");
    ok(&["--config", s(&cfg), "synth", "--out", s(&out2), "--count", "4"]);
    assert_eq!(std::fs::read_dir(out2.join("images")).unwrap().count(), 4);

    std::fs::write(&cfg, "colour = 3\n").unwrap();
    assert_eq!(code(&salseg(&["--config", s(&cfg), "synth"])), 1);
}

#[test]
fn filter_keeps_every_satisfactory_map() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d");
    synth(&data, &["--mix", "1,0,0,0"]);
    let o = ok(&["filter", "--data", s(&data)]);
    assert!(stdout(&o).contains(&format!("kept {COUNT} of {COUNT}")), "{}", stdout(&o));
    let kept = std::fs::read_to_string(data.join("kept_ids.txt")).unwrap();
    assert_eq!(kept.lines().count(), COUNT);
    let (header, rows) = csv_rows(&data.join("confidence_report.csv"));
    assert_eq!(
        header,
        ["id", "n_contours", "i_max", "i_second", "m_of_i_max", "m_max", "rejected", "fired_rule"]
    );
    assert!(rows.iter().all(|r| r[6] == "false"));
}

/// `(I, M)` of the 8-connected components of `{v > t}`, labelled by a
/// union-find pass over the raster.
fn components(map: &ndarray::Array2<f32>, t: f32) -> Vec<(f64, f64)> {
    let (h, w) = map.dim();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let on = |r: usize, c: usize| map[(r, c)] > t;
    for r in 0..h {
        for c in 0..w {
            if !on(r, c) {
                continue;
            }
            let prev = [(0, -1), (-1, -1), (-1, 0), (-1, 1)];
            for (dr, dc) in prev {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nc >= 0 && (nc as usize) < w && on(nr as usize, nc as usize) {
                    let a = find(&mut parent, r * w + c);
                    let b = find(&mut parent, nr as usize * w + nc as usize);
                    parent[a] = b;
                }
            }
        }
    }
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in 0..h {
        for c in 0..w {
            if on(r, c) {
                let root = find(&mut parent, r * w + c);
                let e = acc.entry(root).or_default();
                e.0 += f64::from(map[(r, c)]);
                e.1 += 1;
            }
        }
    }
    acc.values().map(|&(i, n)| (i, i / n as f64)).collect()
}

#[test]
fn filter_with_zero_a4_removes_every_map_whose_argmaxes_disagree() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    ok(&["filter", "--data", s(&f.data), "--out", s(dir.path()), "--a4", "0.0"]);
    let (_, rows) = csv_rows(&dir.path().join("confidence_report.csv"));
    assert_eq!(rows.len(), COUNT);
    let mut disagreeing = 0;
    for row in &rows {
        let sal = read_unit_png(&f.data.join("saliency").join(format!("{}.png", row[0]))).unwrap();
        let comps = components(&sal, 0.3);
        assert_eq!(row[1], comps.len().to_string(), "{}", row[0]);
        if comps.len() < 2 {
            assert_eq!(row[6], "false");
            continue;
        }
        let arg = |key: fn(&(f64, f64)) -> f64| {
            (0..comps.len())
                .max_by(|&a, &b| key(&comps[a]).total_cmp(&key(&comps[b])))
                .unwrap()
        };
        if arg(|c| c.0) != arg(|c| c.1) {
            disagreeing += 1;
            assert_eq!(row[6], "true", "{} has disagreeing argmaxes but was kept", row[0]);
        }
    }
    assert!(disagreeing > 0, "fixture should contain multi-contour maps");
}

#[test]
fn filter_rejects_invalid_params_and_missing_data() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = s(dir.path());
    let o = salseg(&["filter", "--data", s(&f.data), "--out", out, "--a1", "3", "--a2", "2"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("a2"));
    assert_eq!(code(&salseg(&["filter", "--data", s(&f.data), "--out", out, "--a4", "1.0"])), 1);
    let missing = dir.path().join("nothing");
    assert_eq!(code(&salseg(&["filter", "--data", s(&missing)])), 1);
}

#[test]
fn train_writes_one_checkpoint_per_fold_and_variant() {
    let f = fixture();
    for v in ["unet", "unet-sa", "unet-sa-c"] {
        for k in 1..=5 {
            let dir = f.run.join(v).join(format!("fold{k}"));
            assert!(dir.join("best.ckpt").is_file());
            assert!(dir.join("record.json").is_file());
        }
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.run.join("manifest.json")).unwrap()).unwrap();
    let artifacts: Vec<&str> = manifest["artifacts"].as_array().unwrap().iter().map(|a| a.as_str().unwrap()).collect();
    for (path, _) in snapshot(&f.run) {
        let p = path.to_str().unwrap();
        if p != "manifest.json" {
            assert!(artifacts.contains(&p), "{p} not in manifest");
        }
    }
    assert_eq!(manifest["settings"]["fold_seed"], 0);
    assert_eq!(manifest["settings"]["train"]["seed"], 0);
}

#[test]
fn unet_training_needs_no_saliency() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    copy_dir(&f.data, &data);
    std::fs::remove_dir_all(data.join("saliency")).unwrap();
    let run = dir.path().join("run");
    let mut args = train_args(&data, &run, "unet");
    args.extend(["--stop-after", "1"]);
    ok(&args);
    assert!(run.join("unet/fold1/best.ckpt").is_file());

    let o = salseg(&train_args(&data, &dir.path().join("run2"), "unet-sa"));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("saliency"));
}

#[test]
fn sa_c_training_leaves_saliency_on_disk_untouched() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    copy_dir(&f.data, &data);
    let before = snapshot(&data);
    let run = dir.path().join("run");
    let mut args = train_args(&data, &run, "unet-sa-c");
    args.extend(["--stop-after", "1"]);
    ok(&args);
    assert_eq!(snapshot(&data), before);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    ok(&train_args(&f.data, &full, "unet"));

    let mut first = train_args(&f.data, &split, "unet");
    first.extend(["--stop-after", "2"]);
    let o = ok(&first);
    assert!(stdout(&o).contains("stopped after 2"));
    assert!(!split.join("unet/fold3").exists());
    let mut again = train_args(&f.data, &split, "unet");
    again.push("--resume");
    let o = ok(&again);
    assert!(!stdout(&o).contains("unet fold 1:"), "completed folds are not retrained");

    let strip = |m: BTreeMap<PathBuf, Vec<u8>>| {
        m.into_iter().filter(|(p, _)| p != Path::new("manifest.json")).collect::<BTreeMap<_, _>>()
    };
    assert_eq!(strip(snapshot(&full)), strip(snapshot(&split)));
    // the fixture's unet folds share every setting with this run
    for k in 1..=5 {
        let rel = format!("unet/fold{k}/best.ckpt");
        assert_eq!(std::fs::read(full.join(&rel)).unwrap(), std::fs::read(f.run.join(&rel)).unwrap());
    }
}

#[test]
fn existing_run_needs_resume_with_identical_settings() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    let mut args = train_args(&f.data, &run, "unet");
    args.extend(["--stop-after", "1"]);
    ok(&args);
    let o = salseg(&args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--resume"));
    let mut changed = train_args(&f.data, &run, "unet");
    changed.extend(["--resume", "--lr", "0.5"]);
    let o = salseg(&changed);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("settings differ"));
}

#[test]
fn invalid_training_flags_exit_one() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    let cases: [&[&str]; 5] = [
        &["--variant", "vnet"],
        &["--variant", "unet", "--size", "40"],
        &["--variant", "unet", "--filters", "2,2"],
        &["--variant", "unet", "--lr", "-1"],
        &["--variant", "unet", "--batch", "0"],
    ];
    for extra in cases {
        let mut args = vec!["train", "--data", s(&f.data), "--out", s(&run)];
        args.extend_from_slice(extra);
        assert_eq!(code(&salseg(&args)), 1, "{extra:?}");
    }
}

#[test]
fn diverging_training_aborts_with_runtime_status() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    let mut args = train_args(&f.data, &run, "unet");
    args.extend(["--lr", "1e30", "--stop-after", "1"]);
    let o = salseg(&args);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("fold 1"));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn evaluate_covers_every_image_and_fold() {
    let f = fixture();
    let eval = f.run.join("eval");
    for v in ["unet", "unet-sa", "unet-sa-c"] {
        let (header, rows) = csv_rows(&eval.join(format!("{v}_per_image.csv")));
        assert_eq!(header, IMAGE_CSV_HEADER);
        assert_eq!(rows.len(), COUNT);
        assert!(rows.iter().all(|r| r[2] == v));
        assert_eq!(std::fs::read_dir(eval.join("pred").join(v)).unwrap().count(), COUNT);
    }
    let (header, rows) = csv_rows(&eval.join("per_fold.csv"));
    assert_eq!(header, FOLD_CSV_HEADER);
    assert_eq!(rows.len(), 5 * 3);
    let summary = std::fs::read_to_string(eval.join("summary.md")).unwrap();
    for label in ["| U-Net |", "| U-Net-SA |", "| U-Net-SA-C |"] {
        assert!(summary.contains(label));
    }
}

#[test]
fn evaluate_and_report_are_byte_identical_on_rerun() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    copy_dir(&f.run, &run);
    let before = snapshot(&run.join("eval"));
    ok(&["evaluate", "--run", s(&run)]);
    assert_eq!(snapshot(&run.join("eval")), before);
    ok(&["report", "--run", s(&run)]);
    let first = snapshot(&run.join("report"));
    ok(&["report", "--run", s(&run)]);
    assert_eq!(snapshot(&run.join("report")), first);
}

#[test]
fn evaluate_rejects_swapped_checkpoints() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    copy_dir(&f.run, &run);
    std::fs::copy(run.join("unet/fold1/best.ckpt"), run.join("unet/fold2/best.ckpt")).unwrap();
    let o = salseg(&["evaluate", "--run", s(&run)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("expected unet fold 2"), "{}", stderr(&o));

    std::fs::remove_file(run.join("unet/fold2/best.ckpt")).unwrap();
    let o = salseg(&["evaluate", "--run", s(&run)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing checkpoint"));
    assert_eq!(code(&salseg(&["evaluate", "--run", s(dir.path())])), 1);
}

#[test]
fn compare_with_itself_reports_every_metric_as_undefined() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let csv = f.run.join("eval/unet_per_image.csv");
    let out = dir.path().join("cmp.csv");
    let o = salseg(&["compare", s(&csv), s(&csv), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    for label in ["DSC", "JI", "TPR", "FPR", "HD", "MD"] {
        assert!(err.contains(&format!("{label}: all paired differences are zero")), "{err}");
    }
}

#[test]
fn compare_writes_per_image_metrics_only() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cmp.csv");
    let a = f.run.join("eval/unet_per_image.csv");
    let b = f.run.join("eval/unet-sa_per_image.csv");
    let o = salseg(&["compare", s(&a), s(&b), "--out", s(&out)]);
    assert!(code(&o) <= 1, "{}", stderr(&o));
    assert!(stdout(&o).contains("U-Net vs U-Net-SA"));
    let (header, rows) = csv_rows(&out);
    assert_eq!(header, COMPARISON_CSV_HEADER);
    assert!(!rows.is_empty());
    for r in &rows {
        assert!(["dsc", "ji", "tpr", "fpr", "hd", "md"].contains(&r[0].as_str()), "{r:?}");
        let p: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(r[4], (p < 0.05).to_string());
    }
}

#[test]
fn compare_lists_unmatched_ids() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let a = f.run.join("eval/unet_per_image.csv");
    let text = std::fs::read_to_string(&a).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let dropped = lines.remove(3).split(',').next().unwrap().to_string();
    let b = dir.path().join("short.csv");
    std::fs::write(&b, lines.join("\n") + "\n").unwrap();
    let o = salseg(&["compare", s(&a), s(&b), "--out", s(&dir.path().join("c.csv"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(&dropped), "{}", stderr(&o));
}

#[test]
fn report_renders_one_panel_per_image() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    copy_dir(&f.run, &run);
    ok(&["report", "--run", s(&run)]);
    let panels = run.join("report/panels");
    assert_eq!(std::fs::read_dir(&panels).unwrap().count(), COUNT);
    let first = std::fs::read_dir(&panels).unwrap().next().unwrap().unwrap().path();
    // image, truth, saliency and three predictions
    assert_eq!(read_unit_png(&first).unwrap().dim(), (SIDE, 6 * SIDE + 5 * 2));
    let summary = std::fs::read_to_string(run.join("report/summary.md")).unwrap();
    assert!(summary.contains("| U-Net-SA-C |"));
    assert!(!summary.contains("Missing inputs"));
}

#[test]
fn report_omits_absent_columns_and_lists_missing_inputs() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    ok(&train_args(&f.data, &run, "unet"));
    let o = ok(&["report", "--run", s(&run)]);
    assert!(stderr(&o).contains("missing: predictions for unet"));
    let summary = std::fs::read_to_string(run.join("report/summary.md")).unwrap();
    assert!(summary.contains("Missing inputs"));

    ok(&["evaluate", "--run", s(&run)]);
    ok(&["report", "--run", s(&run)]);
    let first = std::fs::read_dir(run.join("report/panels")).unwrap().next().unwrap().unwrap().path();
    // image, truth and one prediction; no saliency column for a unet-only run
    assert_eq!(read_unit_png(&first).unwrap().dim(), (SIDE, 3 * SIDE + 2 * 2));
}
