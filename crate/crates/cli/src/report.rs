//! Static report: one panel per test image (image | truth | saliency |
//! prediction per variant) and a markdown summary.

use std::fmt::Write as _;

use image::{GrayImage, Luma};
use ndarray::Array2;
use salseg_core::dataset::{self, load_dataset_with, FoldPlan, Sample, SALIENCY_DIR};
use salseg_core::pipeline::resize_all;

use crate::commands::{PER_FOLD_FILE, PRED_DIR, SUMMARY_FILE};
use crate::error::{io_error, CliResult};
use crate::manifest::{RunManifest, EVAL_DIR, PLAN_FILE, REPORT_DIR};
use crate::ReportArgs;

pub const PANELS_DIR: &str = "panels";
const GAP: u32 = 2;

fn to_gray(values: &Array2<f32>) -> GrayImage {
    let (h, w) = values.dim();
    GrayImage::from_fn(w as u32, h as u32, |c, r| {
        Luma([(values[(r as usize, c as usize)].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn compose(tiles: &[GrayImage], side: u32) -> GrayImage {
    let n = tiles.len() as u32;
    let mut panel = GrayImage::from_pixel(n * side + n.saturating_sub(1) * GAP, side, Luma([255]));
    for (i, tile) in tiles.iter().enumerate() {
        let x0 = i as u32 * (side + GAP);
        for (x, y, p) in tile.enumerate_pixels() {
            if x < side && y < side {
                panel.put_pixel(x0 + x, y, *p);
            }
        }
    }
    panel
}

pub fn report(args: &ReportArgs) -> CliResult<()> {
    let out = &args.run;
    let mut manifest = RunManifest::load(out)?;
    let settings = manifest.settings.clone();
    let side = settings.input_side;
    let plan = FoldPlan::load(&out.join(PLAN_FILE))?;
    let root = args.data.clone().unwrap_or_else(|| settings.dataset_root.clone());
    let mut missing: Vec<String> = Vec::new();

    let want_saliency = settings.variants.iter().any(|v| v.uses_saliency());
    let has_saliency = want_saliency && root.join(SALIENCY_DIR).is_dir();
    if want_saliency && !has_saliency {
        missing.push(format!("saliency maps ({})", root.join(SALIENCY_DIR).display()));
    }
    let samples: Vec<Sample> = match load_dataset_with(&root, has_saliency) {
        Ok(s) => resize_all(&s, side)?,
        Err(e) => {
            missing.push(format!("dataset ({e})"));
            Vec::new()
        }
    };
    let by_id = dataset::index_by_id(&samples)?;

    let eval_dir = out.join(EVAL_DIR);
    let variants: Vec<_> = settings
        .variants
        .iter()
        .copied()
        .filter(|v| {
            let present = eval_dir.join(PRED_DIR).join(v.name()).is_dir();
            if !present {
                missing.push(format!("predictions for {v}"));
            }
            present
        })
        .collect();

    let panels_dir = out.join(REPORT_DIR).join(PANELS_DIR);
    std::fs::create_dir_all(&panels_dir).map_err(io_error(panels_dir.display()))?;
    let blank = GrayImage::from_pixel(side as u32, side as u32, Luma([0]));
    let mut columns = Vec::new();
    if !samples.is_empty() {
        columns.extend(["image", "truth"]);
        if has_saliency {
            columns.push("saliency");
        }
    }
    columns.extend(variants.iter().map(|v| v.label()));

    let mut panels = 0usize;
    for fold_ids in &plan.folds {
        for id in fold_ids {
            let mut tiles = Vec::new();
            if !samples.is_empty() {
                match by_id.get(id.as_str()) {
                    Some(s) => {
                        tiles.push(to_gray(&s.image));
                        tiles.push(dataset::mask_to_gray(&s.mask));
                        if has_saliency {
                            tiles.push(to_gray(&s.saliency));
                        }
                    }
                    None => {
                        missing.push(format!("sample {id}"));
                        let n = if has_saliency { 3 } else { 2 };
                        tiles.extend(std::iter::repeat_n(blank.clone(), n));
                    }
                }
            }
            for v in &variants {
                let path = eval_dir.join(PRED_DIR).join(v.name()).join(format!("{id}.png"));
                match dataset::read_unit_png(&path) {
                    Ok(p) if p.dim() == (side, side) => tiles.push(to_gray(&p)),
                    _ => {
                        missing.push(format!("prediction {}", path.display()));
                        tiles.push(blank.clone());
                    }
                }
            }
            if tiles.is_empty() {
                continue;
            }
            let path = panels_dir.join(format!("{id}.png"));
            dataset::write_png(&path, &compose(&tiles, side as u32))?;
            manifest.add_artifact(&path);
            panels += 1;
        }
    }

    let mut doc = String::from("# Segmentation report\n\n## Run\n\n");
    let names: Vec<&str> = settings.variants.iter().map(|v| v.label()).collect();
    let _ = writeln!(doc, "- models: {}", names.join(", "));
    let _ = writeln!(doc, "- images: {} in {} folds (fold seed {})", plan.all_ids().len(), plan.num_folds(), settings.fold_seed);
    let _ = writeln!(doc, "- input side: {side}");
    let _ = writeln!(doc, "- encoder filters: {:?}", settings.encoder_filters);
    let t = &settings.train;
    let _ = writeln!(
        doc,
        "- training: lr {}, batch {}, patience {}, max epochs {}, seed {}",
        t.learning_rate, t.batch_size, t.patience, t.max_epochs, t.seed
    );
    doc.push_str("\n## Metrics (mean (std) over folds)\n\n");
    match std::fs::read_to_string(eval_dir.join(SUMMARY_FILE)) {
        Ok(table) => doc.push_str(&table),
        Err(_) => {
            missing.push(format!("{}", eval_dir.join(SUMMARY_FILE).display()));
            doc.push_str("not available; run `salseg evaluate` first\n");
        }
    }
    if !eval_dir.join(PER_FOLD_FILE).exists() {
        missing.push(format!("{}", eval_dir.join(PER_FOLD_FILE).display()));
    }
    let _ = write!(doc, "\n## Panels\n\n{panels} panels in `{PANELS_DIR}/`, columns: {}\n", columns.join(" | "));
    if !missing.is_empty() {
        doc.push_str("\n## Missing inputs\n\n");
        for m in &missing {
            let _ = writeln!(doc, "- {m}");
        }
    }
    let doc_path = out.join(REPORT_DIR).join(SUMMARY_FILE);
    std::fs::write(&doc_path, &doc).map_err(io_error(doc_path.display()))?;
    manifest.add_artifact(&doc_path);
    manifest.save()?;

    println!("wrote {panels} panels and {}", doc_path.display());
    for m in &missing {
        eprintln!("missing: {m}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_places_tiles_with_gaps() {
        let a = GrayImage::from_pixel(4, 4, Luma([10]));
        let b = GrayImage::from_pixel(4, 4, Luma([20]));
        let p = compose(&[a, b], 4);
        assert_eq!(p.dimensions(), (10, 4));
        assert_eq!(p.get_pixel(3, 0)[0], 10);
        assert_eq!(p.get_pixel(4, 0)[0], 255);
        assert_eq!(p.get_pixel(6, 3)[0], 20);
    }
}
