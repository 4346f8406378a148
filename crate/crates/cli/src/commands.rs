use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use maskforge::checkpoint::Checkpoint;
use maskforge::evaluation::{evaluate_dataset, DatasetReport};
use maskforge::ingestion::{
    assign_splits, load_pair, scan_pairs, synth_indexed, DatasetManifest, Degradation, PairLayout,
    PairRecord, Split,
};
use maskforge::mask::{Mask, Provenance};
use maskforge::maskgen::predict_mask;
use maskforge::postprocess::{baseline_subtract, filter_valid, white_fraction, Verdict, BASELINE_THRESHOLD};
use maskforge::training::{self, TrainConfig};
use maskforge::{Error, Result};
use serde::Serialize;

use crate::panel::render_panel;
use crate::{EvalArgs, FilterArgs, GenerateArgs, PairArgs, PlotArgs, SynthArgs, TrainArgs};

/// Short machine-readable name for an error.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::Decode { .. } => "decode",
        Error::Encode(_) => "encode",
        Error::Shape { .. } => "shape",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::NoValidPairs { .. } => "no_valid_pairs",
        Error::Manifest(_) => "manifest",
        Error::NonBinaryMask(_) => "non_binary_mask",
        Error::NonFinite(_) => "non_finite",
        Error::MissingPredictions(_) => "missing_predictions",
        Error::Diverged { .. } => "diverged",
        Error::Checkpoint(_) => "checkpoint",
        Error::Stage { source, .. } => error_kind(source),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Encode(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::Encode(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Write a manifest with paths relative to its own directory when possible.
fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = parent_dir(path);
    let base = fs::canonicalize(&base).unwrap_or(base);
    let mut records = manifest.records.clone();
    for r in &mut records {
        for p in [Some(&mut r.original_path), Some(&mut r.tampered_path), r.mask_path.as_mut()].into_iter().flatten() {
            if let Ok(abs) = fs::canonicalize(&*p) {
                *p = abs;
            }
        }
        r.relative_to(&base);
    }
    DatasetManifest::new(records)?.write_jsonl(path)
}

fn select<'a>(manifest: &'a DatasetManifest, split: &str) -> Result<Vec<&'a PairRecord>> {
    if split == "all" {
        return Ok(manifest.records.iter().collect());
    }
    let s = Split::parse(split)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown split {split:?}; use train, val, test or all")))?;
    Ok(manifest.split(s))
}

pub fn pair(a: &PairArgs) -> Result<()> {
    let layout = PairLayout::named(&a.layout)?;
    let outcome = scan_pairs(&a.root, &layout)?;
    let mut manifest = outcome.manifest;
    if a.val_frac.is_some() || a.test_frac.is_some() {
        manifest = assign_splits(&manifest, a.val_frac.unwrap_or(0.0), a.test_frac.unwrap_or(0.0), a.seed)?;
    }
    write_manifest(&manifest, &a.out)?;
    println!(
        "{}",
        serde_json::json!({ "pairs": manifest.records.len(), "skipped": outcome.skipped.count(), "manifest": a.out })
    );
    if outcome.skipped.count() > 0 {
        eprintln!("skipped: {}", outcome.skipped.summary());
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<(u32, u32)> {
    let bad = || Error::InvalidArgument(format!("size {s:?} must be N or HxW"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?)),
        None => {
            let n = s.parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.n == 0 || a.val + a.test > a.n {
        return Err(Error::InvalidArgument(format!("{} pairs cannot hold {} val + {} test", a.n, a.val, a.test)));
    }
    let size = parse_size(&a.size)?;
    let degradation = Degradation { jpeg_quality: a.jpeg_quality, blur_sigma: a.blur_sigma };
    create_dir(&a.out)?;
    let n_train = a.n - a.val - a.test;
    let mut records = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let (pair, mask) = synth_indexed(a.seed, i, size, degradation)?;
        let id = pair.pair_id.clone();
        let files = [format!("{id}_orig.png"), format!("{id}_tamp.png"), format!("{id}_mask.png")];
        for (name, img) in files[..2].iter().zip([&pair.original, &pair.tampered]) {
            let path = a.out.join(name);
            img.save(&path).map_err(|e| Error::Encode(format!("{}: {e}", path.display())))?;
        }
        mask.save_png(&a.out.join(&files[2]))?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + a.val {
            Split::Val
        } else {
            Split::Test
        };
        records.push(PairRecord {
            pair_id: id,
            original_path: files[0].clone().into(),
            tampered_path: files[1].clone().into(),
            mask_path: Some(files[2].clone().into()),
            width: size.1,
            height: size.0,
            split,
            roles_verified: true,
        });
    }
    DatasetManifest::new(records)?.write_jsonl(&a.out.join("manifest.jsonl"))?;
    println!("{}", serde_json::json!({ "pairs": a.n, "out": a.out }));
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(t) = a.threshold {
        config.threshold = t;
    }
    if let Some(e) = a.epochs {
        config.max_epochs = e;
    }
    if a.max_steps.is_some() {
        config.max_steps = a.max_steps;
    }
    config.validate()?;
    let manifest = DatasetManifest::read_jsonl(&a.manifest)?;
    manifest.check_files()?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        p.into()
    });
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io_err(&log_path))?);
    let outcome = training::train(&config, &manifest.split(Split::Train), &manifest.split(Split::Val), Some(&mut log))?;
    log.flush().map_err(io_err(&log_path))?;
    outcome.best.save(&a.out)?;
    println!(
        "{}",
        serde_json::json!({ "best_epoch": outcome.best.epoch, "best_val_f1": outcome.best.best_val_f1, "out": a.out })
    );
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    if !(a.threshold >= 0.0 && a.threshold.is_finite()) {
        return Err(Error::InvalidArgument(format!("threshold {} must be >= 0", a.threshold)));
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let manifest = DatasetManifest::read_jsonl(&a.manifest)?;
    let records = select(&manifest, &a.split)?;
    create_dir(&a.out)?;
    for r in &records {
        let pair = load_pair(r)?;
        let mask = predict_mask(&ckpt.model, &pair, (a.scale, a.scale), a.threshold)?;
        mask.save_png(&a.out.join(format!("{}_mask.png", r.pair_id)))?;
        if a.baseline {
            baseline_subtract(&pair, BASELINE_THRESHOLD)?.save_png(&a.out.join(format!("{}_baseline.png", r.pair_id)))?;
        }
    }
    println!("{}", serde_json::json!({ "masks": records.len(), "out": a.out }));
    Ok(())
}

#[derive(Serialize)]
struct FilterRow {
    pair_id: String,
    file: String,
    fraction: f64,
    #[serde(flatten)]
    verdict: Verdict,
}

fn pair_id_from_stem(stem: &str) -> &str {
    ["_mask", "_baseline"].iter().find_map(|s| stem.strip_suffix(s)).unwrap_or(stem)
}

pub fn filter(a: &FilterArgs) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(&a.input)
        .map_err(io_err(&a.input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut rows = Vec::with_capacity(files.len());
    for path in &files {
        let mask = Mask::load(path, Provenance::Model)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        rows.push(FilterRow {
            pair_id: pair_id_from_stem(stem).to_string(),
            file: path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
            fraction: white_fraction(&mask)?,
            verdict: filter_valid(&mask)?,
        });
    }
    write_jsonl(&a.report, &rows)?;
    let valid = rows.iter().filter(|r| r.verdict.is_valid()).count();
    println!("{}", serde_json::json!({ "masks": rows.len(), "valid": valid, "report": a.report }));
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::read_jsonl(&a.manifest)?;
    let records = select(&manifest, &a.split)?;
    let report = evaluate_dataset(&records, &a.pred, &a.suffix)?;
    write_json(&a.out, &report)?;
    let m = &report.micro;
    println!(
        "{}",
        serde_json::json!({ "images": report.images, "f1": m.f1, "iou": m.iou, "precision": m.precision,
            "recall": m.recall, "accuracy": m.accuracy, "out": a.out })
    );
    Ok(())
}

#[derive(Serialize)]
struct PanelRow {
    pair_id: String,
    panel: String,
    /// Per-image F1 from each `--report`, in the order given.
    f1: Vec<Option<f64>>,
}

pub fn plot(a: &PlotArgs) -> Result<()> {
    let manifest = DatasetManifest::read_jsonl(&a.manifest)?;
    let records = select(&manifest, &a.split)?;
    let reports = a
        .report
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str::<DatasetReport>(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(&a.out)?;
    let mut index = Vec::with_capacity(records.len());
    for r in &records {
        let pair = load_pair(r)?;
        let model_path = a.pred.join(format!("{}_mask.png", r.pair_id));
        let model = Mask::load(&model_path, Provenance::Model)?;
        let baseline_path = a.pred.join(format!("{}_baseline.png", r.pair_id));
        let baseline = if baseline_path.is_file() {
            Mask::load(&baseline_path, Provenance::Baseline)?
        } else {
            baseline_subtract(&pair, BASELINE_THRESHOLD)?
        };
        let name = format!("{}_panel.png", r.pair_id);
        let path = a.out.join(&name);
        render_panel(&pair, &baseline, &model)?
            .save(&path)
            .map_err(|e| Error::Encode(format!("{}: {e}", path.display())))?;
        let f1 = reports
            .iter()
            .map(|rep| rep.per_image.iter().find(|m| m.pair_id == r.pair_id).map(|m| m.metrics.f1))
            .collect();
        index.push(PanelRow { pair_id: r.pair_id.clone(), panel: name, f1 });
    }
    write_jsonl(&a.out.join("panels.jsonl"), &index)?;
    println!("{}", serde_json::json!({ "panels": index.len(), "out": a.out }));
    Ok(())
}
