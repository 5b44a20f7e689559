//! End-to-end runs: manifest in, checkpoints, logs, test masks and metrics out.
//!
//! Output layout of a training run:
//!
//! ```text
//! <output_dir>/run.toml                 fully resolved configuration
//! <output_dir>/folds.toml               image ids per fold
//! <output_dir>/fold<k>/epochs.csv       one row per epoch
//! <output_dir>/fold<k>/best.ckpt        best-validation checkpoint
//! <output_dir>/fold<k>/pred/<id>.png    post-processed test masks
//! <output_dir>/test_metrics.csv         per test image plus the mean
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inference::predict_mask;
use crate::io::{load_manifest, load_record, save_mask, DatasetManifest, Split};
use crate::metrics::{confusion, mean_report, metrics, ConfusionCounts, MetricsReport};
use crate::trainer::{fixed_split, fold_rng, make_folds, train_fold, EpochLog, FoldPlan, Sample};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub counts: ConfusionCounts,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub plan: FoldPlan,
    pub scores: Vec<ImageScore>,
    pub mean: MetricsReport,
    pub logs: Vec<Vec<EpochLog>>,
}

pub fn score(id: &str, pred: &crate::SegMask, truth: &crate::SegMask) -> Result<ImageScore> {
    let counts = confusion(pred, truth)?;
    Ok(ImageScore { id: id.to_string(), counts, report: metrics(&counts) })
}

pub const METRICS_HEADER: &str = "id,tp,fp,fn,tn,precision,recall,f1,overlap";

/// Per-image rows followed by a `mean` row of the per-image metrics.
pub fn write_metrics_csv(out: &mut dyn Write, scores: &[ImageScore]) -> std::io::Result<MetricsReport> {
    writeln!(out, "{METRICS_HEADER}")?;
    for s in scores {
        let (c, r) = (&s.counts, &s.report);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.id, c.tp, c.fp, c.fn_, c.tn, r.precision, r.recall, r.f1, r.overlap
        )?;
    }
    let mean = mean_report(&scores.iter().map(|s| s.report).collect::<Vec<_>>());
    let sum = scores.iter().fold(ConfusionCounts::default(), |a, s| ConfusionCounts {
        tp: a.tp + s.counts.tp,
        fp: a.fp + s.counts.fp,
        fn_: a.fn_ + s.counts.fn_,
        tn: a.tn + s.counts.tn,
    });
    writeln!(
        out,
        "mean,{},{},{},{},{},{},{},{}",
        sum.tp, sum.fp, sum.fn_, sum.tn, mean.precision, mean.recall, mean.f1, mean.overlap
    )?;
    Ok(mean)
}

/// Load every record that has a truth mask.
pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let (image, mask) = load_record(manifest, r)?;
            let mask = mask.ok_or_else(|| Error::MissingFile(manifest.root.join(format!("<mask of {}>", r.id))))?;
            Ok(Sample { id: r.id.clone(), image, mask })
        })
        .collect()
}

/// Folds for a manifest: its own train/test split when it has one,
/// cross-validation otherwise.
pub fn plan_folds(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<FoldPlan> {
    let mut rng = fold_rng(&cfg.train);
    let with = |s: Split| manifest.records.iter().filter(|r| r.split == s).map(|r| r.id.clone()).collect::<Vec<_>>();
    let (train, test) = (with(Split::Train), with(Split::Test));
    if train.is_empty() && test.is_empty() {
        let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
        make_folds(&ids, cfg.train.folds, cfg.train.validation_fraction, &mut rng)
    } else {
        fixed_split(&train, &test, cfg.train.validation_fraction, &mut rng)
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn create_file(p: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?))
}

/// Run the full protocol, or a single fold when `only_fold` is set.
pub fn run_training(cfg: &RunConfig, only_fold: Option<usize>) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.resolve_seed();
    let manifest = load_manifest(&cfg.manifest)?;
    cfg.apply_geometry(&manifest.geometry)?;
    let samples = load_samples(&manifest)?;
    let plan = plan_folds(&manifest, &cfg)?;
    if let Some(k) = only_fold {
        if k >= plan.folds.len() {
            return Err(Error::Config(format!("fold {k} requested, plan has {}", plan.folds.len())));
        }
    }

    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    cfg.save(&out.join("run.toml"))?;
    let plan_text = toml::to_string(&plan).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out.join("folds.toml"), plan_text).map_err(|e| Error::io(out.join("folds.toml"), e))?;

    let (pw, ph) = (cfg.train.sampler.patch_w, cfg.train.sampler.patch_h);
    let mut scores = Vec::new();
    let mut logs = Vec::new();
    for fold in plan.folds.iter().filter(|f| only_fold.is_none_or(|k| k == f.index)) {
        let dir = out.join(format!("fold{}", fold.index));
        let pred_dir = dir.join("pred");
        create_dir(&pred_dir)?;
        let mut train = cfg.train.clone();
        train.checkpoint_dir = Some(dir.clone());

        let csv_path = dir.join("epochs.csv");
        let mut csv = create_file(&csv_path)?;
        writeln!(csv, "{}", EpochLog::CSV_HEADER).map_err(|e| Error::io(&csv_path, e))?;
        let outcome = train_fold(&samples, fold, &cfg.model, &train, &mut |log| {
            writeln!(csv, "{}", log.csv_row()).and_then(|_| csv.flush()).map_err(|e| Error::io(&csv_path, e))
        })?;
        if cfg.train.epochs == 0 {
            outcome.best.save(&dir.join("best.ckpt"))?;
        }

        for id in &fold.test {
            let s = samples.iter().find(|s| &s.id == id).expect("fold ids come from the manifest");
            let pred = predict_mask(&outcome.best.model, &s.image, pw, ph, true)?;
            save_mask(&pred, &pred_dir.join(format!("{id}.png")))?;
            scores.push(score(id, &pred, &s.mask)?);
        }
        logs.push(outcome.logs);
    }

    let path = out.join("test_metrics.csv");
    let mut f = create_file(&path)?;
    let mean = write_metrics_csv(&mut f, &scores).and_then(|m| f.flush().map(|_| m)).map_err(|e| Error::io(&path, e))?;
    Ok(RunSummary { output_dir: out, plan, scores, mean, logs })
}

/// Predict masks for every record of a manifest into `out_dir/<id>.png`.
pub fn predict_manifest(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    out_dir: &Path,
    cleanup: bool,
    probabilities: bool,
) -> Result<Vec<PathBuf>> {
    let (pw, ph) = (manifest.geometry.output_w, manifest.geometry.output_h);
    let mut written = Vec::new();
    for r in &manifest.records {
        let (image, _) = load_record(manifest, r)?;
        written.extend(predict_image(ckpt, &image, &r.id, pw, ph, out_dir, cleanup, probabilities)?);
    }
    Ok(written)
}

/// Predict one image and write `<id>.png` (and `<id>_prob.png`).
#[allow(clippy::too_many_arguments)]
pub fn predict_image(
    ckpt: &Checkpoint,
    image: &crate::Tensor<f32>,
    id: &str,
    patch_w: usize,
    patch_h: usize,
    out_dir: &Path,
    cleanup: bool,
    probabilities: bool,
) -> Result<Vec<PathBuf>> {
    let probs = crate::inference::predict_full(&ckpt.model, image, patch_w, patch_h)?;
    let mask = crate::inference::binarize(&probs)?;
    let mask = if cleanup { crate::morphology::postprocess(&mask) } else { mask };
    create_dir(out_dir)?;
    let p = out_dir.join(format!("{id}.png"));
    save_mask(&mask, &p)?;
    let mut written = vec![p];
    if probabilities {
        let q = out_dir.join(format!("{id}_prob.png"));
        crate::io::save_probability_map(&probs, &q)?;
        written.push(q);
    }
    Ok(written)
}

/// Compare same-named PNG masks in two directories, ordered by id.
pub fn compare_dirs(pred_dir: &Path, truth_dir: &Path) -> Result<Vec<ImageScore>> {
    let mut ids: Vec<String> = std::fs::read_dir(pred_dir)
        .map_err(|e| Error::io(pred_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .filter(|s| !s.ends_with("_prob"))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::MissingFile(pred_dir.join("*.png")));
    }
    ids.iter()
        .map(|id| {
            let pred = crate::io::load_mask(&pred_dir.join(format!("{id}.png")))?;
            let truth = crate::io::load_mask(&truth_dir.join(format!("{id}.png")))?;
            if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
                return Err(Error::DimensionMismatch(format!(
                    "{id}: prediction {}x{}, truth {}x{}",
                    pred.width(),
                    pred.height(),
                    truth.width(),
                    truth.height()
                )));
            }
            score(id, &pred, &truth)
        })
        .collect()
}
