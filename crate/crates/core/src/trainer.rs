//! Cross-validated training with per-epoch disc-centered re-sampling.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::Graph;
use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::error::{Error, Result};
use crate::fpenv::FlushSubnormals;
use crate::inference::predict_mask;
use crate::loss::{draw_penalty, loss_node, LossConfig};
use crate::mask::{mask_stats, MaskStats, SegMask};
use crate::metrics::{confusion, mean_report, metrics, MetricsReport};
use crate::sampler::{
    corner_patches, disc_patch_count, extract, sample_disc_patches, tiling, uniform_patches, PatchKind, PatchSpec,
    SamplerConfig,
};
use crate::tensor::{Real, Tensor};
use crate::unet::{geometry, Model, ModelConfig};

/// Where training patches are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Disc-centered patches at random feasible shifts.
    #[default]
    Dcpa,
    /// The same number of patches at uniformly random positions.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub validation_fraction: f64,
    pub lr: f64,
    /// Master seed; `None` is resolved by the caller (the CLI draws one).
    pub seed: Option<u64>,
    pub sampling: Sampling,
    /// Random horizontal and vertical flips.
    pub flips: bool,
    pub checkpoint_dir: Option<PathBuf>,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 351,
            batch_size: 8,
            folds: 5,
            validation_fraction: 0.30,
            lr: 0.001,
            seed: None,
            sampling: Sampling::Dcpa,
            flips: true,
            checkpoint_dir: None,
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        self.sampler.validate()?;
        self.loss.validate()
    }

    pub fn master_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// Deterministic seed from a list of parts (splitmix64 chaining).
pub fn seed_of(parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(0x5EED, |acc, &p| mix(acc ^ mix(p)))
}

const TAG_INIT: u64 = 1;
const TAG_FOLDS: u64 = 2;
const TAG_SAMPLER: u64 = 3;
const TAG_BATCH: u64 = 4;
const TAG_LOSS: u64 = 5;

/// Model configuration whose seed is derived from the training seed.
pub fn init_config(model: &ModelConfig, train: &TrainConfig) -> ModelConfig {
    ModelConfig { seed: seed_of(&[train.master_seed(), TAG_INIT, model.seed]), ..model.clone() }
}

/// RNG used for fold assignment.
pub fn fold_rng(train: &TrainConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed_of(&[train.master_seed(), TAG_FOLDS]))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

fn carve_validation<R: Rng + ?Sized>(
    mut pool: Vec<String>,
    fraction: f64,
    rng: &mut R,
) -> Result<(Vec<String>, Vec<String>)> {
    if pool.len() < 2 {
        return Err(Error::Config(format!("{} training images cannot be split into train and validation", pool.len())));
    }
    pool.shuffle(rng);
    let n_val = ((pool.len() as f64 * fraction).round() as usize).clamp(1, pool.len() - 1);
    let train = pool.split_off(n_val);
    Ok((train, pool))
}

/// Shuffle `ids` into `folds` near-equal test groups; the rest of each fold
/// is split into train and validation.
pub fn make_folds<R: Rng + ?Sized>(ids: &[String], folds: usize, validation_fraction: f64, rng: &mut R) -> Result<FoldPlan> {
    if folds < 2 {
        return Err(Error::Config(format!("folds must be at least 2, got {folds}")));
    }
    if ids.len() < folds {
        return Err(Error::Config(format!("{} images are too few for {folds} folds", ids.len())));
    }
    let mut order = ids.to_vec();
    order.shuffle(rng);
    let (base, extra) = (order.len() / folds, order.len() % folds);
    let mut groups = Vec::with_capacity(folds);
    let mut at = 0;
    for f in 0..folds {
        let n = base + usize::from(f < extra);
        groups.push(order[at..at + n].to_vec());
        at += n;
    }
    let mut out = Vec::with_capacity(folds);
    for (index, test) in groups.iter().enumerate() {
        let pool: Vec<String> =
            groups.iter().enumerate().filter(|&(j, _)| j != index).flat_map(|(_, g)| g.iter().cloned()).collect();
        let (train, validation) = carve_validation(pool, validation_fraction, rng)?;
        out.push(Fold { index, train, validation, test: test.clone() });
    }
    Ok(FoldPlan { folds: out })
}

/// One fold from a dataset's own train/test split; only the validation
/// carve-out is random.
pub fn fixed_split<R: Rng + ?Sized>(
    train: &[String],
    test: &[String],
    validation_fraction: f64,
    rng: &mut R,
) -> Result<FoldPlan> {
    let (tr, val) = carve_validation(train.to_vec(), validation_fraction, rng)?;
    Ok(FoldPlan { folds: vec![Fold { index: 0, train: tr, validation: val, test: test.to_vec() }] })
}

/// Flip a `(C, H, W)` patch and its mask about their centers.
pub fn flip_pair<T: Real>(patch: &Tensor<T>, mask: &SegMask, horizontal: bool, vertical: bool) -> (Tensor<T>, SegMask) {
    if !horizontal && !vertical {
        return (patch.clone(), mask.clone());
    }
    let (c, h, w) = patch.chw().expect("patch is (C, H, W)");
    let src = patch.data();
    let mut data = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            let row = &src[(ch * h + sy) * w..(ch * h + sy + 1) * w];
            if horizontal {
                data.extend(row.iter().rev());
            } else {
                data.extend_from_slice(row);
            }
        }
    }
    let (mw, mh) = (mask.width(), mask.height());
    let flipped = SegMask::from_fn(mw, mh, |x, y| {
        mask.get(if horizontal { mw - 1 - x } else { x }, if vertical { mh - 1 - y } else { y })
    });
    (Tensor::new(patch.shape(), data).expect("same shape"), flipped)
}

/// Flip each axis independently with probability 1/2.
pub fn augment_flip<T: Real, R: Rng + ?Sized>(patch: &Tensor<T>, mask: &SegMask, rng: &mut R) -> (Tensor<T>, SegMask) {
    let h = rng.random_bool(0.5);
    let v = rng.random_bool(0.5);
    flip_pair(patch, mask, h, v)
}

/// Loss and parameter gradients for a mini-batch. The network outputs are
/// stacked row-wise and the loss is taken over all pixels of the batch at
/// once, so soft precision and recall pool the whole batch.
pub fn batch_loss_and_gradients<T: Real>(
    model: &Model<T>,
    inputs: Vec<Tensor<T>>,
    targets: &[SegMask],
    loss: &LossConfig,
    penalty: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if inputs.len() != targets.len() {
        return Err(Error::Shape(format!("{} inputs for {} targets", inputs.len(), targets.len())));
    }
    let mut g = Graph::new();
    let params = model.attach(&mut g);
    let mut outputs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let x = g.leaf(input);
        outputs.push(model.forward_graph(&mut g, &params, x)?);
    }
    let probs = if outputs.len() == 1 { outputs[0] } else { g.stack_rows(&outputs)? };
    let target = SegMask::stack_rows(targets)?;
    let l = loss_node(&mut g, probs, &target, loss, penalty)?;
    let value = g.value(l).data()[0].as_f64();
    let mut grads = g.backward(l)?;
    let out = params
        .iter()
        .zip(model.params())
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok((value, out))
}

/// [`batch_loss_and_gradients`] for a single patch.
pub fn loss_and_gradients<T: Real>(
    model: &Model<T>,
    input: Tensor<T>,
    target: &SegMask,
    loss: &LossConfig,
    penalty: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    batch_loss_and_gradients(model, vec![input], std::slice::from_ref(target), loss, penalty)
}

/// An image with its truth mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: SegMask,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub validation: MetricsReport,
    pub penalties: Vec<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,val_precision,val_recall,val_f1,val_overlap";

    pub fn csv_row(&self) -> String {
        let v = &self.validation;
        format!("{},{},{},{},{},{}", self.epoch, self.loss, v.precision, v.recall, v.f1, v.overlap)
    }
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub best: Checkpoint,
    pub logs: Vec<EpochLog>,
}

/// Mean per-image metrics of post-processed sliding-window predictions.
pub fn evaluate(model: &Model<f32>, samples: &[&Sample], patch_w: usize, patch_h: usize) -> Result<MetricsReport> {
    let reports = samples
        .iter()
        .map(|s| {
            let pred = predict_mask(model, &s.image, patch_w, patch_h, true)?;
            Ok(metrics(&confusion(&pred, &s.mask)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_report(&reports))
}

fn audit_disc_patch(id: &str, spec: &PatchSpec, stats: &MaskStats, mask: &SegMask, cfg: &SamplerConfig) -> Result<()> {
    let Some(region) = &stats.region else {
        return Err(Error::Sampling(format!("{id}: disc patch drawn from an empty mask")));
    };
    let b = region.bbox;
    let ok = spec.inside(mask.width(), mask.height())
        && spec.contains(b.x0, b.y0)
        && spec.contains(b.x1, b.y1)
        && mask.count_in(spec.x, spec.y, spec.w, spec.h) >= cfg.min_positive;
    if ok {
        Ok(())
    } else {
        Err(Error::Sampling(format!("{id}: disc patch {spec:?} violates the sampling contract")))
    }
}

/// Train one fold. `on_epoch` sees each log record as soon as it exists.
pub fn train_fold(
    data: &[Sample],
    fold: &Fold,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    let _flush = FlushSubnormals::new();
    let sc = &cfg.sampler;
    let geo = geometry(model_cfg, sc.patch_w, sc.patch_h)?;
    if geo.margin != sc.margin {
        return Err(Error::Geometry(format!(
            "sampler margin {} does not match the network margin {}",
            sc.margin, geo.margin
        )));
    }
    let by_id: HashMap<&str, usize> = data.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let lookup = |ids: &[String]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| Error::Config(format!("unknown image id {id:?}"))))
            .collect()
    };
    let train_idx = lookup(&fold.train)?;
    let val_idx = lookup(&fold.validation)?;
    let test_ids: HashSet<&str> = fold.test.iter().map(String::as_str).collect();
    if let Some(leak) = fold.train.iter().chain(&fold.validation).find(|id| test_ids.contains(id.as_str())) {
        return Err(Error::Config(format!("fold {} uses test image {leak:?} for training", fold.index)));
    }
    if train_idx.is_empty() {
        return Err(Error::Config(format!("fold {} has no training images", fold.index)));
    }
    let val_samples: Vec<&Sample> = val_idx.iter().map(|&i| &data[i]).collect();
    let stats: HashMap<usize, MaskStats> = train_idx.iter().map(|&i| (i, mask_stats(&data[i].mask))).collect();

    let master = cfg.master_seed();
    let mut model = Model::<f32>::build(init_config(model_cfg, cfg))?;
    let mut adam = AdamState::new(model.params(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut loss_rng = ChaCha8Rng::seed_from_u64(seed_of(&[master, TAG_LOSS, cfg.loss.seed, fold.index as u64]));
    let mut best = Checkpoint { model: model.clone(), meta: TrainingMeta::default() };
    let mut best_f1 = f64::NEG_INFINITY;
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let epoch_seed = seed_of(&[master, TAG_SAMPLER, sc.seed, fold.index as u64, epoch as u64]);
        let mut items: Vec<(usize, PatchSpec)> = Vec::new();
        for &i in &train_idx {
            let s = &data[i];
            let (w, h) = (s.mask.width(), s.mask.height());
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
            rng.set_stream(i as u64);
            let population = tiling(w, h, sc.patch_w, sc.patch_h, sc.margin).len();
            match cfg.sampling {
                Sampling::Dcpa => match sample_disc_patches(&s.mask, sc, population, &mut rng) {
                    Ok(drawn) => {
                        for w in &drawn.warnings {
                            log::warn!("{}: {w}", s.id);
                        }
                        for p in &drawn.patches {
                            if drawn.warnings.is_empty() {
                                audit_disc_patch(&s.id, p, &stats[&i], &s.mask, sc)?;
                            }
                            items.push((i, *p));
                        }
                    }
                    Err(Error::Sampling(msg)) if epoch == 1 => log::warn!("{}: {msg}; corner patches only", s.id),
                    Err(Error::Sampling(_)) => {}
                    Err(e) => return Err(e),
                },
                Sampling::Uniform => {
                    let n = disc_patch_count(sc.ratio, population);
                    items.extend(uniform_patches(w, h, sc, n, &mut rng)?.into_iter().map(|p| (i, p)));
                }
            }
            if sc.include_corners {
                items.extend(corner_patches(w, h, sc)?.into_iter().map(|p| (i, p)));
            }
        }
        debug_assert!(items.iter().all(|&(i, p)| p.kind != PatchKind::Tile && train_idx.contains(&i)));

        let mut batch_rng = ChaCha8Rng::seed_from_u64(seed_of(&[master, TAG_BATCH, fold.index as u64, epoch as u64]));
        items.shuffle(&mut batch_rng);
        let mut loss_sum = 0.0;
        let mut penalties = Vec::new();
        for (b, batch) in items.chunks(cfg.batch_size).enumerate() {
            let penalty = draw_penalty(&cfg.loss, &mut loss_rng);
            penalties.push(penalty);
            let flips: Vec<(bool, bool)> = batch
                .iter()
                .map(|_| if cfg.flips { (batch_rng.random_bool(0.5), batch_rng.random_bool(0.5)) } else { (false, false) })
                .collect();
            let (inputs, targets): (Vec<Tensor<f32>>, Vec<SegMask>) = batch
                .iter()
                .zip(&flips)
                .map(|(&(i, spec), &(fh, fv))| {
                    let s = &data[i];
                    let input = extract(&s.image, &spec)?;
                    let target = s.mask.crop(spec.x, spec.y, spec.w, spec.h);
                    Ok(flip_pair(&input, &target, fh, fv))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            let (batch_loss, grads) = batch_loss_and_gradients(&model, inputs, &targets, &cfg.loss, penalty)?;
            if !batch_loss.is_finite() {
                let ids: Vec<String> = batch.iter().map(|&(i, p)| format!("{}@({},{})", data[i].id, p.x, p.y)).collect();
                let msg = format!("epoch {epoch} batch {b}: loss {batch_loss} on patches {}", ids.join(" "));
                log::error!("{msg}");
                return Err(Error::NonFinite(msg));
            }
            adam.step(model.params_mut(), &grads)?;
            loss_sum += batch_loss * batch.len() as f64;
        }

        let validation = evaluate(&model, &val_samples, sc.patch_w, sc.patch_h)?;
        let log = EpochLog { epoch, loss: loss_sum / items.len().max(1) as f64, validation, penalties };
        log::info!("fold {} {}", fold.index, log.csv_row());
        on_epoch(&log)?;
        if validation.f1 > best_f1 {
            best_f1 = validation.f1;
            best = Checkpoint { model: model.clone(), meta: TrainingMeta { epoch: epoch as u32, val_f1: validation.f1 } };
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                best.save(&dir.join("best.ckpt"))?;
            }
        }
        logs.push(log);
    }
    Ok(FoldOutcome { best, logs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("im{i}")).collect()
    }

    #[test]
    fn folds_partition() {
        let plan = make_folds(&ids(10), 5, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut all: Vec<String> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
        assert!(plan.folds.iter().all(|f| f.test.len() == 2));
        all.sort();
        let mut want = ids(10);
        want.sort();
        assert_eq!(all, want);
        for f in &plan.folds {
            assert_eq!(f.train.len() + f.validation.len() + f.test.len(), 10);
            assert!(f.train.iter().all(|id| !f.test.contains(id) && !f.validation.contains(id)));
        }
    }

    #[test]
    fn fixed_split_carves_thirty_percent() {
        let plan = fixed_split(&ids(20), &ids(3), 0.3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!((plan.folds[0].train.len(), plan.folds[0].validation.len()), (14, 6));
    }

    #[test]
    fn plan_is_deterministic() {
        let a = make_folds(&ids(23), 5, 0.3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = make_folds(&ids(23), 5, 0.3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_images() {
        assert!(make_folds(&ids(3), 5, 0.3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn flips() {
        let p = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let m = SegMask::from_fn(4, 3, |x, y| x + y == 1);
        let (p1, m1) = flip_pair(&p, &m, true, false);
        let (p2, m2) = flip_pair(&p1, &m1, true, false);
        assert_eq!((p2, m2), (p.clone(), m.clone()));
        assert_eq!(p1.data()[..4], [3.0, 2.0, 1.0, 0.0]);
        let sym = Tensor::<f32>::full(&[1, 2, 2], 0.5);
        assert_eq!(flip_pair(&sym, &SegMask::empty(2, 2), true, true).0, sym);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..8 {
            assert_eq!(augment_flip(&p, &m, &mut rng).1.positive_count(), m.positive_count());
        }
    }

    #[test]
    fn seeds_differ_by_part() {
        assert_ne!(seed_of(&[1, 2]), seed_of(&[2, 1]));
        assert_eq!(seed_of(&[5, 6]), seed_of(&[5, 6]));
    }

    #[test]
    fn batch_losses_pool_pixels() {
        use crate::loss::LossKind;
        let model = Model::<f64>::build(ModelConfig { depth: 1, base_width: 2, in_channels: 3, num_classes: 2, seed: 4 }).unwrap();
        let x1 = Tensor::<f64>::from_fn(&[3, 20, 20], |i| (i % 7) as f64 / 7.0);
        let x2 = Tensor::<f64>::from_fn(&[3, 20, 20], |i| (i % 5) as f64 / 5.0);
        let t1 = SegMask::from_fn(4, 4, |x, y| x < 2 && y < 3);
        let t2 = SegMask::empty(4, 4);
        let ce = LossConfig { kind: LossKind::CrossEntropy, ..LossConfig::default() };
        let (l1, _) = loss_and_gradients(&model, x1.clone(), &t1, &ce, 2.0).unwrap();
        let (l2, _) = loss_and_gradients(&model, x2.clone(), &t2, &ce, 2.0).unwrap();
        let (lb, _) = batch_loss_and_gradients(&model, vec![x1.clone(), x2.clone()], &[t1.clone(), t2.clone()], &ce, 2.0).unwrap();
        assert!((lb - (l1 + l2) / 2.0).abs() < 1e-12);

        // pooled soft F: an empty-target patch still contributes false positives
        let dice = LossConfig::default();
        let (_, g_empty) = loss_and_gradients(&model, x2.clone(), &t2, &dice, 1.0).unwrap();
        assert!(g_empty.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        let (_, g_pair) = batch_loss_and_gradients(&model, vec![x1.clone(), x2], &[t1.clone(), t2], &dice, 1.0).unwrap();
        let (_, g_one) = loss_and_gradients(&model, x1, &t1, &dice, 1.0).unwrap();
        assert_ne!(g_pair, g_one);
    }
}
