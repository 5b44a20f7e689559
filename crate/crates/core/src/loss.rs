//! Segmentation losses with a stochastic penalty parameter.
//!
//! For each mini-batch a penalty is drawn uniformly from the grid
//! `{1, 1+s, 1+2s, …} ∩ [1, α]`. Cross-entropy uses it as the weight of the
//! disc-class term; the soft F-score uses it as β. With `α = 1` (or
//! `stochastic = false`) the penalty is exactly 1 and both losses reduce to
//! their fixed forms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::mask::SegMask;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Dice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub stochastic: bool,
    /// Upper end of the penalty range.
    pub alpha: f64,
    /// Grid step of the penalty range.
    pub step: f64,
    /// Added to denominators and log arguments.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Dice, stochastic: true, alpha: 5.0, step: 0.5, smoothing: 1e-6, seed: 0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 1.0) {
            return Err(Error::Config(format!("loss alpha must be >= 1, got {}", self.alpha)));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::Config(format!("loss step must be > 0, got {}", self.step)));
        }
        if !(self.smoothing.is_finite() && self.smoothing >= 0.0) {
            return Err(Error::Config(format!("loss smoothing must be >= 0, got {}", self.smoothing)));
        }
        Ok(())
    }

    /// The penalty grid `{1, 1+s, …} ∩ [1, α]`.
    pub fn penalty_grid(&self) -> Vec<f64> {
        // tolerate representation error when α sits exactly on the grid
        let n = ((self.alpha - 1.0) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| 1.0 + i as f64 * self.step).collect()
    }
}

/// Uniform draw from the penalty grid; exactly 1 when not stochastic.
pub fn draw_penalty<R: Rng + ?Sized>(cfg: &LossConfig, rng: &mut R) -> f64 {
    if !cfg.stochastic {
        return 1.0;
    }
    let grid = cfg.penalty_grid();
    grid[rng.random_range(0..grid.len())]
}

/// `(1+β²)·P·R / (β²·P + R)`, zero when both precision and recall are zero.
pub fn fbeta_score(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

fn target_values<T: Real>(target: &SegMask) -> Vec<T> {
    target.data().iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect()
}

fn check_size<T: Real>(g: &Graph<T>, probs: NodeId, target: &SegMask) -> Result<()> {
    let (_, h, w) = g.value(probs).chw()?;
    if (w, h) != (target.width(), target.height()) {
        return Err(Error::Shape(format!(
            "probabilities {w}x{h} vs target {}x{}",
            target.width(),
            target.height()
        )));
    }
    Ok(())
}

/// Pixel-mean cross-entropy with weight `w` on the disc term.
pub fn weighted_cross_entropy<T: Real>(
    g: &mut Graph<T>,
    probs: NodeId,
    target: &SegMask,
    weight: f64,
    smoothing: f64,
) -> Result<NodeId> {
    check_size(g, probs, target)?;
    g.weighted_cross_entropy(probs, target_values(target), T::from_f64(weight), T::from_f64(smoothing))
}

/// `1 − F_β` over soft precision/recall of the disc channel.
pub fn soft_fbeta_loss<T: Real>(
    g: &mut Graph<T>,
    probs: NodeId,
    target: &SegMask,
    beta: f64,
    smoothing: f64,
) -> Result<NodeId> {
    check_size(g, probs, target)?;
    g.soft_fbeta_loss(probs, target_values(target), T::from_f64(beta), T::from_f64(smoothing))
}

/// Loss of the configured kind for an already drawn penalty.
pub fn loss_node<T: Real>(
    g: &mut Graph<T>,
    probs: NodeId,
    target: &SegMask,
    cfg: &LossConfig,
    penalty: f64,
) -> Result<NodeId> {
    match cfg.kind {
        LossKind::CrossEntropy => weighted_cross_entropy(g, probs, target, penalty, cfg.smoothing),
        LossKind::Dice => soft_fbeta_loss(g, probs, target, penalty, cfg.smoothing),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs_graph(q1: &[f64], w: usize, h: usize) -> (Graph<f64>, NodeId) {
        let mut data: Vec<f64> = q1.iter().map(|q| 1.0 - q).collect();
        data.extend_from_slice(q1);
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(&[2, h, w], data).unwrap());
        (g, p)
    }

    #[test]
    fn grids() {
        let cfg = |alpha, step| LossConfig { alpha, step, ..LossConfig::default() };
        assert_eq!(cfg(1.0, 0.5).penalty_grid(), vec![1.0]);
        assert_eq!(cfg(2.0, 0.5).penalty_grid(), vec![1.0, 1.5, 2.0]);
        assert_eq!(cfg(3.0, 1.0).penalty_grid(), vec![1.0, 2.0, 3.0]);
        assert_eq!(cfg(2.9, 1.0).penalty_grid(), vec![1.0, 2.0]);
        assert_eq!(cfg(1.3, 0.1).penalty_grid().len(), 4);
        assert!(cfg(0.5, 0.5).validate().is_err());
        assert!(cfg(2.0, 0.0).validate().is_err());
    }

    #[test]
    fn degenerate_grid_always_one() {
        let cfg = LossConfig { alpha: 1.0, ..LossConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| draw_penalty(&cfg, &mut rng) == 1.0));
        let fixed = LossConfig { stochastic: false, ..LossConfig::default() };
        assert!((0..100).all(|_| draw_penalty(&fixed, &mut rng) == 1.0));
    }

    #[test]
    fn draws_are_uniform_on_the_grid() {
        let cfg = LossConfig { alpha: 3.0, step: 1.0, ..LossConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            let v = draw_penalty(&cfg, &mut rng);
            counts[v as usize - 1] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.03);
        }
        // chi-square with 2 dof, 0.999 quantile ≈ 13.8
        let expected = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 13.8, "chi2 {chi2}");
    }

    #[test]
    fn cross_entropy_limits() {
        let target = SegMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let (mut g, p) = probs_graph(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let l = weighted_cross_entropy(&mut g, p, &target, 1.0, 1e-6).unwrap();
        assert!(g.value(l).data()[0] < 1e-5);

        // ln(0.5 + ε) differs from ln 0.5 by about 2ε
        for (eps, tol) in [(0.0, 1e-12), (1e-6, 3e-6)] {
            let (mut g, p) = probs_graph(&[0.5; 4], 2, 2);
            let l = weighted_cross_entropy(&mut g, p, &target, 1.0, eps).unwrap();
            assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < tol);
        }
    }

    #[test]
    fn cross_entropy_weight_scales_disc_term_only() {
        let target = SegMask::new(2, 1, vec![1, 0]).unwrap();
        let q = [0.3, 0.4];
        let value = |w: f64| {
            let (mut g, p) = probs_graph(&q, 2, 1);
            let l = weighted_cross_entropy(&mut g, p, &target, w, 0.0).unwrap();
            g.value(l).data()[0]
        };
        let expected = |w: f64| -(w * 0.3f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((value(1.0) - expected(1.0)).abs() < 1e-12);
        assert!((value(3.0) - expected(3.0)).abs() < 1e-12);
    }

    #[test]
    fn fbeta_closed_forms() {
        assert!((fbeta_score(0.5, 1.0, 2.0) - 5.0 / 6.0).abs() < 1e-12);
        let (p, r) = (0.6, 0.3);
        assert!((fbeta_score(p, r, 1.0) - 2.0 * p * r / (p + r)).abs() < 1e-15);
        assert_eq!(fbeta_score(0.0, 0.0, 2.0), 0.0);
    }

    #[test]
    fn perfect_overlap_gives_zero_loss() {
        let target = SegMask::new(3, 1, vec![1, 0, 1]).unwrap();
        for beta in [1.0, 1.5, 4.0] {
            let (mut g, p) = probs_graph(&[1.0, 0.0, 1.0], 3, 1);
            let l = soft_fbeta_loss(&mut g, p, &target, beta, 1e-6).unwrap();
            assert!(g.value(l).data()[0].abs() < 1e-6);
        }
    }

    #[test]
    fn soft_fbeta_matches_precision_recall_form() {
        // q1 = [0.5, 0.5, 0, 0], t = [1, 0, 0, 0]: P = 0.5, R = 0.5
        let target = SegMask::new(4, 1, vec![1, 0, 0, 0]).unwrap();
        let (mut g, p) = probs_graph(&[0.5, 0.5, 0.0, 0.0], 4, 1);
        let l = soft_fbeta_loss(&mut g, p, &target, 2.0, 0.0).unwrap();
        assert!((1.0 - g.value(l).data()[0] - fbeta_score(0.5, 0.5, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn size_mismatch_rejected() {
        let target = SegMask::empty(3, 3);
        let (mut g, p) = probs_graph(&[0.5; 4], 2, 2);
        assert!(soft_fbeta_loss(&mut g, p, &target, 1.0, 1e-6).is_err());
        assert!(weighted_cross_entropy(&mut g, p, &target, 1.0, 1e-6).is_err());
    }
}
