//! Smoothed cross-entropy over the three prediction heads and the
//! loss-ratio gradient modulation of the single-modal branches.

use alloc::format;
use alloc::vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::kg::Token;
use crate::params::{Branch, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Probability mass kept on the target.
    pub epsilon: f64,
    /// Weight of the concat loss on sequences whose history was masked.
    pub beta: f64,
    /// Modulation degree.
    pub alpha: f64,
    pub noise: bool,
    /// Count the target term once per class, as the summation is written.
    pub literal_sum: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.7,
            beta: 1.2,
            alpha: 0.6,
            noise: true,
            literal_sum: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1], got {}", self.epsilon)));
        }
        if !(self.beta >= 1.0) {
            return Err(Error::Config(format!("beta must be at least 1, got {}", self.beta)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }

    /// `(target weight, other-class weight)` applied to log-probabilities.
    fn class_weights(&self, classes: usize) -> (f64, f64) {
        let other = if classes > 1 {
            (1.0 - self.epsilon) / (classes - 1) as f64
        } else {
            0.0
        };
        if self.literal_sum {
            (classes as f64 * self.epsilon + other, other)
        } else {
            (self.epsilon, other)
        }
    }
}

/// Smoothed cross-entropy of one distribution against `target`.
pub fn smoothed_ce(p: &[f64], target: usize, cfg: &LossConfig) -> f64 {
    let (wt, wo) = cfg.class_weights(p.len());
    let mut loss = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        let lp = libm::log(pi.max(1e-300));
        loss -= if i == target { wt * lp } else { wo * lp };
    }
    loss
}

/// Per-slot softmax of head logits.
pub fn head_distributions(logits: &Tensor) -> Tensor {
    softmax_rows(logits)
}

/// Graph form of [`smoothed_ce`] summed over rows with per-row weights.
/// Rows with zero weight do not contribute.
pub fn weighted_smoothed_ce(
    g: &mut Graph,
    logits: Var,
    targets: &[Token],
    row_weights: &[f64],
    cfg: &LossConfig,
) -> Result<Var> {
    let (rows, v) = g.value(logits).dims2();
    if targets.len() != rows || row_weights.len() != rows {
        return Err(Error::Dimension {
            op: "weighted_smoothed_ce",
            left: vec![rows],
            right: vec![targets.len(), row_weights.len()],
        });
    }
    if row_weights.iter().all(|w| *w == 0.0) {
        return Err(Error::Contract("no supervised slot in batch".into()));
    }
    let (wt, wo) = cfg.class_weights(v);
    let mut w = Tensor::zeros(&[rows, v]);
    for (r, (&t, &rw)) in targets.iter().zip(row_weights).enumerate() {
        if rw == 0.0 {
            continue;
        }
        for x in w.row_mut(r).iter_mut() {
            *x = -rw * wo;
        }
        w.row_mut(r)[t.index()] = -rw * wt;
    }
    let lp = g.log_softmax_rows(logits);
    let wv = g.constant(w);
    let prod = g.mul(lp, wv)?;
    Ok(g.sum(prod))
}

/// Loss values of one step; `fig`/`ocr` are zero without modal heads.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BranchLosses {
    pub fig: f64,
    pub ocr: f64,
    pub concat: f64,
}

impl BranchLosses {
    pub fn rho_ocr(&self) -> f64 {
        self.ocr / self.fig
    }

    pub fn rho_fig(&self) -> f64 {
        self.fig / self.ocr
    }

    /// `(coeff_fig, coeff_ocr)`.
    pub fn coefficients(&self, alpha: f64) -> (f64, f64) {
        if !(self.fig > 0.0 && self.ocr > 0.0) {
            return (1.0, 1.0);
        }
        (modulation_coeff(self.rho_fig(), alpha), modulation_coeff(self.rho_ocr(), alpha))
    }
}

/// `1 − tanh(α·relu(ρ))` when `ρ > 1`, else 1.
pub fn modulation_coeff(rho: f64, alpha: f64) -> f64 {
    if rho > 1.0 {
        1.0 - libm::tanh(alpha * rho.max(0.0))
    } else {
        1.0
    }
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    libm::sqrt(x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Scales fig/ocr branch gradients by their coefficients and, when `noise`
/// is given, adds `N(0, std(∇W) + 1e-8)` to each of those arrays. Shared
/// gradients are left alone. Fails on any non-finite gradient.
pub fn modulate_gradients<R: Rng + ?Sized>(
    store: &ParamStore,
    grads: &mut [Tensor],
    coeff_fig: f64,
    coeff_ocr: f64,
    mut noise: Option<&mut R>,
) -> Result<()> {
    for (p, grad) in store.iter().zip(grads.iter_mut()) {
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        let coeff = match p.branch {
            Branch::Shared => continue,
            Branch::Fig => coeff_fig,
            Branch::Ocr => coeff_ocr,
        };
        let sd = std_dev(grad.data()) + 1e-8;
        for x in grad.data_mut() {
            *x *= coeff;
        }
        if let Some(rng) = noise.as_deref_mut() {
            let dist = Normal::new(0.0, sd).map_err(|e| Error::Config(format!("{e}")))?;
            for x in grad.data_mut() {
                *x += dist.sample(rng);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec::Vec;

    #[test]
    fn config_ranges() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig { epsilon: 0.0, ..Default::default() },
            LossConfig { epsilon: 1.2, ..Default::default() },
            LossConfig { beta: 0.9, ..Default::default() },
            LossConfig { alpha: -0.1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn smoothed_ce_examples() {
        let plain = LossConfig { epsilon: 1.0, ..Default::default() };
        assert!((smoothed_ce(&[0.25; 4], 2, &plain) - libm::log(4.0)).abs() < 1e-12);
        assert!(smoothed_ce(&[1.0 - 1e-12, 1e-12, 0.0], 0, &plain) < 1e-9);
        let cfg = LossConfig { epsilon: 0.7, ..Default::default() };
        let hand = -(0.7 * libm::log(0.7) + 0.15 * (libm::log(0.2) + libm::log(0.1)));
        let got = smoothed_ce(&[0.7, 0.2, 0.1], 0, &cfg);
        assert!((got - hand).abs() < 1e-12);
        assert!((got - 0.8364).abs() < 1e-3);
    }

    #[test]
    fn graph_loss_matches_scalar_form() {
        let cfg = LossConfig::default();
        let logits = Tensor::from_rows(&[&[0.3, -1.0, 2.0, 0.1], &[1.0, 1.0, -0.5, 0.0]]);
        let p = head_distributions(&logits);
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut g = Graph::new();
        let x = g.constant(logits.clone());
        let l = weighted_smoothed_ce(&mut g, x, &[Token(2), Token(0)], &[0.25, 0.5], &cfg).unwrap();
        let hand = 0.25 * smoothed_ce(p.row(0), 2, &cfg) + 0.5 * smoothed_ce(p.row(1), 0, &cfg);
        assert!((g.value(l).data()[0] - hand).abs() < 1e-12);
        let mut g = Graph::new();
        let x = g.constant(logits);
        assert!(weighted_smoothed_ce(&mut g, x, &[Token(2), Token(0)], &[0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn literal_sum_counts_target_per_class() {
        let cfg = LossConfig { literal_sum: true, ..Default::default() };
        let p = [0.5, 0.3, 0.2];
        let hand = -(3.0 * 0.7 * libm::log(0.5) + 0.15 * p.iter().map(|x| libm::log(*x)).sum::<f64>());
        assert!((smoothed_ce(&p, 0, &cfg) - hand).abs() < 1e-12);
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(modulation_coeff(0.5, 0.6), 1.0);
        assert!((modulation_coeff(2.0, 0.6) - 0.166345).abs() < 1e-6);
        assert!((modulation_coeff(2.0, 0.6) - (1.0 - libm::tanh(1.2))).abs() < 1e-15);
        for rho in [0.1, 1.0, 3.0, 100.0] {
            assert_eq!(modulation_coeff(rho, 0.0), 1.0);
        }
        let l = BranchLosses { fig: 0.4, ocr: 1.6, concat: 1.0 };
        assert!((l.rho_fig() * l.rho_ocr() - 1.0).abs() < 1e-9);
        let (cf, co) = l.coefficients(0.6);
        assert_eq!(cf, 1.0);
        assert!(co < 1.0);
    }

    fn store_and_grads() -> (ParamStore, Vec<Tensor>) {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2, 2]), Branch::Shared);
        s.add("f", Tensor::zeros(&[2, 3]), Branch::Fig);
        s.add("o", Tensor::zeros(&[1, 3]), Branch::Ocr);
        let g = vec![
            Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]),
            Tensor::from_rows(&[&[0.1, 0.2, -0.3], &[1.0, -1.0, 2.0]]),
            Tensor::from_rows(&[&[4.0, 5.0, -6.0]]),
        ];
        (s, g)
    }

    #[test]
    fn modulation_scales_branch_norm() {
        let (s, raw) = store_and_grads();
        let mut g = raw.clone();
        let c = 1.0 - libm::tanh(1.2);
        modulate_gradients::<rng::CoreRng>(&s, &mut g, c, 1.0, None).unwrap();
        assert!((g[1].norm() - c * raw[1].norm()).abs() < 1e-9);
        assert_eq!(g[0], raw[0]);
        assert_eq!(g[2], raw[2]);
        let mut same = raw.clone();
        modulate_gradients::<rng::CoreRng>(&s, &mut same, 1.0, 1.0, None).unwrap();
        assert_eq!(same, raw);
    }

    #[test]
    fn noise_is_seeded() {
        let (s, raw) = store_and_grads();
        let run = || {
            let mut g = raw.clone();
            let mut r = rng::keyed(1, rng::purpose::NOISE, 0, 0);
            modulate_gradients(&s, &mut g, 0.5, 0.5, Some(&mut r)).unwrap();
            g
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_ne!(a[1], raw[1]);
        assert_eq!(a[0], raw[0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (s, mut g) = store_and_grads();
        g[0].data_mut()[0] = f64::NAN;
        assert!(matches!(
            modulate_gradients::<rng::CoreRng>(&s, &mut g, 1.0, 1.0, None),
            Err(Error::NonFinite(_))
        ));
    }
}
