//! The three masking mechanisms: causal visibility, gated token dropout, and
//! history masking of past actions, plus the masked log-likelihood.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::Token;
use crate::paths::HORIZON;
use crate::rng::{self, purpose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    /// Chance that token dropout is active for a sequence.
    pub p_k: f64,
    /// Per-token dropout chance once active.
    pub p_m: f64,
    /// Per-past-action masking chance.
    pub eta: f64,
    /// History masking is tied to return conditioning; off disables it.
    pub history: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            p_k: 0.5,
            p_m: 0.15,
            eta: 0.1,
            history: true,
        }
    }
}

impl MaskConfig {
    pub fn disabled() -> Self {
        Self {
            p_k: 0.0,
            p_m: 0.0,
            eta: 0.0,
            history: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p_k", self.p_k), ("p_m", self.p_m), ("eta", self.eta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// `m[k][j]` is true when timestep `k` may see timestep `j`.
pub fn causal_mask(horizon: usize) -> Vec<Vec<bool>> {
    (0..horizon).map(|k| (0..horizon).map(|j| j <= k).collect()).collect()
}

/// Gate-then-token dropout over `n` tokens.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, p_k: f64, p_m: f64, rng: &mut R) -> Vec<bool> {
    if !rng.random_bool(p_k) {
        return vec![false; n];
    }
    (0..n).map(|_| rng.random_bool(p_m)).collect()
}

/// Masks each eligible past action with probability `eta`. The flag is true
/// iff at least one token was masked.
pub fn history_mask<R: Rng + ?Sized>(eligible: &[bool], eta: f64, rng: &mut R) -> (Vec<bool>, bool) {
    let m: Vec<bool> = eligible.iter().map(|&e| e && rng.random_bool(eta)).collect();
    let fired = m.iter().any(|x| *x);
    (m, fired)
}

/// Masks for one training sequence, indexed by action input position
/// `0..HORIZON` where input 0 is BOS and input `j` carries action `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SampleMasks {
    /// Replaced by MASK and the matching action slot dropped from the loss.
    pub dropped: [bool; HORIZON],
    /// Replaced by MASK; the action stays supervised.
    pub history: [bool; HORIZON],
    pub history_fired: bool,
}

impl SampleMasks {
    /// Action input tokens after masking: `(BOS, a₁, …, a₆)`.
    pub fn apply(&self, actions: &[Token; HORIZON]) -> [Token; HORIZON] {
        let mut inputs = [Token::BOS; HORIZON];
        for j in 1..HORIZON {
            inputs[j] = if self.dropped[j] || self.history[j] {
                Token::MASK
            } else {
                actions[j - 1]
            };
        }
        inputs
    }

    /// Whether action slot `k` (0-based) still contributes to the loss.
    pub fn slot_kept(&self, k: usize) -> bool {
        k + 1 >= HORIZON || !self.dropped[k + 1]
    }
}

/// Draws the masks of training sequence `index` in `epoch`. BOS is never
/// touched; history masking only hits real (non-PAD) past actions.
pub fn sample_masks(
    cfg: &MaskConfig,
    seed: u64,
    epoch: u64,
    index: u64,
    actions: &[Token; HORIZON],
) -> SampleMasks {
    let mut out = SampleMasks::default();
    let mut r = rng::keyed(seed, purpose::DROPOUT_MASK, epoch, index);
    let d = dropout_mask(HORIZON - 1, cfg.p_k, cfg.p_m, &mut r);
    out.dropped[1..].copy_from_slice(&d);
    if cfg.history && cfg.eta > 0.0 {
        let mut r = rng::keyed(seed, purpose::HISTORY_MASK, epoch, index);
        let eligible: Vec<bool> = (1..HORIZON)
            .map(|j| !out.dropped[j] && actions[j - 1] != Token::PAD)
            .collect();
        let (h, fired) = history_mask(&eligible, cfg.eta, &mut r);
        out.history[1..].copy_from_slice(&h);
        out.history_fired = fired;
    }
    out
}

/// `Σ log p(xᵢ)` over kept slots. `probs[i]` is the distribution at slot
/// `i`; zero probabilities are clamped to `1e-12`.
pub fn masked_loglik(probs: &[Vec<f64>], targets: &[Token], keep: &[bool]) -> f64 {
    let mut total = 0.0;
    for ((p, t), &k) in probs.iter().zip(targets).zip(keep) {
        if !k {
            continue;
        }
        let mut v = p[t.index()];
        if v <= 0.0 {
            log::warn!("zero probability on supervised token {}; clamped", t.0);
            v = 1e-12;
        }
        total += libm::log(v.max(1e-12));
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn causal_mask_shape() {
        assert_eq!(causal_mask(1), vec![vec![true]]);
        let m = causal_mask(7);
        assert_eq!(m[2], vec![true, true, true, false, false, false, false]);
        for k in 0..7 {
            for j in 0..7 {
                assert_eq!(m[k][j], j <= k);
            }
        }
    }

    #[test]
    fn dropout_degenerate_cases() {
        let mut r = rng::seeded(1);
        for _ in 0..100 {
            assert!(dropout_mask(6, 0.0, 1.0, &mut r).iter().all(|x| !x));
            assert!(dropout_mask(6, 1.0, 0.0, &mut r).iter().all(|x| !x));
        }
    }

    #[test]
    fn dropout_rate_monte_carlo() {
        let mut r = rng::seeded(11);
        let draws = 100_000;
        let masked: usize = (0..draws)
            .map(|_| dropout_mask(1, 0.5, 0.15, &mut r).iter().filter(|x| **x).count())
            .sum();
        let rate = masked as f64 / draws as f64;
        assert!((rate - 0.075).abs() < 0.005, "{rate}");
    }

    #[test]
    fn history_mask_cases() {
        let mut r = rng::seeded(3);
        let elig = [true, true, false, true];
        let (m, f) = history_mask(&elig, 0.0, &mut r);
        assert!(!f && m.iter().all(|x| !x));
        let (m, f) = history_mask(&elig, 1.0, &mut r);
        assert!(f);
        assert_eq!(m, vec![true, true, false, true]);
    }

    #[test]
    fn masks_replay_and_spare_bos() {
        let cfg = MaskConfig {
            p_k: 1.0,
            p_m: 0.5,
            eta: 0.5,
            history: true,
        };
        let acts = [Token(9), Token(6), Token(10), Token(7), Token::EOS, Token::PAD, Token::PAD];
        for i in 0..50 {
            let a = sample_masks(&cfg, 5, 2, i, &acts);
            assert_eq!(a, sample_masks(&cfg, 5, 2, i, &acts));
            assert!(!a.dropped[0] && !a.history[0]);
            assert_eq!(a.apply(&acts)[0], Token::BOS);
            assert!(!a.history[6]);
            assert_eq!(a.history_fired, a.history.iter().any(|x| *x));
        }
        let none = sample_masks(&MaskConfig::disabled(), 5, 2, 0, &acts);
        assert_eq!(none, SampleMasks::default());
        assert_eq!(
            none.apply(&acts),
            [Token::BOS, Token(9), Token(6), Token(10), Token(7), Token::EOS, Token::PAD]
        );
    }

    #[test]
    fn loglik_cases() {
        let v = 5usize;
        let uniform = vec![vec![1.0 / v as f64; v]; 3];
        let t = [Token(0), Token(3), Token(4)];
        let ll = masked_loglik(&uniform, &t, &[true; 3]);
        assert!((ll + 3.0 * libm::log(v as f64)).abs() < 1e-12);
        assert_eq!(masked_loglik(&uniform, &t, &[false; 3]), 0.0);
        let zero = vec![vec![0.0, 1.0]];
        assert!((masked_loglik(&zero, &[Token(0)], &[true]) - libm::log(1e-12)).abs() < 1e-9);
    }

    // Chain rule over a tiny joint distribution: log p(x1,x2) computed from
    // the joint equals the sum of conditional log-probabilities.
    #[test]
    fn loglik_matches_chain_rule() {
        let joint = [[0.1, 0.2, 0.1], [0.3, 0.05, 0.25]];
        let (x1, x2) = (1usize, 2usize);
        let p1: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
        let p2: Vec<f64> = joint[x1].iter().map(|v| v / p1[x1]).collect();
        let mut first = vec![0.0; 3];
        first[..2].copy_from_slice(&p1);
        let ll = masked_loglik(&[first, p2], &[Token(x1 as u32), Token(x2 as u32)], &[true, true]);
        assert!((ll - libm::log(joint[x1][x2])).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn dropped_slots_leave_loss(seed in 0u64..1000, idx in 0u64..1000) {
            let cfg = MaskConfig { p_k: 1.0, p_m: 0.3, eta: 0.3, history: true };
            let acts = [Token(9), Token(6), Token(10), Token(7), Token(11), Token(8), Token::EOS];
            let m = sample_masks(&cfg, seed, 0, idx, &acts);
            let inputs = m.apply(&acts);
            for j in 1..HORIZON {
                prop_assert_eq!(inputs[j] == Token::MASK, m.dropped[j] || m.history[j]);
                prop_assert_eq!(m.slot_kept(j - 1), !m.dropped[j]);
                prop_assert!(!(m.dropped[j] && m.history[j]));
            }
            prop_assert!(m.slot_kept(HORIZON - 1));
        }
    }
}
