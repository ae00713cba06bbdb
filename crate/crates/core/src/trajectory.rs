//! Return-to-go shaping and trajectory assembly.
//!
//! The return-to-go starts at `r_good`, and every executed action lowers it
//! by that action's shaped reward: a constant step cost plus, for entity
//! actions, the image similarity to the target scaled by the initial return.
//! An action of the wrong kind for its slot adds the `r_bad` penalty term.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::FusedState;
use crate::kg::{EntityId, FeatureRegistry, Token, TokenKind, Triple, Vocabulary};
use crate::paths::{PaddedPath, HORIZON};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardConfig {
    pub r_good: f64,
    pub r_bad: f64,
    pub r_step: f64,
    /// Subtract `r_bad` as written (a negative number, so the return rises);
    /// when false, subtract `|r_bad|` instead.
    pub strict_paper_signs: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_good: 1.0,
            r_bad: -0.5,
            r_step: -0.1,
            strict_paper_signs: true,
        }
    }
}

impl RewardConfig {
    pub fn new(r_good: f64, r_bad: f64, r_step: f64) -> Result<Self> {
        let cfg = Self {
            r_good,
            r_bad,
            r_step,
            strict_paper_signs: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_good > 0.0) {
            return Err(Error::Config(format!("r_good must be positive, got {}", self.r_good)));
        }
        if !(self.r_bad < 0.0) {
            return Err(Error::Config(format!("r_bad must be negative, got {}", self.r_bad)));
        }
        if !(self.r_step < 0.0) {
            return Err(Error::Config(format!("r_step must be negative, got {}", self.r_step)));
        }
        Ok(())
    }

    fn violation_term(&self) -> f64 {
        if self.strict_paper_signs {
            self.r_bad
        } else {
            self.r_bad.abs()
        }
    }
}

/// `(R̂₀, R̂₁)`: the first is always `r_good`; the second depends on whether
/// the path reaches the right tail.
pub fn initial_rtg(path_correct: bool, cfg: &RewardConfig) -> (f64, f64) {
    (cfg.r_good, if path_correct { cfg.r_good } else { cfg.r_bad })
}

pub fn cosine(u: &[f64], v: &[f64]) -> Option<f64> {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    Some(dot / (libm::sqrt(nu) * libm::sqrt(nv)))
}

/// Image similarity between an action entity and the target. Missing
/// images, zero-norm vectors and an unknown target all read as 0.5.
pub fn entity_similarity(registry: &FeatureRegistry, action: EntityId, target: Option<EntityId>) -> f64 {
    let Some(target) = target else { return 0.5 };
    match (registry.image(action), registry.image(target)) {
        (Some(a), Some(b)) => cosine(a, b).unwrap_or_else(|| {
            log::warn!(
                "zero-norm image vector for entity {} or {}; similarity set to 0.5",
                action.0,
                target.0
            );
            0.5
        }),
        _ => 0.5,
    }
}

/// Shaped reward `r'` of one action. PAD and NULL are no-ops worth zero.
pub fn step_reward(
    vocab: &Vocabulary,
    action: Token,
    target: Option<EntityId>,
    registry: &FeatureRegistry,
    rtg1: f64,
    cfg: &RewardConfig,
) -> f64 {
    match vocab.kind(action) {
        TokenKind::Pad | TokenKind::Null => 0.0,
        TokenKind::Entity(e) => cfg.r_step + rtg1 * entity_similarity(registry, e, target),
        _ => cfg.r_step,
    }
}

/// What each action slot should hold on a well-formed path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expected {
    Relation,
    Entity,
    RelationOrEos,
    Eos,
    Pad,
}

impl Expected {
    /// Expectation for slot `index` (0-based) given whether EOS already
    /// appeared earlier.
    pub fn at(index: usize, after_eos: bool) -> Self {
        if after_eos {
            return Expected::Pad;
        }
        match index {
            0 => Expected::Relation,
            6 => Expected::Eos,
            i if i % 2 == 1 => Expected::Entity,
            _ => Expected::RelationOrEos,
        }
    }

    pub fn admits(self, kind: TokenKind) -> bool {
        matches!(
            (self, kind),
            (Expected::Relation, TokenKind::Relation(_))
                | (Expected::RelationOrEos, TokenKind::Relation(_) | TokenKind::Eos)
                | (Expected::Entity, TokenKind::Entity(_))
                | (Expected::Eos, TokenKind::Eos)
                | (Expected::Pad, TokenKind::Pad)
        )
    }
}

/// Incremental return-to-go over an action sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RtgState {
    pub rtg: f64,
    pub rtg1: f64,
    pub after_eos: bool,
    pub corrective: bool,
}

impl RtgState {
    pub fn start(rtg1: f64, corrective: bool) -> Self {
        Self {
            rtg: rtg1,
            rtg1,
            after_eos: false,
            corrective,
        }
    }

    /// Return-to-go seen by the slot after `action` was executed at `index`.
    #[allow(clippy::too_many_arguments)]
    pub fn advance(
        self,
        vocab: &Vocabulary,
        index: usize,
        action: Token,
        target: Option<EntityId>,
        registry: &FeatureRegistry,
        cfg: &RewardConfig,
    ) -> Self {
        let kind = vocab.kind(action);
        let mut rtg = self.rtg - step_reward(vocab, action, target, registry, self.rtg1, cfg);
        let neutral = matches!(kind, TokenKind::Pad | TokenKind::Null);
        if !self.corrective && !neutral && !Expected::at(index, self.after_eos).admits(kind) {
            rtg -= cfg.violation_term();
        }
        Self {
            rtg,
            after_eos: self.after_eos || kind == TokenKind::Eos,
            ..self
        }
    }
}

/// `R̂₁..R̂₇` for a padded path whose final entity is `target`.
pub fn rollout_rtg(
    vocab: &Vocabulary,
    path: &PaddedPath,
    target: Option<EntityId>,
    registry: &FeatureRegistry,
    cfg: &RewardConfig,
) -> [f64; HORIZON] {
    let (_, rtg1) = initial_rtg(true, cfg);
    let mut state = RtgState::start(rtg1, path.corrective);
    let mut out = [0.0; HORIZON];
    for (i, &a) in path.slots.iter().enumerate() {
        out[i] = state.rtg;
        state = state.advance(vocab, i, a, target, registry, cfg);
    }
    out
}

/// One return-conditioned training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub query: Triple,
    pub query_tokens: [Token; 3],
    pub rtg0: f64,
    pub rtg: [f64; HORIZON],
    /// Absent when the pipeline runs without fused features.
    pub state: Option<FusedState>,
    pub actions: [Token; HORIZON],
    pub corrective: bool,
}

impl Trajectory {
    /// Number of `f64` cells in a flat record for the given state widths.
    pub fn record_width(widths: (usize, usize, usize)) -> usize {
        3 + 3 + 1 + HORIZON + HORIZON + 1 + widths.0 + widths.1 + widths.2
    }

    /// Flattens into a fixed-width record; a missing state is zero-filled
    /// and flagged.
    pub fn to_record(&self, widths: (usize, usize, usize)) -> Result<Vec<f64>> {
        let mut r = Vec::with_capacity(Self::record_width(widths));
        r.extend([self.query.head.0, self.query.relation.0, self.query.tail.0].map(f64::from));
        r.extend(self.query_tokens.map(|t| f64::from(t.0)));
        r.push(self.rtg0);
        r.extend(self.rtg);
        r.extend(self.actions.map(|t| f64::from(t.0)));
        r.push(f64::from(u8::from(self.corrective)));
        match &self.state {
            Some(s) => {
                if (s.structure.len(), s.image.len(), s.ocr.len()) != widths {
                    return Err(Error::Dimension {
                        op: "to_record",
                        left: alloc::vec![widths.0, widths.1, widths.2],
                        right: alloc::vec![s.structure.len(), s.image.len(), s.ocr.len()],
                    });
                }
                r.extend(s.concatenated());
            }
            None => r.resize(Self::record_width(widths), f64::NAN),
        }
        Ok(r)
    }

    pub fn from_record(r: &[f64], widths: (usize, usize, usize)) -> Result<Self> {
        if r.len() != Self::record_width(widths) {
            return Err(Error::Dimension {
                op: "from_record",
                left: alloc::vec![Self::record_width(widths)],
                right: alloc::vec![r.len()],
            });
        }
        let id = |x: f64| -> Result<u32> {
            if x >= 0.0 && x <= f64::from(u32::MAX) && libm::trunc(x) == x {
                Ok(x as u32)
            } else {
                Err(Error::Contract(format!("record holds non-integer id {x}")))
            }
        };
        let tok = |x: f64| id(x).map(Token);
        let mut rtg = [0.0; HORIZON];
        rtg.copy_from_slice(&r[7..7 + HORIZON]);
        let mut actions = [Token::PAD; HORIZON];
        for (a, &x) in actions.iter_mut().zip(&r[7 + HORIZON..7 + 2 * HORIZON]) {
            *a = tok(x)?;
        }
        let rest = &r[8 + 2 * HORIZON..];
        let state = if rest.iter().any(|x| x.is_nan()) {
            None
        } else {
            Some(FusedState::from_concatenated(rest, widths.0, widths.1))
        };
        Ok(Self {
            query: Triple::new(
                EntityId(id(r[0])?),
                crate::kg::RelationId(id(r[1])?),
                EntityId(id(r[2])?),
            ),
            query_tokens: [tok(r[3])?, tok(r[4])?, tok(r[5])?],
            rtg0: r[6],
            rtg,
            state,
            actions,
            corrective: r[7 + 2 * HORIZON] != 0.0,
        })
    }
}

/// Assembles the training sequence for `triple` along `path`.
pub fn build_trajectory(
    vocab: &Vocabulary,
    triple: Triple,
    path: &PaddedPath,
    state: Option<FusedState>,
    registry: &FeatureRegistry,
    cfg: &RewardConfig,
) -> Result<Trajectory> {
    if triple.head.0 as usize >= vocab.num_entities() || triple.tail.0 as usize >= vocab.num_entities() {
        return Err(Error::Lookup {
            kind: "entity id",
            name: format!("{}", triple.head.0.max(triple.tail.0)),
        });
    }
    if triple.relation.0 as usize >= vocab.num_relations() {
        return Err(Error::Lookup {
            kind: "relation id",
            name: format!("{}", triple.relation.0),
        });
    }
    let (rtg0, _) = initial_rtg(true, cfg);
    Ok(Trajectory {
        query: triple,
        query_tokens: [
            Token::BOS,
            vocab.entity_token(triple.head),
            vocab.relation_token(triple.relation),
        ],
        rtg0,
        rtg: rollout_rtg(vocab, path, Some(triple.tail), registry, cfg),
        state,
        actions: path.slots,
        corrective: path.corrective,
    })
}

/// Checks `R̂ₙ₋₁ − R̂ₙ = r'ₙ₋₁` at every step whose action fits its slot,
/// and a constant return after slot 3 for corrective sequences. Returns the
/// largest deviation seen.
pub fn telescoping_error(
    vocab: &Vocabulary,
    traj: &Trajectory,
    registry: &FeatureRegistry,
    cfg: &RewardConfig,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut after_eos = false;
    for n in 1..HORIZON {
        let a = traj.actions[n - 1];
        let kind = vocab.kind(a);
        let fits = traj.corrective
            || matches!(kind, TokenKind::Pad | TokenKind::Null)
            || Expected::at(n - 1, after_eos).admits(kind);
        after_eos |= kind == TokenKind::Eos;
        if fits {
            let r = step_reward(vocab, a, Some(traj.query.tail), registry, traj.rtg[0], cfg);
            worst = worst.max(((traj.rtg[n - 1] - traj.rtg[n]) - r).abs());
        }
        if traj.corrective && n >= 4 {
            worst = worst.max((traj.rtg[n] - traj.rtg[n - 1]).abs());
        }
    }
    worst
}
