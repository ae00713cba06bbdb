//! Minibatch training over trajectories: masking, three-head loss,
//! branch modulation and the Adam update.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::encoder::{Encoder, EncoderInput};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kg::Token;
use crate::masks::{sample_masks, MaskConfig, SampleMasks};
use crate::objective::{modulate_gradients, weighted_smoothed_ce, BranchLosses, LossConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamId};
use crate::paths::HORIZON;
use crate::rng::{self, purpose};
use crate::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub masks: MaskConfig,
    /// Loss-ratio modulation of the single-modal branches.
    pub modulation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            lr: 1e-3,
            seed: 7,
            loss: LossConfig::default(),
            masks: MaskConfig::default(),
            modulation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.loss.validate()?;
        self.masks.validate()
    }
}

/// Encoder input for a trajectory under the given masks.
pub fn encoder_input<'a>(traj: &'a Trajectory, masks: &SampleMasks) -> EncoderInput<'a> {
    EncoderInput {
        rtg: traj.rtg,
        head: traj.query_tokens[1],
        relation: traj.query_tokens[2],
        state: traj.state.as_ref(),
        actions: masks.apply(&traj.actions),
    }
}

/// Action slots that contribute to the loss: real path tokens and EOS, or
/// only the answer slot of a corrective sequence, minus dropped slots.
pub fn supervised_slots(traj: &Trajectory, masks: &SampleMasks) -> [bool; HORIZON] {
    core::array::from_fn(|k| {
        let real = if traj.corrective {
            k == 2
        } else {
            traj.actions[k] != Token::PAD
        };
        real && masks.slot_kept(k)
    })
}

/// Per-row weights for the three heads plus the matching loss values.
pub struct BatchLoss {
    pub total: Var,
    pub losses: BranchLosses,
    pub history_fired: usize,
}

/// Three-head loss for a batch. Each sequence's supervised slots are
/// averaged, sequences are averaged, and the concat term of sequences with
/// masked history is weighted by `beta`. Returns `None` when every slot in
/// the batch was dropped.
pub fn batch_loss(
    encoder: &Encoder,
    g: &mut Graph,
    b: &Bound,
    trajs: &[&Trajectory],
    masks: &[SampleMasks],
    cfg: &LossConfig,
) -> Result<Option<BatchLoss>> {
    let inputs: Vec<EncoderInput> = trajs.iter().zip(masks).map(|(t, m)| encoder_input(t, m)).collect();
    let mut targets = Vec::with_capacity(trajs.len() * HORIZON);
    let mut plain = Vec::with_capacity(trajs.len() * HORIZON);
    let mut boosted = Vec::with_capacity(trajs.len() * HORIZON);
    let sup: Vec<[bool; HORIZON]> = trajs.iter().zip(masks).map(|(t, m)| supervised_slots(t, m)).collect();
    let live = sup.iter().filter(|s| s.iter().any(|x| *x)).count();
    if live == 0 {
        return Ok(None);
    }
    let mut fired = 0;
    for ((t, m), s) in trajs.iter().zip(masks).zip(&sup) {
        let count = s.iter().filter(|x| **x).count();
        let beta = if m.history_fired {
            fired += 1;
            cfg.beta
        } else {
            1.0
        };
        for k in 0..HORIZON {
            targets.push(t.actions[k]);
            let w = if s[k] { 1.0 / (count * live) as f64 } else { 0.0 };
            plain.push(w);
            boosted.push(w * beta);
        }
    }
    let logits = encoder.forward(g, b, &inputs)?;
    let concat = weighted_smoothed_ce(g, logits.concat, &targets, &boosted, cfg)?;
    let mut losses = BranchLosses {
        concat: g.value(concat).data()[0],
        ..Default::default()
    };
    let mut total = concat;
    if let (Some(f), Some(o)) = (logits.fig, logits.ocr) {
        let lf = weighted_smoothed_ce(g, f, &targets, &plain, cfg)?;
        let lo = weighted_smoothed_ce(g, o, &targets, &plain, cfg)?;
        losses.fig = g.value(lf).data()[0];
        losses.ocr = g.value(lo).data()[0];
        total = g.add(total, lf)?;
        total = g.add(total, lo)?;
    }
    if !g.value(total).is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(Some(BatchLoss {
        total,
        losses,
        history_fired: fired,
    }))
}

/// Central-difference audit of the full training loss against its
/// backward pass. Up to `per_param` evenly spaced coordinates of every
/// parameter array are probed; the error is measured as in
/// [`crate::gradcheck::fd_check`].
pub fn loss_gradient_error(
    encoder: &Encoder,
    batch: &[&Trajectory],
    masks: &[SampleMasks],
    cfg: &LossConfig,
    per_param: usize,
    step: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = encoder.store.bind(&mut g);
    let loss = batch_loss(encoder, &mut g, &b, batch, masks, cfg)?
        .ok_or_else(|| Error::Contract("batch has no supervised slot".into()))?;
    g.backward(loss.total)?;
    let grads = encoder.store.grads(&g, &b);

    let mut probe = encoder.clone();
    let value = |enc: &Encoder| -> Result<f64> {
        let mut g = Graph::new();
        let b = enc.store.bind_frozen(&mut g);
        let l = batch_loss(enc, &mut g, &b, batch, masks, cfg)?.expect("same supervision as above");
        Ok(g.value(l.total).data()[0])
    };
    let mut worst: f64 = 0.0;
    for (p, grad) in grads.iter().enumerate() {
        let n = grad.len();
        let count = per_param.min(n);
        for j in 0..count {
            let i = j * n / count;
            let orig = probe.store.get(ParamId(p)).data()[i];
            probe.store.get_mut(ParamId(p)).data_mut()[i] = orig + step;
            let up = value(&probe)?;
            probe.store.get_mut(ParamId(p)).data_mut()[i] = orig - step;
            let down = value(&probe)?;
            probe.store.get_mut(ParamId(p)).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            worst = worst.max(libm::fabs(a - numeric) / libm::fabs(a).max(1.0));
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct StepStats {
    pub losses: BranchLosses,
    pub coeff_fig: f64,
    pub coeff_ocr: f64,
    pub history_fired: usize,
}

/// Per-epoch means of the step statistics.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct EpochLog {
    pub epoch: u64,
    pub losses: BranchLosses,
    pub rho_ocr: f64,
    pub rho_fig: f64,
    pub coeff_fig: f64,
    pub coeff_ocr: f64,
    pub steps: usize,
}

pub struct Trainer {
    pub encoder: Encoder,
    pub config: TrainConfig,
    adam: Adam,
    epoch: u64,
}

impl Trainer {
    pub fn new(encoder: Encoder, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &encoder.store,
        );
        Ok(Self {
            encoder,
            config,
            adam,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> u64 {
        self.epoch
    }

    /// One update on `batch`; `indices` key the masks of each sequence.
    pub fn step(&mut self, batch: &[&Trajectory], indices: &[u64], step: u64) -> Result<Option<StepStats>> {
        let masks: Vec<SampleMasks> = indices
            .iter()
            .zip(batch)
            .map(|(&i, t)| sample_masks(&self.config.masks, self.config.seed, self.epoch, i, &t.actions))
            .collect();
        self.step_with_masks(batch, &masks, step)
    }

    pub fn step_with_masks(
        &mut self,
        batch: &[&Trajectory],
        masks: &[SampleMasks],
        step: u64,
    ) -> Result<Option<StepStats>> {
        let mut g = Graph::new();
        let b = self.encoder.store.bind(&mut g);
        let Some(loss) = batch_loss(&self.encoder, &mut g, &b, batch, masks, &self.config.loss)? else {
            return Ok(None);
        };
        g.backward(loss.total)?;
        let mut grads = self.encoder.store.grads(&g, &b);
        let (coeff_fig, coeff_ocr) = if self.config.modulation && self.encoder.has_modal_heads() {
            loss.losses.coefficients(self.config.loss.alpha)
        } else {
            (1.0, 1.0)
        };
        if self.encoder.has_modal_heads() {
            let mut noise = rng::keyed(self.config.seed, purpose::NOISE, self.epoch, step);
            let noise = (self.config.modulation && self.config.loss.noise).then_some(&mut noise);
            modulate_gradients(&self.encoder.store, &mut grads, coeff_fig, coeff_ocr, noise)?;
        }
        self.adam.step(&mut self.encoder.store, &grads).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("epoch {}: {m}", self.epoch)),
            other => other,
        })?;
        if !self.encoder.store.all_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {} step {step}", self.epoch)));
        }
        Ok(Some(StepStats {
            losses: loss.losses,
            coeff_fig,
            coeff_ocr,
            history_fired: loss.history_fired,
        }))
    }

    /// One pass over `trajs` in a seeded shuffled order.
    pub fn train_epoch(&mut self, trajs: &[Trajectory]) -> Result<EpochLog> {
        if trajs.is_empty() {
            return Err(Error::Contract("no trajectories to train on".into()));
        }
        let mut order: Vec<usize> = (0..trajs.len()).collect();
        order.shuffle(&mut rng::keyed(self.config.seed, purpose::SHUFFLE, self.epoch, 0));
        let mut log = EpochLog {
            epoch: self.epoch,
            ..Default::default()
        };
        for (s, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &trajs[i]).collect();
            let idx: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            if let Some(st) = self.step(&batch, &idx, s as u64)? {
                log.losses.fig += st.losses.fig;
                log.losses.ocr += st.losses.ocr;
                log.losses.concat += st.losses.concat;
                log.coeff_fig += st.coeff_fig;
                log.coeff_ocr += st.coeff_ocr;
                log.steps += 1;
            }
        }
        let n = log.steps.max(1) as f64;
        log.losses.fig /= n;
        log.losses.ocr /= n;
        log.losses.concat /= n;
        log.coeff_fig /= n;
        log.coeff_ocr /= n;
        if log.losses.fig > 0.0 && log.losses.ocr > 0.0 {
            log.rho_ocr = log.losses.rho_ocr();
            log.rho_fig = log.losses.rho_fig();
        }
        self.epoch += 1;
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, StreamSet};
    use crate::fusion::FusedState;
    use crate::kg::Triple;
    use crate::kg::{EntityId, RelationId};

    fn traj(actions: [Token; HORIZON], corrective: bool) -> Trajectory {
        Trajectory {
            query: Triple::new(EntityId(0), RelationId(0), EntityId(2)),
            query_tokens: [Token::BOS, Token(5), Token(9)],
            rtg0: 1.0,
            rtg: [1.0, 1.1, 0.4, 0.5, -0.4, -0.3, -0.3],
            state: Some(FusedState {
                structure: alloc::vec![0.1, 0.2, 0.3],
                image: alloc::vec![0.5; 8],
                ocr: alloc::vec![0.3, 0.6, 0.9],
            }),
            actions,
            corrective,
        }
    }

    fn path() -> [Token; HORIZON] {
        [Token(10), Token(6), Token(11), Token(7), Token::EOS, Token::PAD, Token::PAD]
    }

    fn encoder() -> Encoder {
        Encoder::new(EncoderConfig {
            d: 16,
            heads: 2,
            layers: 1,
            streams: StreamSet::all(),
            ..EncoderConfig::new(12)
        })
        .unwrap()
    }

    #[test]
    fn full_loss_gradient_matches_differences() {
        let enc = Encoder::new(EncoderConfig {
            d: 8,
            heads: 2,
            layers: 1,
            init_scale: 0.5,
            ..EncoderConfig::new(12)
        })
        .unwrap();
        let (a, b) = (traj(path(), false), traj(path(), false));
        let mut m = SampleMasks::default();
        m.history[2] = true;
        m.history_fired = true;
        let masks = [SampleMasks::default(), m];
        let err = loss_gradient_error(&enc, &[&a, &b], &masks, &LossConfig::default(), 8, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn supervision_rules() {
        let none = SampleMasks::default();
        assert_eq!(
            supervised_slots(&traj(path(), false), &none),
            [true, true, true, true, true, false, false]
        );
        let mut c = [Token::PAD; HORIZON];
        c[1] = Token::NULL;
        c[2] = Token(7);
        assert_eq!(
            supervised_slots(&traj(c, true), &none),
            [false, false, true, false, false, false, false]
        );
        let mut m = SampleMasks::default();
        m.dropped[2] = true;
        assert!(!supervised_slots(&traj(path(), false), &m)[1]);
    }

    #[test]
    fn overfits_one_sequence() {
        let t = traj(path(), false);
        let cfg = TrainConfig {
            lr: 1e-2,
            masks: MaskConfig::disabled(),
            loss: LossConfig {
                epsilon: 1.0,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(encoder(), cfg).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..150 {
            last = tr.train_epoch(core::slice::from_ref(&t)).unwrap().losses.concat;
        }
        assert!(last < 0.01, "{last}");
        let logits = tr.encoder.predict(&[encoder_input(&t, &SampleMasks::default())]).unwrap();
        for k in 0..5 {
            let row = logits.row(k);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best, t.actions[k].index());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ts = [traj(path(), false), traj(path(), false)];
        let run = || {
            let mut tr = Trainer::new(encoder(), TrainConfig::default()).unwrap();
            for _ in 0..3 {
                tr.train_epoch(&ts).unwrap();
            }
            tr.encoder.store
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn coefficient_never_below_one_for_both() {
        let ts: Vec<Trajectory> = (0..4).map(|_| traj(path(), false)).collect();
        let mut tr = Trainer::new(encoder(), TrainConfig::default()).unwrap();
        let refs: Vec<&Trajectory> = ts.iter().collect();
        for s in 0..5 {
            let st = tr.step(&refs, &[0, 1, 2, 3], s).unwrap().unwrap();
            assert!(st.coeff_fig == 1.0 || st.coeff_ocr == 1.0);
            assert!(st.coeff_fig > 0.0 && st.coeff_fig <= 1.0);
        }
    }
}
