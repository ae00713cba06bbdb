//! Multimodal feature pre-training: per-modality segment self-attention,
//! summary-guided filtering, and a sigmoid bottleneck autoencoder whose
//! codes form the fused entity state.
//!
//! Each raw modality vector is split into equal-width segments. A block
//! first summarises the segments with learned self-attention, then uses that
//! summary to re-weight the raw segments, and finally squeezes the filtered
//! segment through `σ(W·g + b)`. The structure modality is the entity's
//! relation-incidence profile; image and OCR vectors come from the feature
//! registry. Absent modalities are represented by a fixed per-block NULL
//! code rather than zeros.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kg::{EntityId, FeatureRegistry, RelationId, Token, Triple, Vocabulary};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, Branch, ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// Width of raw image and OCR vectors.
    pub raw_width: usize,
    /// Segments per raw image/OCR vector.
    pub segments: usize,
    pub structure_segments: usize,
    pub attn_hidden: usize,
    pub ae_hidden: usize,
    pub structure_width: usize,
    pub image_width: usize,
    pub ocr_width: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            raw_width: 32,
            segments: 4,
            structure_segments: 2,
            attn_hidden: 16,
            ae_hidden: 16,
            structure_width: 3,
            image_width: 8,
            ocr_width: 3,
            epochs: 300,
            lr: 5e-3,
            seed: 7,
        }
    }
}

impl FusionConfig {
    pub fn fused_width(&self) -> usize {
        self.structure_width + self.image_width + self.ocr_width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Structure,
    Image,
    Ocr,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Structure, Part::Image, Part::Ocr];

    fn tag(self) -> &'static str {
        match self {
            Part::Structure => "structure",
            Part::Image => "image",
            Part::Ocr => "ocr",
        }
    }
}

/// Parameter handles of one modality block.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBlock {
    pub segments: usize,
    pub seg_width: usize,
    pub out_width: usize,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    score_w: ParamId,
    guide_summary: ParamId,
    guide_segment: ParamId,
    guide_out: ParamId,
    enc_w: ParamId,
    enc_b: ParamId,
    dec1_w: ParamId,
    dec1_b: ParamId,
    dec2_w: ParamId,
    dec2_b: ParamId,
    null: ParamId,
}

impl ModalityBlock {
    fn new<R: Rng>(
        store: &mut ParamStore,
        part: Part,
        raw_width: usize,
        segments: usize,
        out_width: usize,
        cfg: &FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if segments == 0 || !raw_width.is_multiple_of(segments) {
            return Err(Error::Config(format!(
                "{} width {raw_width} is not divisible into {segments} segments",
                part.tag()
            )));
        }
        let seg = raw_width / segments;
        let (hid, ae) = (cfg.attn_hidden, cfg.ae_hidden);
        let mut p = |name: &str, shape: &[usize], scale: f64, rng: &mut R| {
            let t = if scale == 0.0 {
                Tensor::zeros(shape)
            } else {
                Tensor::uniform(shape, scale, rng)
            };
            store.add(format!("fusion.{}.{name}", part.tag()), t, Branch::Shared)
        };
        let s = |fan_in: usize| 1.0 / libm::sqrt(fan_in as f64);
        Ok(Self {
            segments,
            seg_width: seg,
            out_width,
            ff1_w: p("ff1_w", &[seg, hid], s(seg), rng),
            ff1_b: p("ff1_b", &[1, hid], 0.0, rng),
            ff2_w: p("ff2_w", &[hid, seg], s(hid), rng),
            ff2_b: p("ff2_b", &[1, seg], 0.0, rng),
            score_w: p("score_w", &[seg, 1], s(seg), rng),
            guide_summary: p("guide_summary", &[seg, hid], s(seg), rng),
            guide_segment: p("guide_segment", &[seg, hid], s(seg), rng),
            guide_out: p("guide_out", &[hid, 1], s(hid), rng),
            enc_w: p("enc_w", &[seg, out_width], s(seg), rng),
            enc_b: p("enc_b", &[1, out_width], 0.0, rng),
            dec1_w: p("dec1_w", &[out_width, ae], s(out_width), rng),
            dec1_b: p("dec1_b", &[1, ae], 0.0, rng),
            dec2_w: p("dec2_w", &[ae, raw_width], s(ae), rng),
            dec2_b: p("dec2_b", &[1, raw_width], 0.0, rng),
            null: {
                let t = Tensor::new(
                    vec![1, out_width],
                    (0..out_width).map(|_| rng.random::<f64>()).collect(),
                )?;
                store.add(format!("fusion.{}.null", part.tag()), t, Branch::Shared)
            },
        })
    }

    pub fn raw_width(&self) -> usize {
        self.segments * self.seg_width
    }

    /// Splits an `n × raw` batch into `(n·L) × seg` segment rows.
    pub fn segment_rows(&self, g: &mut Graph, raw: Var) -> Result<Var> {
        let n = g.value(raw).rows();
        g.reshape(raw, &[n * self.segments, self.seg_width])
    }

    /// Segment self-attention: `μᵢ = W₂·ReLU(W₁φᵢ + b₁) + b₂`,
    /// `a = softmax(w·μ)`, summary `Σ aᵢ μᵢ`. Returns `(summary n×seg,
    /// weights n×L)`.
    pub fn modal_attention(&self, g: &mut Graph, b: &Bound, segs: Var) -> Result<(Var, Var)> {
        let n = g.value(segs).rows() / self.segments;
        let h = g.affine(segs, b[self.ff1_w], b[self.ff1_b])?;
        let h = g.relu(h);
        let mu = g.affine(h, b[self.ff2_w], b[self.ff2_b])?;
        let scores = g.matmul(mu, b[self.score_w])?;
        let scores = g.reshape(scores, &[n, self.segments])?;
        let weights = g.softmax_rows(scores);
        let summary = g.group_weighted_sum(weights, mu)?;
        Ok((summary, weights))
    }

    /// Summary-guided filter:
    /// `pₖ = W[ReLU(W_s Q) ∘ ReLU(W_x φₖ)]`, `s = softmax(p)`, `g = Σ sₖ φₖ`.
    /// Returns `(filtered n×seg, weights n×L)`.
    pub fn guided_filter(&self, g: &mut Graph, b: &Bound, summary: Var, segs: Var) -> Result<(Var, Var)> {
        let n = g.value(summary).rows();
        let qs = g.matmul(summary, b[self.guide_summary])?;
        let qs = g.relu(qs);
        let rep: Vec<usize> = (0..n).flat_map(|i| core::iter::repeat_n(i, self.segments)).collect();
        let qs = g.gather_rows(qs, Arc::new(rep))?;
        let xs = g.matmul(segs, b[self.guide_segment])?;
        let xs = g.relu(xs);
        let joint = g.mul(qs, xs)?;
        let logits = g.matmul(joint, b[self.guide_out])?;
        let logits = g.reshape(logits, &[n, self.segments])?;
        let weights = g.softmax_rows(logits);
        let filtered = g.group_weighted_sum(weights, segs)?;
        Ok((filtered, weights))
    }

    /// Bottleneck code `σ(W·g + b)`.
    pub fn encode(&self, g: &mut Graph, b: &Bound, filtered: Var) -> Result<Var> {
        let z = g.affine(filtered, b[self.enc_w], b[self.enc_b])?;
        Ok(g.sigmoid(z))
    }

    pub fn decode(&self, g: &mut Graph, b: &Bound, code: Var) -> Result<Var> {
        let h = g.affine(code, b[self.dec1_w], b[self.dec1_b])?;
        let h = g.relu(h);
        g.affine(h, b[self.dec2_w], b[self.dec2_b])
    }

    /// Raw batch → bottleneck code.
    pub fn forward_code(&self, g: &mut Graph, b: &Bound, raw: Var) -> Result<Var> {
        let segs = self.segment_rows(g, raw)?;
        let (summary, _) = self.modal_attention(g, b, segs)?;
        let (filtered, _) = self.guided_filter(g, b, summary, segs)?;
        self.encode(g, b, filtered)
    }

    /// Mean squared reconstruction error of a raw batch.
    pub fn reconstruction_loss(&self, g: &mut Graph, b: &Bound, raw: Var) -> Result<Var> {
        let code = self.forward_code(g, b, raw)?;
        let recon = self.decode(g, b, code)?;
        let diff = g.sub(recon, raw)?;
        let sq = g.mul(diff, diff)?;
        Ok(g.mean(sq))
    }
}

/// Fused per-entity state: structure ∥ image ∥ OCR codes.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedState {
    pub structure: Vec<f64>,
    pub image: Vec<f64>,
    pub ocr: Vec<f64>,
}

impl FusedState {
    pub fn concatenated(&self) -> Vec<f64> {
        let mut v = self.structure.clone();
        v.extend_from_slice(&self.image);
        v.extend_from_slice(&self.ocr);
        v
    }

    pub fn width(&self) -> usize {
        self.structure.len() + self.image.len() + self.ocr.len()
    }

    pub fn from_concatenated(v: &[f64], structure: usize, image: usize) -> Self {
        Self {
            structure: v[..structure].to_vec(),
            image: v[structure..structure + image].to_vec(),
            ocr: v[structure + image..].to_vec(),
        }
    }
}

/// Relation-incidence profile per entity: out-degree per forward relation
/// followed by in-degree per forward relation, scaled into `[0, 1]`.
pub fn structure_profiles(vocab: &Vocabulary, triples: &[Triple]) -> Tensor {
    let r = vocab.num_forward_relations().max(1);
    let mut t = Tensor::zeros(&[vocab.num_entities().max(1), 2 * r]);
    for tr in triples {
        let (rel, flipped) = if vocab.is_inverse(tr.relation) {
            (vocab.inverse(tr.relation).0 as usize, true)
        } else {
            (tr.relation.0 as usize, false)
        };
        let (out_e, in_e) = if flipped { (tr.tail, tr.head) } else { (tr.head, tr.tail) };
        let o = t.get(out_e.0 as usize, rel);
        t.set(out_e.0 as usize, rel, o + 1.0);
        let i = t.get(in_e.0 as usize, r + rel);
        t.set(in_e.0 as usize, r + rel, i + 1.0);
    }
    let max = t.data().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in t.data_mut() {
            *v /= max;
        }
    }
    t
}

/// The three modality blocks and their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub store: ParamStore,
    pub structure: ModalityBlock,
    pub image: ModalityBlock,
    pub ocr: ModalityBlock,
    trained: bool,
}

impl FusionModel {
    /// Fresh, untrained blocks. `structure_raw_width` is the width of the
    /// incidence profile (twice the forward relation count).
    pub fn init(config: FusionConfig, structure_raw_width: usize) -> Result<Self> {
        let mut rng = rng::keyed(config.seed, rng::purpose::FUSION_INIT, 0, 0);
        let mut store = ParamStore::new();
        let structure = ModalityBlock::new(
            &mut store,
            Part::Structure,
            structure_raw_width,
            config.structure_segments,
            config.structure_width,
            &config,
            &mut rng,
        )?;
        let image = ModalityBlock::new(
            &mut store,
            Part::Image,
            config.raw_width,
            config.segments,
            config.image_width,
            &config,
            &mut rng,
        )?;
        let ocr = ModalityBlock::new(
            &mut store,
            Part::Ocr,
            config.raw_width,
            config.segments,
            config.ocr_width,
            &config,
            &mut rng,
        )?;
        Ok(Self {
            config,
            store,
            structure,
            image,
            ocr,
            trained: false,
        })
    }

    /// Rebuilds a trained model from stored parameter values.
    pub fn from_values(
        config: FusionConfig,
        structure_raw_width: usize,
        values: Vec<(alloc::string::String, Tensor)>,
    ) -> Result<Self> {
        let mut m = Self::init(config, structure_raw_width)?;
        m.store.load_values(values)?;
        m.trained = true;
        Ok(m)
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn block(&self, part: Part) -> &ModalityBlock {
        match part {
            Part::Structure => &self.structure,
            Part::Image => &self.image,
            Part::Ocr => &self.ocr,
        }
    }

    fn batches(
        &self,
        registry: &FeatureRegistry,
        profiles: &Tensor,
    ) -> Result<Vec<(Part, Tensor)>> {
        let mut out = vec![(Part::Structure, profiles.clone())];
        for part in [Part::Image, Part::Ocr] {
            let rows: Vec<&[f64]> = (0..registry.num_entities())
                .filter_map(|e| {
                    let e = EntityId(e as u32);
                    match part {
                        Part::Image => registry.image(e),
                        _ => registry.ocr(e),
                    }
                })
                .collect();
            if !rows.is_empty() {
                out.push((part, Tensor::from_rows(&rows)));
            }
        }
        Ok(out)
    }

    /// Total reconstruction MSE (summed over the modality blocks that have
    /// data) at the current parameters.
    pub fn reconstruction_error(&self, registry: &FeatureRegistry, profiles: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.store.bind_frozen(&mut g);
        let mut total = 0.0;
        for (part, raw) in self.batches(registry, profiles)? {
            let x = g.constant(raw);
            let l = self.block(part).reconstruction_loss(&mut g, &b, x)?;
            total += g.value(l).data()[0];
        }
        Ok(total)
    }

    /// Full-batch Adam on the summed reconstruction loss. Returns the loss
    /// recorded before each epoch's update.
    pub fn pretrain(&mut self, registry: &FeatureRegistry, profiles: &Tensor) -> Result<Vec<f64>> {
        if registry.count_with(crate::kg::Modality::Image) == 0
            && registry.count_with(crate::kg::Modality::Ocr) == 0
        {
            return Err(Error::Config("no entity has image or OCR features".into()));
        }
        if profiles.cols() != self.structure.raw_width() {
            return Err(Error::Dimension {
                op: "pretrain",
                left: vec![self.structure.raw_width()],
                right: profiles.shape().to_vec(),
            });
        }
        let batches = self.batches(registry, profiles)?;
        let mut adam = Adam::new(
            AdamConfig {
                lr: self.config.lr,
                ..AdamConfig::default()
            },
            &self.store,
        );
        let mut curve = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let mut g = Graph::new();
            let b = self.store.bind(&mut g);
            let mut losses = Vec::new();
            for (part, raw) in &batches {
                let x = g.constant(raw.clone());
                losses.push(self.block(*part).reconstruction_loss(&mut g, &b, x)?);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l)?;
            }
            curve.push(g.value(total).data()[0]);
            g.backward(total)?;
            let grads = self.store.grads(&g, &b);
            adam.step(&mut self.store, &grads)?;
        }
        self.trained = true;
        Ok(curve)
    }

    /// Bottleneck code for one raw vector of the given modality.
    pub fn reduce(&self, part: Part, raw: &[f64]) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::State("fusion blocks have not been pretrained".into()));
        }
        let block = self.block(part);
        if raw.len() != block.raw_width() {
            return Err(Error::Dimension {
                op: "reduce",
                left: vec![block.raw_width()],
                right: vec![raw.len()],
            });
        }
        let mut g = Graph::new();
        let b = self.store.bind_frozen(&mut g);
        let x = g.constant(Tensor::row_vector(raw));
        let code = block.forward_code(&mut g, &b, x)?;
        Ok(g.value(code).data().to_vec())
    }

    pub fn null_code(&self, part: Part) -> &[f64] {
        self.store.get(self.block(part).null).data()
    }

    /// Fused state for every entity.
    pub fn fused_table(&self, registry: &FeatureRegistry, profiles: &Tensor) -> Result<FusedTable> {
        let mut states = Vec::with_capacity(registry.num_entities());
        for e in 0..registry.num_entities() {
            let id = EntityId(e as u32);
            let structure = self.reduce(Part::Structure, profiles.row(e))?;
            let image = match registry.image(id) {
                Some(v) => self.reduce(Part::Image, v)?,
                None => self.null_code(Part::Image).to_vec(),
            };
            let ocr = match registry.ocr(id) {
                Some(v) => self.reduce(Part::Ocr, v)?,
                None => self.null_code(Part::Ocr).to_vec(),
            };
            states.push(FusedState {
                structure,
                image,
                ocr,
            });
        }
        Ok(FusedTable { states })
    }
}

/// Precomputed fused states, indexed by entity.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FusedTable {
    pub states: Vec<FusedState>,
}

impl FusedTable {
    pub fn get(&self, e: EntityId) -> Option<&FusedState> {
        self.states.get(e.0 as usize)
    }

    /// Fused state of the head plus the query tokens `(BOS, h, r)`.
    pub fn fuse_query(
        &self,
        vocab: &Vocabulary,
        head: EntityId,
        relation: RelationId,
    ) -> Result<(FusedState, [Token; 3])> {
        if relation.0 as usize >= vocab.num_relations() {
            return Err(Error::Lookup {
                kind: "relation id",
                name: format!("{}", relation.0),
            });
        }
        let state = self.get(head).ok_or_else(|| Error::Lookup {
            kind: "entity id",
            name: format!("{}", head.0),
        })?;
        Ok((
            state.clone(),
            [Token::BOS, vocab.entity_token(head), vocab.relation_token(relation)],
        ))
    }
}
