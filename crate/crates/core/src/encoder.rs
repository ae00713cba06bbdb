//! Return-conditioned sequence encoder.
//!
//! Each timestep contributes up to five tokens: return-to-go, query, image
//! code, OCR code and the action input. The first four share a positional
//! table and attend to each other causally across timesteps; the action
//! stream has its own positional table and attends only to earlier actions.
//! Blocks are pre-norm residual: attention, then a feed-forward map shared
//! by all streams. Output heads read the per-timestep concatenation of
//! streams and predict the next action.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::FusedState;
use crate::graph::{AttendList, Graph, Var};
use crate::kg::Token;
use crate::params::{Bound, Branch, ParamId, ParamStore};
use crate::paths::HORIZON;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Rtg,
    Query,
    Image,
    Ocr,
    Action,
}

impl Stream {
    pub const ALL: [Stream; 5] = [Stream::Rtg, Stream::Query, Stream::Image, Stream::Ocr, Stream::Action];

    pub fn tag(self) -> &'static str {
        match self {
            Stream::Rtg => "rtg",
            Stream::Query => "query",
            Stream::Image => "image",
            Stream::Ocr => "ocr",
            Stream::Action => "action",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Which optional streams are fed to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamSet {
    pub rtg: bool,
    pub image: bool,
    pub ocr: bool,
}

impl StreamSet {
    pub fn all() -> Self {
        Self {
            rtg: true,
            image: true,
            ocr: true,
        }
    }

    pub fn contains(&self, s: Stream) -> bool {
        match s {
            Stream::Rtg => self.rtg,
            Stream::Image => self.image,
            Stream::Ocr => self.ocr,
            Stream::Query | Stream::Action => true,
        }
    }

    /// Both modal streams present, so the single-modal heads exist.
    pub fn multimodal(&self) -> bool {
        self.image && self.ocr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub structure_width: usize,
    pub image_width: usize,
    pub ocr_width: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub streams: StreamSet,
    /// One trunk per head instead of a single shared trunk.
    pub separate_trunks: bool,
    /// Bias compensation; single-modal heads add `b/2` to their input.
    pub bias_b: f64,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            d: 64,
            heads: 4,
            layers: 2,
            vocab_size,
            structure_width: 3,
            image_width: 8,
            ocr_width: 3,
            init_scale: 0.08,
            seed: 7,
            streams: StreamSet::all(),
            separate_trunks: false,
            bias_b: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of head count {}",
                self.d, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one encoder layer is required".into()));
        }
        if self.vocab_size <= crate::kg::SPECIAL_TOKENS as usize {
            return Err(Error::Config("vocabulary holds no entities or relations".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct StreamParams {
    proj_w: ParamId,
    proj_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    /// `[W_Q, W_K, W_V, W_O]` per layer.
    attn: Vec<[ParamId; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Trunk {
    streams: Vec<Stream>,
    params: [Option<StreamParams>; 5],
    pos_ctx: ParamId,
    pos_act: ParamId,
    layers: Vec<LayerParams>,
    final_g: ParamId,
    final_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Fig,
    Ocr,
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    trunk: usize,
    reads: Vec<Stream>,
    w: ParamId,
    b: ParamId,
    compensate: bool,
}

/// One sequence for the encoder. Action inputs are `(BOS, a₁, …, a₆)`
/// after masking; `rtg[n]` is the return-to-go at timestep `n`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub rtg: [f64; HORIZON],
    pub head: Token,
    pub relation: Token,
    pub state: Option<&'a FusedState>,
    pub actions: [Token; HORIZON],
}

/// Per-slot logits, `(B·HORIZON) × V`, row `b·HORIZON + n` predicting
/// action `n + 1` of sequence `b`.
#[derive(Clone, Copy, Debug)]
pub struct HeadLogits {
    pub concat: Var,
    pub fig: Option<Var>,
    pub ocr: Option<Var>,
}

/// Hidden states of each stream in a trunk, `(B·HORIZON) × d`.
pub type StreamStates = [Option<Var>; 5];

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    embed: ParamId,
    trunks: Vec<Trunk>,
    concat: Head,
    fig: Option<Head>,
    ocr: Option<Head>,
}

fn input_width(cfg: &EncoderConfig, s: Stream) -> usize {
    match s {
        Stream::Rtg => 1,
        Stream::Query => 2 * cfg.d + cfg.structure_width,
        Stream::Image => cfg.image_width,
        Stream::Ocr => cfg.ocr_width,
        Stream::Action => cfg.d,
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::keyed(config.seed, rng::purpose::INIT, 0, 0);
        let mut store = ParamStore::new();
        let d = config.d;
        let scale = config.init_scale;
        let embed = store.add(
            "embed",
            Tensor::uniform(&[config.vocab_size, d], scale, &mut rng),
            Branch::Shared,
        );
        let active: Vec<Stream> = Stream::ALL
            .into_iter()
            .filter(|s| config.streams.contains(*s))
            .collect();
        let mm = config.streams.multimodal();
        let trunk_plan: Vec<(&str, Vec<Stream>, Option<Branch>)> = if config.separate_trunks && mm {
            let without = |x: Stream| active.iter().copied().filter(|s| *s != x).collect();
            vec![
                ("concat", active.clone(), Some(Branch::Shared)),
                ("fig", without(Stream::Ocr), Some(Branch::Fig)),
                ("ocr", without(Stream::Image), Some(Branch::Ocr)),
            ]
        } else {
            vec![("trunk", active.clone(), None)]
        };
        let mut trunks = Vec::new();
        for (name, streams, fixed) in &trunk_plan {
            let mut p = |n: &str, t: Tensor, b: Branch| store.add(format!("{name}.{n}"), t, fixed.unwrap_or(b));
            let mut params: [Option<StreamParams>; 5] = Default::default();
            for &s in streams {
                let branch = match s {
                    Stream::Image => Branch::Fig,
                    Stream::Ocr => Branch::Ocr,
                    _ => Branch::Shared,
                };
                let t = s.tag();
                let w = input_width(&config, s);
                let proj_w = p(&format!("{t}.proj_w"), Tensor::uniform(&[w, d], scale, &mut rng), branch);
                let proj_b = p(&format!("{t}.proj_b"), Tensor::uniform(&[1, d], scale, &mut rng), branch);
                let ln_g = p(&format!("{t}.ln_g"), Tensor::filled(&[1, d], 1.0), branch);
                let ln_b = p(&format!("{t}.ln_b"), Tensor::zeros(&[1, d]), branch);
                let attn = (0..config.layers)
                    .map(|l| {
                        ["wq", "wk", "wv", "wo"].map(|m| {
                            p(
                                &format!("{t}.l{l}.{m}"),
                                Tensor::uniform(&[d, d], scale, &mut rng),
                                branch,
                            )
                        })
                    })
                    .collect();
                params[s.slot()] = Some(StreamParams {
                    proj_w,
                    proj_b,
                    ln_g,
                    ln_b,
                    attn,
                });
            }
            let sh = Branch::Shared;
            let pos_ctx = p("pos_ctx", Tensor::uniform(&[HORIZON, d], scale, &mut rng), sh);
            let pos_act = p("pos_act", Tensor::uniform(&[HORIZON, d], scale, &mut rng), sh);
            let layers = (0..config.layers)
                .map(|l| LayerParams {
                    ln1_g: p(&format!("l{l}.ln1_g"), Tensor::filled(&[1, d], 1.0), sh),
                    ln1_b: p(&format!("l{l}.ln1_b"), Tensor::zeros(&[1, d]), sh),
                    ln2_g: p(&format!("l{l}.ln2_g"), Tensor::filled(&[1, d], 1.0), sh),
                    ln2_b: p(&format!("l{l}.ln2_b"), Tensor::zeros(&[1, d]), sh),
                    ff1_w: p(&format!("l{l}.ff1_w"), Tensor::uniform(&[d, 4 * d], scale, &mut rng), sh),
                    ff1_b: p(&format!("l{l}.ff1_b"), Tensor::zeros(&[1, 4 * d]), sh),
                    ff2_w: p(&format!("l{l}.ff2_w"), Tensor::uniform(&[4 * d, d], scale, &mut rng), sh),
                    ff2_b: p(&format!("l{l}.ff2_b"), Tensor::zeros(&[1, d]), sh),
                })
                .collect();
            let final_g = p("final_g", Tensor::filled(&[1, d], 1.0), sh);
            let final_b = p("final_b", Tensor::zeros(&[1, d]), sh);
            trunks.push(Trunk {
                streams: streams.clone(),
                params,
                pos_ctx,
                pos_act,
                layers,
                final_g,
                final_b,
            });
        }
        let v = config.vocab_size;
        let mut head = |name: &str, trunk: usize, reads: Vec<Stream>, branch: Branch, compensate: bool| {
            let w = store.add(
                format!("head.{name}.w"),
                Tensor::uniform(&[reads.len() * d, v], scale, &mut rng),
                branch,
            );
            let b = store.add(format!("head.{name}.b"), Tensor::zeros(&[1, v]), branch);
            Head {
                trunk,
                reads,
                w,
                b,
                compensate,
            }
        };
        let without = |x: Stream| -> Vec<Stream> {
            let mut r: Vec<Stream> = active.iter().copied().filter(|s| *s != x).collect();
            r.sort_by_key(|s| (*s != Stream::Action, *s));
            r
        };
        let mut all_reads = active.clone();
        all_reads.sort_by_key(|s| (*s != Stream::Action, *s));
        let concat = head("concat", 0, all_reads, Branch::Shared, false);
        let (fig, ocr) = if mm {
            let (ft, ot) = if trunks.len() == 3 { (1, 2) } else { (0, 0) };
            (
                Some(head("fig", ft, without(Stream::Ocr), Branch::Fig, true)),
                Some(head("ocr", ot, without(Stream::Image), Branch::Ocr, true)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            store,
            embed,
            trunks,
            concat,
            fig,
            ocr,
        })
    }

    pub fn num_trunks(&self) -> usize {
        self.trunks.len()
    }

    pub fn has_modal_heads(&self) -> bool {
        self.fig.is_some()
    }

    fn check_tokens(&self, batch: &[EncoderInput]) -> Result<()> {
        let v = self.config.vocab_size as u32;
        for item in batch {
            for t in item.actions.iter().chain([&item.head, &item.relation]) {
                if t.0 >= v {
                    return Err(Error::Lookup {
                        kind: "token",
                        name: format!("{}", t.0),
                    });
                }
            }
        }
        Ok(())
    }

    /// Raw per-stream inputs before projection, `(B·HORIZON) × width`.
    fn stream_input(&self, g: &mut Graph, b: &Bound, batch: &[EncoderInput], s: Stream) -> Result<Var> {
        let n = batch.len() * HORIZON;
        let cfg = &self.config;
        let per_step = |f: &dyn Fn(&EncoderInput) -> Vec<f64>, w: usize| -> Tensor {
            let mut data = Vec::with_capacity(n * w);
            for item in batch {
                let row = f(item);
                for _ in 0..HORIZON {
                    data.extend_from_slice(&row);
                }
            }
            Tensor::new(vec![n, w], data).expect("row widths are fixed")
        };
        Ok(match s {
            Stream::Rtg => {
                let data: Vec<f64> = batch.iter().flat_map(|i| i.rtg).collect();
                g.constant(Tensor::new(vec![n, 1], data)?)
            }
            Stream::Query => {
                let heads: Vec<usize> = batch
                    .iter()
                    .flat_map(|i| core::iter::repeat_n(i.head.index(), HORIZON))
                    .collect();
                let rels: Vec<usize> = batch
                    .iter()
                    .flat_map(|i| core::iter::repeat_n(i.relation.index(), HORIZON))
                    .collect();
                let eh = g.gather_rows(b[self.embed], Arc::new(heads))?;
                let er = g.gather_rows(b[self.embed], Arc::new(rels))?;
                let sw = cfg.structure_width;
                let st = per_step(
                    &|i| i.state.map_or(vec![0.0; sw], |s| s.structure.clone()),
                    sw,
                );
                let st = g.constant(st);
                g.concat_cols(&[eh, er, st])?
            }
            Stream::Image => {
                let w = cfg.image_width;
                let t = per_step(&|i| i.state.map_or(vec![0.0; w], |s| s.image.clone()), w);
                g.constant(t)
            }
            Stream::Ocr => {
                let w = cfg.ocr_width;
                let t = per_step(&|i| i.state.map_or(vec![0.0; w], |s| s.ocr.clone()), w);
                g.constant(t)
            }
            Stream::Action => {
                let ids: Vec<usize> = batch.iter().flat_map(|i| i.actions.map(|t| t.index())).collect();
                g.gather_rows(b[self.embed], Arc::new(ids))?
            }
        })
    }

    /// `sigmoid(LN(x·W + b))` per stream, before positions are added.
    pub fn project(&self, g: &mut Graph, b: &Bound, batch: &[EncoderInput], trunk: usize) -> Result<StreamStates> {
        self.check_tokens(batch)?;
        let t = &self.trunks[trunk];
        let mut out: StreamStates = Default::default();
        for &s in &t.streams {
            let sp = t.params[s.slot()].as_ref().expect("active stream has params");
            let x = self.stream_input(g, b, batch, s)?;
            let z = g.affine(x, b[sp.proj_w], b[sp.proj_b])?;
            let z = g.layer_norm(z, b[sp.ln_g], b[sp.ln_b])?;
            out[s.slot()] = Some(g.sigmoid(z));
        }
        Ok(out)
    }

    /// Projected streams plus positional embeddings: the context streams
    /// share one table, the action stream uses its own.
    pub fn embed_sequence(&self, g: &mut Graph, b: &Bound, batch: &[EncoderInput], trunk: usize) -> Result<StreamStates> {
        let projected = self.project(g, b, batch, trunk)?;
        let t = &self.trunks[trunk];
        let idx: Arc<Vec<usize>> = Arc::new((0..batch.len()).flat_map(|_| 0..HORIZON).collect());
        let pc = g.gather_rows(b[t.pos_ctx], idx.clone())?;
        let pa = g.gather_rows(b[t.pos_act], idx)?;
        let mut out: StreamStates = Default::default();
        for &s in &t.streams {
            let x = projected[s.slot()].expect("projected");
            let pos = if s == Stream::Action { pa } else { pc };
            out[s.slot()] = Some(g.add(x, pos)?);
        }
        Ok(out)
    }

    fn context_streams(&self, trunk: usize) -> Vec<Stream> {
        self.trunks[trunk]
            .streams
            .iter()
            .copied()
            .filter(|s| *s != Stream::Action)
            .collect()
    }

    /// Visible keys per query row. Context rows see every context stream at
    /// timesteps up to their own; action rows see earlier actions only.
    fn attend_lists(&self, batch: usize, trunk: usize) -> (AttendList, AttendList) {
        let ctx = self.context_streams(trunk).len();
        let block = batch * HORIZON;
        let mut c = Vec::with_capacity(block);
        let mut a = Vec::with_capacity(block);
        for bi in 0..batch {
            for n in 0..HORIZON {
                let mut keys = Vec::with_capacity(ctx * (n + 1));
                for s in 0..ctx {
                    for m in 0..=n {
                        keys.push((s * block + bi * HORIZON + m) as u32);
                    }
                }
                c.push(keys);
                a.push((0..=n).map(|m| (bi * HORIZON + m) as u32).collect());
            }
        }
        (Arc::new(c), Arc::new(a))
    }

    /// Pre-norm residual block `layer` of `trunk`.
    pub fn encoder_block(
        &self,
        g: &mut Graph,
        b: &Bound,
        trunk: usize,
        layer: usize,
        x: &StreamStates,
        batch: usize,
    ) -> Result<StreamStates> {
        let t = &self.trunks[trunk];
        let lp = &t.layers[layer];
        let heads = self.config.heads;
        let (ctx_allow, act_allow) = self.attend_lists(batch, trunk);
        let mut qkv: [Option<(Var, Var, Var)>; 5] = Default::default();
        for &s in &t.streams {
            let xs = x[s.slot()].expect("stream state");
            let [wq, wk, wv, _] = t.params[s.slot()].as_ref().expect("params").attn[layer];
            let h = g.layer_norm(xs, b[lp.ln1_g], b[lp.ln1_b])?;
            qkv[s.slot()] = Some((g.matmul(h, b[wq])?, g.matmul(h, b[wk])?, g.matmul(h, b[wv])?));
        }
        let ctx = self.context_streams(trunk);
        let ctx_k: Vec<Var> = ctx.iter().map(|s| qkv[s.slot()].unwrap().1).collect();
        let ctx_v: Vec<Var> = ctx.iter().map(|s| qkv[s.slot()].unwrap().2).collect();
        let keys = g.concat_rows(&ctx_k)?;
        let vals = g.concat_rows(&ctx_v)?;
        let mut out: StreamStates = Default::default();
        for &s in &t.streams {
            let (q, k, v) = qkv[s.slot()].unwrap();
            let wo = t.params[s.slot()].as_ref().expect("params").attn[layer][3];
            let att = if s == Stream::Action {
                g.attention(q, k, v, heads, act_allow.clone())?
            } else {
                g.attention(q, keys, vals, heads, ctx_allow.clone())?
            };
            let att = g.matmul(att, b[wo])?;
            let mid = g.add(att, x[s.slot()].unwrap())?;
            let h = g.layer_norm(mid, b[lp.ln2_g], b[lp.ln2_b])?;
            let h = g.affine(h, b[lp.ff1_w], b[lp.ff1_b])?;
            let h = g.relu(h);
            let h = g.affine(h, b[lp.ff2_w], b[lp.ff2_b])?;
            out[s.slot()] = Some(g.add(h, mid)?);
        }
        Ok(out)
    }

    /// Embedding, every block, and the final layer norm of one trunk.
    pub fn run_trunk(&self, g: &mut Graph, b: &Bound, batch: &[EncoderInput], trunk: usize) -> Result<StreamStates> {
        if batch.is_empty() {
            return Err(Error::Contract("empty encoder batch".into()));
        }
        let mut x = self.embed_sequence(g, b, batch, trunk)?;
        for l in 0..self.config.layers {
            x = self.encoder_block(g, b, trunk, l, &x, batch.len())?;
        }
        let t = &self.trunks[trunk];
        let mut out: StreamStates = Default::default();
        for &s in &t.streams {
            out[s.slot()] = Some(g.layer_norm(x[s.slot()].unwrap(), b[t.final_g], b[t.final_b])?);
        }
        Ok(out)
    }

    fn head_logits(&self, g: &mut Graph, b: &Bound, head: &Head, states: &[StreamStates]) -> Result<Var> {
        let parts: Vec<Var> = head
            .reads
            .iter()
            .map(|s| states[head.trunk][s.slot()].expect("head reads an active stream"))
            .collect();
        let mut x = g.concat_cols(&parts)?;
        if head.compensate && self.config.bias_b != 0.0 {
            let shape = g.value(x).shape().to_vec();
            let c = g.constant(Tensor::filled(&shape, self.config.bias_b / 2.0));
            x = g.add(x, c)?;
        }
        g.affine(x, b[head.w], b[head.b])
    }

    /// Logits of every head over a batch.
    pub fn forward(&self, g: &mut Graph, b: &Bound, batch: &[EncoderInput]) -> Result<HeadLogits> {
        let states: Vec<StreamStates> = (0..self.trunks.len())
            .map(|t| self.run_trunk(g, b, batch, t))
            .collect::<Result<_>>()?;
        let concat = self.head_logits(g, b, &self.concat, &states)?;
        let fig = match &self.fig {
            Some(h) => Some(self.head_logits(g, b, h, &states)?),
            None => None,
        };
        let ocr = match &self.ocr {
            Some(h) => Some(self.head_logits(g, b, h, &states)?),
            None => None,
        };
        Ok(HeadLogits { concat, fig, ocr })
    }

    /// Concat-head logits with frozen parameters.
    pub fn predict(&self, batch: &[EncoderInput]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.store.bind_frozen(&mut g);
        let states = self.run_trunk(&mut g, &b, batch, self.concat.trunk)?;
        let mut all = vec![Default::default(); self.trunks.len()];
        all[self.concat.trunk] = states;
        let logits = self.head_logits(&mut g, &b, &self.concat, &all)?;
        Ok(g.value(logits).clone())
    }

    pub fn load_values(&mut self, values: Vec<(alloc::string::String, Tensor)>) -> Result<()> {
        self.store.load_values(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;

    pub(crate) fn small(streams: StreamSet, separate: bool) -> Encoder {
        Encoder::new(EncoderConfig {
            d: 8,
            heads: 2,
            layers: 2,
            vocab_size: 12,
            init_scale: 0.5,
            streams,
            separate_trunks: separate,
            seed: 3,
            ..EncoderConfig::new(12)
        })
        .unwrap()
    }

    fn state() -> FusedState {
        FusedState {
            structure: vec![0.2, 0.4, 0.6],
            image: (0..8).map(|i| 0.1 * i as f64).collect(),
            ocr: vec![0.9, 0.1, 0.5],
        }
    }

    fn input(s: &FusedState) -> EncoderInput<'_> {
        EncoderInput {
            rtg: [1.0, 1.1, 0.4, 0.5, -0.4, -0.3, -0.3],
            head: Token(5),
            relation: Token(9),
            state: Some(s),
            actions: [Token::BOS, Token(9), Token(6), Token(10), Token(7), Token::EOS, Token::PAD],
        }
    }

    #[test]
    fn rejects_indivisible_width() {
        let cfg = EncoderConfig {
            d: 10,
            heads: 4,
            ..EncoderConfig::new(12)
        };
        assert!(matches!(Encoder::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_token_is_lookup_error() {
        let enc = small(StreamSet::all(), false);
        let s = state();
        let mut i = input(&s);
        i.actions[3] = Token(40);
        assert!(matches!(enc.predict(&[i]), Err(Error::Lookup { .. })));
    }

    #[test]
    fn projections_lie_in_unit_interval_and_match_reference() {
        let enc = small(StreamSet::all(), false);
        let s = state();
        let batch = [input(&s)];
        let mut g = Graph::new();
        let b = enc.store.bind_frozen(&mut g);
        let p = enc.project(&mut g, &b, &batch, 0).unwrap();
        for v in p.iter().flatten() {
            assert!(g.value(*v).data().iter().all(|x| *x > 0.0 && *x < 1.0));
        }
        // image stream by hand: sigmoid(LN(x W + b))
        let sp = enc.trunks[0].params[Stream::Image.slot()].as_ref().unwrap();
        let (w, bias) = (enc.store.get(sp.proj_w), enc.store.get(sp.proj_b));
        let z: Vec<f64> = (0..8)
            .map(|j| (0..8).map(|i| s.image[i] * w.get(i, j)).sum::<f64>() + bias.data()[j])
            .collect();
        let mean = z.iter().sum::<f64>() / 8.0;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        let expect: Vec<f64> = z.iter().map(|v| sigmoid((v - mean) / libm::sqrt(var + 1e-5))).collect();
        let got = g.value(p[Stream::Image.slot()].unwrap());
        for n in 0..HORIZON {
            for (a, e) in got.row(n).iter().zip(&expect) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_input_projects_to_sigmoid_of_normalised_bias() {
        let enc = small(StreamSet::all(), false);
        let zero = FusedState {
            structure: vec![0.0; 3],
            image: vec![0.0; 8],
            ocr: vec![0.0; 3],
        };
        let mut g = Graph::new();
        let b = enc.store.bind_frozen(&mut g);
        let p = enc.project(&mut g, &b, &[input(&zero)], 0).unwrap();
        let sp = enc.trunks[0].params[Stream::Ocr.slot()].as_ref().unwrap();
        let bias = enc.store.get(sp.proj_b).data();
        let mean = bias.iter().sum::<f64>() / 8.0;
        let var = bias.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        let got = g.value(p[Stream::Ocr.slot()].unwrap());
        for (a, bv) in got.row(0).iter().zip(bias) {
            assert!((a - sigmoid((bv - mean) / libm::sqrt(var + 1e-5))).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_are_added_per_timestep() {
        let enc = small(StreamSet::all(), false);
        let s = state();
        let batch = [input(&s), input(&s)];
        let mut g = Graph::new();
        let b = enc.store.bind_frozen(&mut g);
        let p = enc.project(&mut g, &b, &batch, 0).unwrap();
        let e = enc.embed_sequence(&mut g, &b, &batch, 0).unwrap();
        let t = &enc.trunks[0];
        assert_eq!(enc.store.get(t.pos_ctx).rows(), HORIZON);
        assert_eq!(enc.store.get(t.pos_act).rows(), HORIZON);
        for st in Stream::ALL {
            let table = enc.store.get(if st == Stream::Action { t.pos_act } else { t.pos_ctx });
            let (pv, ev) = (g.value(p[st.slot()].unwrap()), g.value(e[st.slot()].unwrap()));
            for row in 0..2 * HORIZON {
                for j in 0..8 {
                    let hand = pv.get(row, j) + table.get(row % HORIZON, j);
                    assert!((ev.get(row, j) - hand).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn swapping_sequences_permutes_outputs() {
        let enc = small(StreamSet::all(), false);
        let s = state();
        let a = input(&s);
        let mut c = a;
        c.actions[2] = Token(8);
        c.rtg[3] = 0.7;
        let ab = enc.predict(&[a, c]).unwrap();
        let ba = enc.predict(&[c, a]).unwrap();
        for n in 0..HORIZON {
            assert_eq!(ab.row(n), ba.row(HORIZON + n));
            assert_eq!(ab.row(HORIZON + n), ba.row(n));
        }
    }

    #[test]
    fn action_stream_ignores_image_stream() {
        let enc = small(StreamSet::all(), false);
        let s = state();
        let mut t = state();
        t.image = vec![5.0; 8];
        let run = |st: &FusedState| {
            let mut g = Graph::new();
            let b = enc.store.bind_frozen(&mut g);
            let out = enc.run_trunk(&mut g, &b, &[input(st)], 0).unwrap();
            (
                g.value(out[Stream::Action.slot()].unwrap()).clone(),
                g.value(out[Stream::Query.slot()].unwrap()).clone(),
            )
        };
        let (a1, q1) = run(&s);
        let (a2, q2) = run(&t);
        assert_eq!(a1, a2);
        assert_ne!(q1, q2);
    }

    #[test]
    fn zeroed_sublayers_make_block_identity() {
        let mut enc = small(StreamSet::all(), false);
        let t = enc.trunks[0].clone();
        for sp in t.params.iter().flatten() {
            *enc.store.get_mut(sp.attn[0][3]) = Tensor::zeros(&[8, 8]);
        }
        *enc.store.get_mut(t.layers[0].ff2_w) = Tensor::zeros(&[32, 8]);
        let s = state();
        let batch = [input(&s)];
        let mut g = Graph::new();
        let b = enc.store.bind_frozen(&mut g);
        let x = enc.embed_sequence(&mut g, &b, &batch, 0).unwrap();
        let y = enc.encoder_block(&mut g, &b, 0, 0, &x, 1).unwrap();
        for st in Stream::ALL {
            assert_eq!(g.value(x[st.slot()].unwrap()), g.value(y[st.slot()].unwrap()));
        }
    }

    #[test]
    fn trunk_is_block_composition() {
        let enc = small(StreamSet::all(), false);
        let s = state();
        let batch = [input(&s)];
        let mut g = Graph::new();
        let b = enc.store.bind_frozen(&mut g);
        let x = enc.embed_sequence(&mut g, &b, &batch, 0).unwrap();
        let y = enc.encoder_block(&mut g, &b, 0, 0, &x, 1).unwrap();
        let z = enc.encoder_block(&mut g, &b, 0, 1, &y, 1).unwrap();
        let full = enc.run_trunk(&mut g, &b, &batch, 0).unwrap();
        let t = &enc.trunks[0];
        for st in Stream::ALL {
            let zn = g.layer_norm(z[st.slot()].unwrap(), b[t.final_g], b[t.final_b]).unwrap();
            assert_eq!(g.value(zn), g.value(full[st.slot()].unwrap()));
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let enc = small(StreamSet::all(), false);
        let s = state();
        let mut g = Graph::new();
        let b = enc.store.bind_frozen(&mut g);
        enc.run_trunk(&mut g, &b, &[input(&s)], 0).unwrap();
        let mut seen = 0;
        for i in 0..g.len() {
            if let Some(p) = g.attention_probs(crate::graph::Var::from_index(i)) {
                assert!(p.iter().all(|x| *x >= 0.0));
                seen += 1;
            }
        }
        assert_eq!(seen, 10);
    }

    #[test]
    fn causal_perturbation_leaves_earlier_slots_bitwise() {
        for (streams, sep) in [(StreamSet::all(), false), (StreamSet::all(), true)] {
            let enc = small(streams, sep);
            let s = state();
            let base = input(&s);
            let l0 = enc.predict(&[base]).unwrap();
            for k in 0..HORIZON - 1 {
                let mut p = base;
                for j in k + 1..HORIZON {
                    p.actions[j] = Token(11);
                    p.rtg[j] = 9.0;
                }
                let l1 = enc.predict(&[p]).unwrap();
                for n in 0..=k {
                    assert_eq!(l0.row(n), l1.row(n), "slot {n} after perturbing > {k}");
                }
                assert_ne!(l0.row(k + 1), l1.row(k + 1));
            }
        }
    }

    #[test]
    fn head_sets_follow_streams() {
        let full = small(StreamSet::all(), false);
        assert!(full.has_modal_heads());
        assert_eq!(full.num_trunks(), 1);
        assert_eq!(small(StreamSet::all(), true).num_trunks(), 3);
        let plain = small(
            StreamSet {
                rtg: false,
                image: false,
                ocr: false,
            },
            true,
        );
        assert!(!plain.has_modal_heads());
        assert_eq!(plain.num_trunks(), 1);
        let s = state();
        let mut i = input(&s);
        i.state = None;
        assert_eq!(plain.predict(&[i]).unwrap().shape(), &[HORIZON, 12]);
        let fig_params = full.store.iter().filter(|p| p.branch == Branch::Fig).count();
        assert!(fig_params > 0);
        assert!(full
            .store
            .iter()
            .filter(|p| p.branch == Branch::Fig)
            .all(|p| p.name.contains("image") || p.name.contains("fig")));
    }

    #[test]
    fn deterministic_logits() {
        let a = small(StreamSet::all(), false);
        let b = small(StreamSet::all(), false);
        let s = state();
        assert_eq!(a.predict(&[input(&s)]).unwrap(), b.predict(&[input(&s)]).unwrap());
    }
}
