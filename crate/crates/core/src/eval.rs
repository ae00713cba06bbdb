//! Tail ranking by typed beam search, rank metrics, and path explanations.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::{Encoder, EncoderInput};
use crate::error::{Error, Result};
use crate::fusion::FusedState;
use crate::kg::{EntityId, FeatureRegistry, RelationId, Token, TokenKind, Triple, Vocabulary};
use crate::paths::{PaddedPath, HORIZON};
use crate::tensor::Tensor;
use crate::trajectory::{rollout_rtg, Expected, RewardConfig, RtgState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub k_beam: usize,
    /// Restrict each slot to the token kind its position expects.
    pub alternation_filter: bool,
    pub reward: RewardConfig,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            k_beam: 64,
            alternation_filter: true,
            reward: RewardConfig::default(),
        }
    }
}

/// A decoded action sequence with the probability of each chosen token.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedPath {
    pub tokens: Vec<Token>,
    pub probs: Vec<f64>,
    /// Answer read straight from the corrective answer slot.
    pub direct: bool,
    /// No EOS within the horizon; the tail is the last entity emitted.
    pub collapsed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub tail: EntityId,
    /// Best length-normalised log-probability over paths reaching `tail`.
    pub score: f64,
    pub path: DecodedPath,
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<Token>,
    probs: Vec<f64>,
    logp: f64,
    rtg: Vec<f64>,
    state: RtgState,
}

fn allowed(vocab: &Vocabulary, slot: usize, filter: bool) -> Vec<Token> {
    let all = (0..vocab.size() as u32).map(Token);
    if !filter {
        return all.collect();
    }
    let want = Expected::at(slot, false);
    all.filter(|t| want.admits(vocab.kind(*t))).collect()
}

/// Log-probabilities of `tokens` under the softmax of `row`, renormalised
/// over `tokens` when `restrict` is set.
fn log_probs(row: &[f64], tokens: &[Token], restrict: bool) -> Vec<f64> {
    let pool: Vec<f64> = if restrict {
        tokens.iter().map(|t| row[t.index()]).collect()
    } else {
        row.to_vec()
    };
    let m = pool.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = m + libm::log(pool.iter().map(|x| libm::exp(x - m)).sum::<f64>());
    tokens.iter().map(|t| row[t.index()] - lz).collect()
}

fn last_entity(vocab: &Vocabulary, tokens: &[Token]) -> Option<EntityId> {
    tokens.iter().rev().find_map(|t| match vocab.kind(*t) {
        TokenKind::Entity(e) => Some(e),
        _ => None,
    })
}

fn consider(best: &mut BTreeMap<EntityId, Candidate>, c: Candidate) {
    match best.get(&c.tail) {
        Some(old) if old.score >= c.score => {}
        _ => {
            best.insert(c.tail, c);
        }
    }
}

/// Scores every reachable tail for `(head, relation)`, best first; equal
/// scores are ordered by ascending token id. When the encoder reads returns,
/// finished paths are re-scored against their own tail using `registry`.
pub fn rank_tails(
    encoder: &Encoder,
    vocab: &Vocabulary,
    registry: &FeatureRegistry,
    head: EntityId,
    relation: RelationId,
    state: Option<&FusedState>,
    cfg: &DecodeConfig,
) -> Result<Vec<Candidate>> {
    if cfg.k_beam == 0 {
        return Err(Error::Config("beam width must be positive".into()));
    }
    if head.0 as usize >= vocab.num_entities() {
        return Err(Error::Lookup {
            kind: "entity id",
            name: format!("{}", head.0),
        });
    }
    if relation.0 as usize >= vocab.num_relations() {
        return Err(Error::Lookup {
            kind: "relation id",
            name: format!("{}", relation.0),
        });
    }
    let no_features = FeatureRegistry::new(0, 0);
    let rtg1 = cfg.reward.r_good;
    let (head_tok, rel_tok) = (vocab.entity_token(head), vocab.relation_token(relation));
    let input = |tokens: &[Token], rtg: &[f64]| {
        let mut actions = [Token::PAD; HORIZON];
        actions[0] = Token::BOS;
        for (j, t) in tokens.iter().enumerate().take(HORIZON - 1) {
            actions[j + 1] = *t;
        }
        let mut r = [*rtg.last().unwrap_or(&rtg1); HORIZON];
        r[..rtg.len()].copy_from_slice(rtg);
        EncoderInput {
            rtg: r,
            head: head_tok,
            relation: rel_tok,
            state,
            actions,
        }
    };
    let mut best: BTreeMap<EntityId, Candidate> = BTreeMap::new();

    // Corrective-style route: (BOS, PAD, NULL) → answer slot.
    let entities: Vec<Token> = vocab.entity_tokens().collect();
    {
        let prefix = [Token::PAD, Token::NULL];
        let mut st = RtgState::start(rtg1, true);
        let mut rtg = vec![st.rtg];
        for (i, &t) in prefix.iter().enumerate() {
            st = st.advance(vocab, i, t, None, &no_features, &cfg.reward);
            rtg.push(st.rtg);
        }
        let logits = encoder.predict(&[input(&prefix, &rtg)])?;
        let lp = log_probs(logits.row(2), &entities, cfg.alternation_filter);
        for (t, l) in entities.iter().zip(lp) {
            let TokenKind::Entity(e) = vocab.kind(*t) else { continue };
            consider(
                &mut best,
                Candidate {
                    tail: e,
                    score: l,
                    path: DecodedPath {
                        tokens: vec![*t],
                        probs: vec![libm::exp(l)],
                        direct: true,
                        collapsed: false,
                    },
                },
            );
        }
    }

    let mut finished: Vec<(f64, DecodedPath)> = Vec::new();
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        probs: Vec::new(),
        logp: 0.0,
        rtg: vec![rtg1],
        state: RtgState::start(rtg1, false),
    }];
    for slot in 0..HORIZON {
        if live.is_empty() {
            break;
        }
        let inputs: Vec<EncoderInput> = live.iter().map(|h| input(&h.tokens, &h.rtg)).collect();
        let logits: Tensor = encoder.predict(&inputs)?;
        let choices = allowed(vocab, slot, cfg.alternation_filter);
        let mut next: Vec<Hyp> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let lp = log_probs(logits.row(hi * HORIZON + slot), &choices, cfg.alternation_filter);
            for (&t, l) in choices.iter().zip(lp) {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                let mut probs = h.probs.clone();
                probs.push(libm::exp(l));
                let logp = h.logp + l;
                if t == Token::EOS {
                    if last_entity(vocab, &h.tokens).is_some() {
                        let score = logp / tokens.len() as f64;
                        finished.push((
                            score,
                            DecodedPath {
                                tokens,
                                probs,
                                direct: false,
                                collapsed: false,
                            },
                        ));
                    }
                    continue;
                }
                let state = h.state.advance(vocab, slot, t, None, &no_features, &cfg.reward);
                let mut rtg = h.rtg.clone();
                rtg.push(state.rtg);
                next.push(Hyp {
                    tokens,
                    probs,
                    logp,
                    rtg,
                    state,
                });
            }
        }
        next.sort_by(|a, b| b.logp.total_cmp(&a.logp).then_with(|| a.tokens.cmp(&b.tokens)));
        next.truncate(cfg.k_beam);
        live = next;
    }
    // Sequences that never emitted EOS.
    for h in live {
        if last_entity(vocab, &h.tokens).is_some() {
            let score = h.logp / h.tokens.len() as f64;
            finished.push((
                score,
                DecodedPath {
                    tokens: h.tokens,
                    probs: h.probs,
                    direct: false,
                    collapsed: true,
                },
            ));
        }
    }
    if encoder.config.streams.rtg {
        finished = rescore(encoder, vocab, registry, head_tok, rel_tok, state, cfg, finished)?;
    }
    for (score, path) in finished {
        let tail = last_entity(vocab, &path.tokens).expect("finished paths end on an entity");
        consider(&mut best, Candidate { tail, score, path });
    }
    let mut out: Vec<Candidate> = best.into_values().collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tail.cmp(&b.tail)));
    Ok(out)
}

/// Re-scores finished paths with the return-to-go they would have carried
/// in training, taking each path's own last entity as the target. During
/// the search the target is unknown and every similarity reads as 0.5.
#[allow(clippy::too_many_arguments)]
fn rescore(
    encoder: &Encoder,
    vocab: &Vocabulary,
    registry: &FeatureRegistry,
    head: Token,
    relation: Token,
    state: Option<&FusedState>,
    cfg: &DecodeConfig,
    paths: Vec<(f64, DecodedPath)>,
) -> Result<Vec<(f64, DecodedPath)>> {
    let choices: Vec<Vec<Token>> = (0..HORIZON).map(|s| allowed(vocab, s, cfg.alternation_filter)).collect();
    let mut out = Vec::with_capacity(paths.len());
    for chunk in paths.chunks(RESCORE_CHUNK) {
        let inputs: Vec<EncoderInput> = chunk
            .iter()
            .map(|(_, p)| {
                let mut slots = [Token::PAD; HORIZON];
                slots[..p.tokens.len()].copy_from_slice(&p.tokens);
                let target = last_entity(vocab, &p.tokens);
                let padded = PaddedPath { slots, corrective: false };
                let mut actions = [Token::PAD; HORIZON];
                actions[0] = Token::BOS;
                actions[1..].copy_from_slice(&slots[..HORIZON - 1]);
                EncoderInput {
                    rtg: rollout_rtg(vocab, &padded, target, registry, &cfg.reward),
                    head,
                    relation,
                    state,
                    actions,
                }
            })
            .collect();
        let logits = encoder.predict(&inputs)?;
        for (i, (_, p)) in chunk.iter().enumerate() {
            let mut probs = Vec::with_capacity(p.tokens.len());
            let mut logp = 0.0;
            for (slot, &t) in p.tokens.iter().enumerate() {
                let lp = log_probs(logits.row(i * HORIZON + slot), &choices[slot], cfg.alternation_filter);
                let l = choices[slot]
                    .iter()
                    .position(|c| *c == t)
                    .map_or(f64::NEG_INFINITY, |j| lp[j]);
                logp += l;
                probs.push(libm::exp(l));
            }
            out.push((logp / p.tokens.len() as f64, DecodedPath { probs, ..p.clone() }));
        }
    }
    Ok(out)
}

const RESCORE_CHUNK: usize = 64;

/// 1-based rank of `target`; `|entities| + 1` when it was never scored.
/// Tails in `filter` other than the target are skipped.
pub fn rank_of(
    ranked: &[Candidate],
    target: EntityId,
    num_entities: usize,
    filter: Option<&BTreeSet<EntityId>>,
) -> usize {
    let mut rank = 0;
    for c in ranked {
        if c.tail != target && filter.is_some_and(|f| f.contains(&c.tail)) {
            continue;
        }
        rank += 1;
        if c.tail == target {
            return rank;
        }
    }
    num_entities + 1
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("mean reciprocal rank of no queries".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks start at 1".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn hits_at_n(ranks: &[usize], n: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64
}

/// Outcome of one test query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub query: Triple,
    pub rank: usize,
    /// Up to ten `(tail, score)` pairs, best first.
    pub top: Vec<(EntityId, f64)>,
    /// Best path to the top-ranked tail.
    pub path: Option<DecodedPath>,
}

impl QueryResult {
    pub fn from_ranking(
        query: Triple,
        ranked: &[Candidate],
        num_entities: usize,
        filter: Option<&BTreeSet<EntityId>>,
    ) -> Self {
        Self {
            query,
            rank: rank_of(ranked, query.tail, num_entities, filter),
            top: ranked.iter().take(10).map(|c| (c.tail, c.score)).collect(),
            path: ranked.first().map(|c| c.path.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub queries: Vec<QueryResult>,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    /// Rank assigned when the true tail is never scored.
    pub absent_rank: usize,
}

impl MetricsReport {
    pub fn new(queries: Vec<QueryResult>, num_entities: usize) -> Result<Self> {
        let ranks: Vec<usize> = queries.iter().map(|q| q.rank).collect();
        Ok(Self {
            mrr: mrr(&ranks)?,
            hits1: hits_at_n(&ranks, 1),
            hits3: hits_at_n(&ranks, 3),
            hits10: hits_at_n(&ranks, 10),
            absent_rank: num_entities + 1,
            queries,
        })
    }
}

/// `h —r₁ [p]→ t₁ [p] —r₂ [p]→ … answer [p]`, or `h ⇒ answer [p] [direct]`.
pub fn explain(vocab: &Vocabulary, head: EntityId, path: &DecodedPath) -> String {
    let mut s = String::from(vocab.entity_name(head));
    if path.direct {
        let name = vocab.token_name(path.tokens[0]);
        s.push_str(&format!(" ⇒ {name} [{:.3}] [direct]", path.probs[0]));
        return s;
    }
    for (t, p) in path.tokens.iter().zip(&path.probs) {
        match vocab.kind(*t) {
            TokenKind::Relation(r) => s.push_str(&format!(" —{} [{p:.3}]→", vocab.relation_name(r))),
            TokenKind::Entity(e) => s.push_str(&format!(" {} [{p:.3}]", vocab.entity_name(e))),
            TokenKind::Eos => s.push_str(&format!(" <eos> [{p:.3}]")),
            _ => s.push_str(&format!(" {} [{p:.3}]", vocab.token_name(*t))),
        }
    }
    if path.collapsed {
        s.push_str(" [no-eos]");
    }
    s
}

/// Relation/entity steps of a decoded path, for replay against a graph.
pub fn path_steps(vocab: &Vocabulary, path: &DecodedPath) -> Option<Vec<(RelationId, EntityId)>> {
    if path.direct {
        return None;
    }
    let mut steps = Vec::new();
    let mut pending = None;
    for t in &path.tokens {
        match vocab.kind(*t) {
            TokenKind::Relation(r) => pending = Some(r),
            TokenKind::Entity(e) => steps.push((pending.take()?, e)),
            TokenKind::Eos => break,
            _ => return None,
        }
    }
    Some(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, StreamSet};
    use crate::kg::ingest_triples;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr(&[1]).unwrap(), 1.0);
        assert!((mrr(&[1, 2, 4]).unwrap() - 1.75 / 3.0).abs() < 1e-15);
        assert!(mrr(&[]).is_err());
        assert!(mrr(&[0, 1]).is_err());
    }

    #[test]
    fn hits_examples() {
        assert!((hits_at_n(&[1, 3, 12], 3) - 2.0 / 3.0).abs() < 1e-15);
        for n in [1, 3, 10] {
            assert_eq!(hits_at_n(&[1, 1, 1], n), 1.0);
        }
    }

    proptest! {
        #[test]
        fn metric_oracle(ranks in prop::collection::vec(1usize..60, 1..200)) {
            let mut inv = 0.0;
            let (mut h1, mut h3, mut h10) = (0usize, 0usize, 0usize);
            for &r in &ranks {
                inv += 1.0 / r as f64;
                h1 += usize::from(r <= 1);
                h3 += usize::from(r <= 3);
                h10 += usize::from(r <= 10);
            }
            let n = ranks.len() as f64;
            prop_assert!((mrr(&ranks).unwrap() - inv / n).abs() < 1e-12);
            prop_assert!((hits_at_n(&ranks, 1) - h1 as f64 / n).abs() < 1e-12);
            prop_assert!((hits_at_n(&ranks, 3) - h3 as f64 / n).abs() < 1e-12);
            prop_assert!((hits_at_n(&ranks, 10) - h10 as f64 / n).abs() < 1e-12);
            prop_assert!(hits_at_n(&ranks, 1) <= hits_at_n(&ranks, 3));
            prop_assert!(hits_at_n(&ranks, 3) <= hits_at_n(&ranks, 10));
            prop_assert!(mrr(&ranks).unwrap() >= hits_at_n(&ranks, 1));
        }
    }

    fn cand(e: u32, s: f64) -> Candidate {
        Candidate {
            tail: EntityId(e),
            score: s,
            path: DecodedPath {
                tokens: vec![],
                probs: vec![],
                direct: true,
                collapsed: false,
            },
        }
    }

    #[test]
    fn rank_rules() {
        let r = [cand(3, -0.1), cand(1, -0.5), cand(2, -0.9)];
        assert_eq!(rank_of(&r, EntityId(1), 5, None), 2);
        assert_eq!(rank_of(&r, EntityId(4), 5, None), 6);
        let f: BTreeSet<EntityId> = [EntityId(3), EntityId(1)].into_iter().collect();
        assert_eq!(rank_of(&r, EntityId(1), 5, Some(&f)), 1);
        assert_eq!(rank_of(&r, EntityId(2), 5, Some(&f)), 1);
    }

    fn toy() -> (Vocabulary, Encoder) {
        let (_, v) = ingest_triples("a\tp\tb\nb\tq\tc\n").unwrap();
        let enc = Encoder::new(EncoderConfig {
            d: 8,
            heads: 2,
            layers: 1,
            init_scale: 0.8,
            seed: 5,
            streams: StreamSet {
                rtg: true,
                image: false,
                ocr: false,
            },
            ..EncoderConfig::new(v.size())
        })
        .unwrap();
        (v, enc)
    }

    #[test]
    fn ranking_is_sorted_deterministic_and_covers_entities() {
        let (v, enc) = toy();
        let (h, r) = (v.entity("a").unwrap(), v.relation("p").unwrap());
        let a = rank_tails(&enc, &v, &FeatureRegistry::new(0, 0), h, r, None, &DecodeConfig::default()).unwrap();
        let b = rank_tails(&enc, &v, &FeatureRegistry::new(0, 0), h, r, None, &DecodeConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), v.num_entities());
        for w in a.windows(2) {
            assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].tail < w[1].tail));
        }
        for c in &a {
            assert!(c.score <= 0.0);
            if !c.path.direct {
                assert_eq!(last_entity(&v, &c.path.tokens), Some(c.tail));
                assert_eq!(*c.path.tokens.last().unwrap(), Token::EOS);
            }
        }
    }

    #[test]
    fn explain_formats() {
        let (v, _) = toy();
        let (p, q) = (v.relation("p").unwrap(), v.relation("q").unwrap());
        let (b, c) = (v.entity("b").unwrap(), v.entity("c").unwrap());
        let one = DecodedPath {
            tokens: vec![v.relation_token(p), v.entity_token(b), Token::EOS],
            probs: vec![0.9, 0.8, 0.7],
            direct: false,
            collapsed: false,
        };
        let s = explain(&v, v.entity("a").unwrap(), &one);
        assert_eq!(s.matches('→').count(), 1);
        assert_eq!(s, "a —p [0.900]→ b [0.800] <eos> [0.700]");
        let two = DecodedPath {
            tokens: vec![v.relation_token(p), v.entity_token(b), v.relation_token(q), v.entity_token(c), Token::EOS],
            probs: vec![0.5; 5],
            direct: false,
            collapsed: false,
        };
        assert_eq!(explain(&v, v.entity("a").unwrap(), &two).matches('→').count(), 2);
        assert_eq!(path_steps(&v, &two).unwrap(), vec![(p, b), (q, c)]);
        let direct = DecodedPath {
            tokens: vec![v.entity_token(c)],
            probs: vec![0.4],
            direct: true,
            collapsed: false,
        };
        let s = explain(&v, v.entity("a").unwrap(), &direct);
        assert!(s.contains("[direct]") && !s.contains('→'));
        assert!(path_steps(&v, &direct).is_none());
    }

    #[test]
    fn random_rank_lists_bounded() {
        let mut r = rng::seeded(2);
        for _ in 0..50 {
            let ranks: Vec<usize> = (0..20).map(|_| r.random_range(1..30)).collect();
            let m = mrr(&ranks).unwrap();
            assert!(m > 0.0 && m <= 1.0);
        }
    }
}
