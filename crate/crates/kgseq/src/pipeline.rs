//! The end-to-end stages: fusion pretraining, path mining, trajectory
//! building, training and evaluation.

use std::collections::{BTreeMap, BTreeSet};

use kgseq_core::encoder::Encoder;
use kgseq_core::eval::{rank_tails, MetricsReport, QueryResult};
use kgseq_core::fusion::{structure_profiles, FusedTable, FusionModel};
use kgseq_core::kg::{augment_inverse, Dataset, EntityId, FeatureRegistry, RelationId, Triple};
use kgseq_core::paths::{supervision_path, KgGraph, PaddedPath};
use kgseq_core::tensor::Tensor;
use kgseq_core::train::{EpochLog, Trainer};
use kgseq_core::trajectory::{build_trajectory, Trajectory};
use log::info;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// A dataset with its feature registry.
#[derive(Clone, Debug)]
pub struct Data {
    pub dataset: Dataset,
    pub registry: FeatureRegistry,
}

impl Data {
    pub fn from_texts(train: &str, valid: &str, test: &str, features: &str, width: usize) -> Result<Self> {
        let dataset = Dataset::from_texts(train, valid, test)?;
        let registry = FeatureRegistry::parse(features, &dataset.vocab, width)?;
        Ok(Self { dataset, registry })
    }

    /// Training triples plus their inverses, optionally truncated to the
    /// first `limit` forward triples.
    pub fn training_triples(&self, limit: usize) -> Result<Vec<Triple>> {
        let mut set = self.dataset.train.clone();
        if limit > 0 {
            set.triples.truncate(limit);
        }
        Ok(augment_inverse(&set, &self.dataset.vocab)?.triples)
    }

    pub fn profiles(&self) -> Tensor {
        structure_profiles(&self.dataset.vocab, &self.dataset.train.triples)
    }

    pub fn graph(&self) -> Result<KgGraph> {
        Ok(KgGraph::new(self.dataset.vocab.num_entities(), &self.training_triples(0)?))
    }
}

pub fn pretrain(data: &Data, cfg: &RunConfig) -> Result<(FusionModel, Vec<f64>)> {
    let profiles = data.profiles();
    let mut model = FusionModel::init(cfg.fusion(), profiles.cols())?;
    let curve = model.pretrain(&data.registry, &profiles)?;
    if let (Some(a), Some(b)) = (curve.first(), curve.last()) {
        info!("fusion reconstruction {a:.5} -> {b:.5} over {} epochs", curve.len());
    }
    Ok((model, curve))
}

pub fn fused_table(data: &Data, model: &FusionModel) -> Result<FusedTable> {
    Ok(model.fused_table(&data.registry, &data.profiles())?)
}

/// Supervision path for every training query (inverses included), mined
/// over the full training graph.
pub fn mine(data: &Data, cfg: &RunConfig) -> Result<Vec<(Triple, PaddedPath)>> {
    if cfg.max_hops != kgseq_core::paths::MAX_HOPS {
        return Err(Error::Config(format!(
            "max_hops is fixed at {} by the sequence horizon",
            kgseq_core::paths::MAX_HOPS
        )));
    }
    let graph = data.graph()?;
    let vocab = &data.dataset.vocab;
    let queries = data.training_triples(cfg.train_limit)?;
    let paths: Vec<PaddedPath> = queries
        .par_iter()
        .map(|&t| supervision_path(&graph, vocab, t))
        .collect::<Result<_, _>>()?;
    let corrective = paths.iter().filter(|p| p.corrective).count();
    info!("mined {} supervision paths, {corrective} corrective", paths.len());
    Ok(queries.into_iter().zip(paths).collect())
}

pub fn build_trajectories(
    data: &Data,
    paths: &[(Triple, PaddedPath)],
    table: Option<&FusedTable>,
    cfg: &RunConfig,
) -> Result<Vec<Trajectory>> {
    let reward = cfg.reward()?;
    let vocab = &data.dataset.vocab;
    paths
        .iter()
        .map(|(t, p)| {
            let state = match table {
                Some(table) => Some(table.fuse_query(vocab, t.head, t.relation)?.0),
                None => None,
            };
            Ok(build_trajectory(vocab, *t, p, state, &data.registry, &reward)?)
        })
        .collect()
}

/// Trains a fresh encoder for `cfg.epochs`, calling `on_epoch` after each
/// epoch. Returning `false` from the callback stops early.
pub fn train(
    vocab_size: usize,
    trajs: &[Trajectory],
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Encoder) -> Result<bool>,
) -> Result<Encoder> {
    let encoder = Encoder::new(cfg.encoder(vocab_size)?)?;
    let mut trainer = Trainer::new(encoder, cfg.train()?)?;
    for _ in 0..cfg.epochs {
        let log = trainer.train_epoch(trajs)?;
        if !on_epoch(&log, &trainer.encoder)? {
            break;
        }
    }
    Ok(trainer.encoder)
}

/// Everything needed to answer queries.
pub struct Model {
    pub encoder: Encoder,
    pub table: Option<FusedTable>,
    /// Image features used to replay returns when re-scoring paths.
    pub images: FeatureRegistry,
}

impl Model {
    pub fn rank(&self, data_vocab: &kgseq_core::kg::Vocabulary, head: EntityId, relation: RelationId, cfg: &RunConfig) -> Result<Vec<kgseq_core::eval::Candidate>> {
        let state = match &self.table {
            Some(t) => Some(t.fuse_query(data_vocab, head, relation)?.0),
            None => None,
        };
        Ok(rank_tails(&self.encoder, data_vocab, &self.images, head, relation, state.as_ref(), &cfg.decode()?)?)
    }
}

/// Ranks the tail of every query in parallel. With `filtered`, other known
/// tails of the same `(h, r)` are skipped when ranking.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    queries: &[Triple],
    cfg: &RunConfig,
) -> Result<MetricsReport> {
    let known: BTreeMap<(EntityId, RelationId), BTreeSet<EntityId>> = if cfg.filtered {
        dataset.known_tails()
    } else {
        BTreeMap::new()
    };
    let n = dataset.vocab.num_entities();
    let results: Vec<QueryResult> = queries
        .par_iter()
        .map(|&q| {
            let ranked = model.rank(&dataset.vocab, q.head, q.relation, cfg)?;
            Ok(QueryResult::from_ranking(q, &ranked, n, known.get(&(q.head, q.relation))))
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport::new(results, n)?)
}
