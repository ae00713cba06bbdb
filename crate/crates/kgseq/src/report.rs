//! Metrics report rendering: a fixed-width table and JSON lines.

use std::fmt::Write as _;

use kgseq_core::eval::{explain, MetricsReport};
use kgseq_core::kg::Vocabulary;
use serde::Serialize;

#[derive(Serialize)]
struct Ranked<'a> {
    entity: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct QueryRecord<'a> {
    head: &'a str,
    relation: &'a str,
    tail: &'a str,
    rank: usize,
    top: Vec<Ranked<'a>>,
    path: Option<String>,
    direct: bool,
    collapsed: bool,
}

#[derive(Serialize)]
struct Summary {
    queries: usize,
    mrr: f64,
    hits1: f64,
    hits3: f64,
    hits10: f64,
    absent_rank: usize,
}

/// Aggregates to five decimals, then one row per query.
pub fn table(report: &MetricsReport, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>8}  {:>7}  {:>7}  {:>7}  {:>7}", "queries", "MRR", "Hits@1", "Hits@3", "Hits@10");
    let _ = writeln!(
        out,
        "{:>8}  {:.5}  {:.5}  {:.5}  {:.5}",
        report.queries.len(),
        report.mrr,
        report.hits1,
        report.hits3,
        report.hits10
    );
    let _ = writeln!(out, "tails never reached are ranked {}", report.absent_rank);
    let _ = writeln!(out);
    for q in &report.queries {
        let best = q.top.first().map_or("-", |(e, _)| vocab.entity_name(*e));
        let _ = writeln!(
            out,
            "{}\t{}\t{}\trank {}\ttop {}",
            vocab.entity_name(q.query.head),
            vocab.relation_name(q.query.relation),
            vocab.entity_name(q.query.tail),
            q.rank,
            best
        );
    }
    out
}

/// One JSON object per query followed by a summary object.
pub fn jsonl(report: &MetricsReport, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for q in &report.queries {
        let rec = QueryRecord {
            head: vocab.entity_name(q.query.head),
            relation: vocab.relation_name(q.query.relation),
            tail: vocab.entity_name(q.query.tail),
            rank: q.rank,
            top: q
                .top
                .iter()
                .map(|&(e, score)| Ranked {
                    entity: vocab.entity_name(e),
                    score,
                })
                .collect(),
            path: q.path.as_ref().map(|p| explain(vocab, q.query.head, p)),
            direct: q.path.as_ref().is_some_and(|p| p.direct),
            collapsed: q.path.as_ref().is_some_and(|p| p.collapsed),
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain data serializes"));
        out.push('\n');
    }
    let summary = Summary {
        queries: report.queries.len(),
        mrr: report.mrr,
        hits1: report.hits1,
        hits3: report.hits3,
        hits10: report.hits10,
        absent_rank: report.absent_rank,
    };
    out.push_str(&serde_json::to_string(&summary).expect("plain data serializes"));
    out.push('\n');
    out
}
