//! Bounded multi-hop path search that turns a training triple into an
//! action sequence, plus the fallback action set for unreachable tails.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId, Token, Triple, Vocabulary};

/// Number of action slots in every padded trajectory.
pub const HORIZON: usize = 7;
pub const MAX_HOPS: usize = 3;

/// Adjacency lists over (possibly inverse-augmented) training triples.
#[derive(Clone, Debug, Default)]
pub struct KgGraph {
    adjacency: Vec<Vec<(RelationId, EntityId)>>,
}

impl KgGraph {
    pub fn new(num_entities: usize, triples: &[Triple]) -> Self {
        let mut adjacency = vec![Vec::new(); num_entities];
        for t in triples {
            adjacency[t.head.0 as usize].push((t.relation, t.tail));
        }
        for edges in &mut adjacency {
            edges.sort();
            edges.dedup();
        }
        Self { adjacency }
    }

    pub fn num_entities(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edges(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        self.adjacency.get(e.0 as usize).map_or(&[], |v| v.as_slice())
    }

    pub fn has_edge(&self, h: EntityId, r: RelationId, t: EntityId) -> bool {
        self.edges(h).binary_search(&(r, t)).is_ok()
    }
}

/// An unpadded relation/entity walk from a head entity.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Path {
    pub steps: Vec<(RelationId, EntityId)>,
}

impl Path {
    pub fn hops(&self) -> usize {
        self.steps.len()
    }

    pub fn tokens(&self, vocab: &Vocabulary) -> Vec<Token> {
        self.steps
            .iter()
            .flat_map(|&(r, e)| [vocab.relation_token(r), vocab.entity_token(e)])
            .collect()
    }

    pub fn last_entity(&self) -> Option<EntityId> {
        self.steps.last().map(|s| s.1)
    }

    /// True when every hop is an edge of `graph` starting from `head`.
    pub fn replays(&self, graph: &KgGraph, head: EntityId) -> bool {
        let mut cur = head;
        for &(r, e) in &self.steps {
            if !graph.has_edge(cur, r, e) {
                return false;
            }
            cur = e;
        }
        true
    }
}

/// Seven action slots; `corrective` marks the fallback layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PaddedPath {
    pub slots: [Token; HORIZON],
    pub corrective: bool,
}

/// All simple paths from `query.head` to `query.tail` with at most
/// `max_hops` hops, never using the query edge or its inverse. Sorted by hop
/// count, then by token sequence.
pub fn mine_paths(graph: &KgGraph, vocab: &Vocabulary, query: Triple, max_hops: usize) -> Vec<Path> {
    let inv = vocab.inverse(query.relation);
    let banned = |a: EntityId, r: RelationId, b: EntityId| {
        (a, r, b) == (query.head, query.relation, query.tail)
            || (a, r, b) == (query.tail, inv, query.head)
    };
    let mut found = Vec::new();
    let mut stack: Vec<(RelationId, EntityId)> = Vec::with_capacity(max_hops);
    let mut visited = vec![query.head];
    fn walk(
        graph: &KgGraph,
        target: EntityId,
        max_hops: usize,
        banned: &dyn Fn(EntityId, RelationId, EntityId) -> bool,
        cur: EntityId,
        stack: &mut Vec<(RelationId, EntityId)>,
        visited: &mut Vec<EntityId>,
        found: &mut Vec<Path>,
    ) {
        if stack.len() == max_hops {
            return;
        }
        for &(r, e) in graph.edges(cur) {
            if visited.contains(&e) || banned(cur, r, e) {
                continue;
            }
            stack.push((r, e));
            if e == target {
                found.push(Path { steps: stack.clone() });
            } else {
                visited.push(e);
                walk(graph, target, max_hops, banned, e, stack, visited, found);
                visited.pop();
            }
            stack.pop();
        }
    }
    walk(
        graph,
        query.tail,
        max_hops,
        &banned,
        query.head,
        &mut stack,
        &mut visited,
        &mut found,
    );
    found.sort_by(|a, b| a.hops().cmp(&b.hops()).then_with(|| a.cmp(b)));
    found
}

/// `(PAD, NULL, t, PAD, PAD, PAD, PAD)`; only slot 3 is supervised.
pub fn corrective_path(vocab: &Vocabulary, tail: EntityId) -> PaddedPath {
    let mut slots = [Token::PAD; HORIZON];
    slots[1] = Token::NULL;
    slots[2] = vocab.entity_token(tail);
    PaddedPath {
        slots,
        corrective: true,
    }
}

/// Path tokens, then EOS, then PAD up to seven slots.
pub fn pad_path(vocab: &Vocabulary, path: &Path) -> Result<PaddedPath> {
    let tokens = path.tokens(vocab);
    if tokens.len() + 1 > HORIZON {
        return Err(Error::Contract(alloc::format!(
            "path of {} hops does not fit {HORIZON} action slots",
            path.hops()
        )));
    }
    let mut slots = [Token::PAD; HORIZON];
    slots[..tokens.len()].copy_from_slice(&tokens);
    slots[tokens.len()] = Token::EOS;
    Ok(PaddedPath {
        slots,
        corrective: false,
    })
}

/// Shortest mined path for a triple, or the corrective set when none exists.
pub fn supervision_path(graph: &KgGraph, vocab: &Vocabulary, triple: Triple) -> Result<PaddedPath> {
    match mine_paths(graph, vocab, triple, MAX_HOPS).first() {
        Some(p) => pad_path(vocab, p),
        None => Ok(corrective_path(vocab, triple.tail)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{augment_inverse, ingest_triples, TripleSet};
    use alloc::collections::BTreeSet;
    use proptest::prelude::*;

    fn graph_of(text: &str) -> (Vec<Triple>, Vocabulary, KgGraph) {
        let (triples, vocab) = ingest_triples(text).unwrap();
        let aug = augment_inverse(&TripleSet::new(triples.clone()), &vocab).unwrap();
        let g = KgGraph::new(vocab.num_entities(), &aug.triples);
        (triples, vocab, g)
    }

    fn q(v: &Vocabulary, h: &str, r: &str, t: &str) -> Triple {
        Triple::new(v.entity(h).unwrap(), v.relation(r).unwrap(), v.entity(t).unwrap())
    }

    // Breadth-first enumeration of walks without the banned edges, filtered
    // to simple ones afterwards.
    fn bfs_oracle(g: &KgGraph, v: &Vocabulary, query: Triple, max_hops: usize) -> BTreeSet<Path> {
        let inv = v.inverse(query.relation);
        let mut frontier = vec![(query.head, Vec::new())];
        let mut out = BTreeSet::new();
        for _ in 0..max_hops {
            let mut next = Vec::new();
            for (cur, steps) in frontier {
                for &(r, e) in g.edges(cur) {
                    if (cur, r, e) == (query.head, query.relation, query.tail)
                        || (cur, r, e) == (query.tail, inv, query.head)
                    {
                        continue;
                    }
                    let mut s: Vec<(RelationId, EntityId)> = steps.clone();
                    s.push((r, e));
                    let mut ents: Vec<EntityId> = s.iter().map(|x| x.1).collect();
                    ents.push(query.head);
                    let n = ents.len();
                    ents.sort();
                    ents.dedup();
                    if ents.len() != n {
                        continue;
                    }
                    if e == query.tail {
                        out.insert(Path { steps: s });
                    } else {
                        next.push((e, s));
                    }
                }
            }
            frontier = next;
        }
        out
    }

    #[test]
    fn two_hop_path_is_found() {
        let (_, v, g) = graph_of("A\tr1\tB\nB\tr2\tT\nA\tr\tT\n");
        let paths = mine_paths(&g, &v, q(&v, "A", "r", "T"), 3);
        let expect = Path {
            steps: vec![
                (v.relation("r1").unwrap(), v.entity("B").unwrap()),
                (v.relation("r2").unwrap(), v.entity("T").unwrap()),
            ],
        };
        assert_eq!(paths, vec![expect]);
        let padded = supervision_path(&g, &v, q(&v, "A", "r", "T")).unwrap();
        assert_eq!(
            padded.slots.map(|t| v.token_name(t)),
            ["r1", "B", "r2", "T", "<eos>", "<pad>", "<pad>"]
        );
    }

    #[test]
    fn parallel_edge_is_one_hop() {
        let (_, v, g) = graph_of("A\tr\tT\nA\ts\tT\n");
        let paths = mine_paths(&g, &v, q(&v, "A", "r", "T"), 3);
        assert_eq!(paths[0].hops(), 1);
        assert_eq!(paths[0].steps[0].0, v.relation("s").unwrap());
        let padded = pad_path(&v, &paths[0]).unwrap();
        assert_eq!(
            padded.slots.map(|t| v.token_name(t)),
            ["s", "T", "<eos>", "<pad>", "<pad>", "<pad>", "<pad>"]
        );
    }

    #[test]
    fn query_edge_and_inverse_are_excluded() {
        let (_, v, g) = graph_of("A\tr\tT\nC\ts\tD\n");
        assert!(mine_paths(&g, &v, q(&v, "A", "r", "T"), 3).is_empty());
        let padded = supervision_path(&g, &v, q(&v, "A", "r", "T")).unwrap();
        assert!(padded.corrective);
        assert_eq!(padded, corrective_path(&v, v.entity("T").unwrap()));
    }

    #[test]
    fn disconnected_is_empty() {
        let (_, v, g) = graph_of("A\tr\tB\nC\ts\tD\n");
        assert!(mine_paths(&g, &v, q(&v, "A", "r", "D"), 3).is_empty());
    }

    #[test]
    fn corrective_layout() {
        let (_, v, _) = graph_of("A\tr\tT\n");
        let c = corrective_path(&v, v.entity("T").unwrap());
        assert_eq!(
            c.slots.map(|t| v.token_name(t)),
            ["<pad>", "<null>", "T", "<pad>", "<pad>", "<pad>", "<pad>"]
        );
        assert!(c.corrective);
    }

    #[test]
    fn three_hops_fill_six_slots() {
        let (_, v, g) = graph_of("A\ta\tB\nB\tb\tC\nC\tc\tT\nA\tr\tT\n");
        let p = supervision_path(&g, &v, q(&v, "A", "r", "T")).unwrap();
        assert_eq!(p.slots[6], Token::EOS);
        assert!(p.slots[..6].iter().all(|t| t.0 >= 5));
    }

    #[test]
    fn four_hops_do_not_fit() {
        let (_, v, _) = graph_of("A\ta\tB\n");
        let (a, b) = (v.relation("a").unwrap(), v.entity("B").unwrap());
        let p = Path { steps: vec![(a, b); 4] };
        assert!(matches!(pad_path(&v, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn corrective_count_matches_disconnected_queries() {
        let text = "A\tr\tB\nB\tr\tC\nC\ts\tD\nE\ts\tF\nF\tr\tG\nH\tt\tI\nA\tt\tC\n";
        let (triples, v, g) = graph_of(text);
        let corrective = triples
            .iter()
            .filter(|t| supervision_path(&g, &v, **t).unwrap().corrective)
            .count();
        let oracle = triples
            .iter()
            .filter(|t| bfs_oracle(&g, &v, **t, 3).is_empty())
            .count();
        assert_eq!(corrective, oracle);
        assert!(oracle > 0);
    }

    fn random_kg() -> impl Strategy<Value = Vec<(u8, u8, u8)>> {
        prop::collection::vec((0u8..8, 0u8..3, 0u8..8), 1..25)
    }

    fn to_text(edges: &[(u8, u8, u8)]) -> alloc::string::String {
        edges
            .iter()
            .map(|(h, r, t)| alloc::format!("e{h}\tr{r}\te{t}\n"))
            .collect()
    }

    proptest! {
        #[test]
        fn mined_paths_match_bfs_and_replay(edges in random_kg()) {
            let (triples, v, g) = graph_of(&to_text(&edges));
            for t in &triples {
                let mined = mine_paths(&g, &v, *t, 3);
                let oracle = bfs_oracle(&g, &v, *t, 3);
                prop_assert_eq!(mined.len(), oracle.len());
                prop_assert_eq!(mined.iter().cloned().collect::<BTreeSet<_>>(), oracle);
                for w in mined.windows(2) {
                    prop_assert!((w[0].hops(), &w[0]) <= (w[1].hops(), &w[1]));
                }
                for p in &mined {
                    prop_assert!(p.replays(&g, t.head));
                    prop_assert_eq!(p.last_entity(), Some(t.tail));
                }
                prop_assert_eq!(&mined, &mine_paths(&g, &v, *t, 3));
                let padded = supervision_path(&g, &v, *t).unwrap();
                prop_assert_eq!(padded.slots.len(), HORIZON);
                if !padded.corrective {
                    let toks: Vec<Token> = padded.slots.iter().copied()
                        .take_while(|x| *x != Token::EOS).collect();
                    for (i, tok) in toks.iter().enumerate() {
                        if i % 2 == 0 {
                            prop_assert!(v.is_relation(*tok));
                        } else {
                            prop_assert!(v.is_entity(*tok));
                        }
                    }
                    prop_assert_eq!(*toks.last().unwrap(), v.entity_token(t.tail));
                }
            }
        }
    }
}
