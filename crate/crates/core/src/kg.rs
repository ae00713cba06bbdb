//! Triples, vocabulary, inverse augmentation and the per-entity feature
//! registry.
//!
//! Token ids are laid out as
//! `[PAD, NULL, BOS, EOS, MASK, entities..., relations..., inverse relations...]`
//! with entities and relations each sorted by name, so two vocabularies
//! built from the same name sets are identical.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Suffix appended to a relation name to form its synthesized inverse.
pub const INVERSE_SUFFIX: &str = "_inv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

/// Index into the relation table; forward relations come first, then their
/// inverses in the same order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub u32);

/// Id in the shared token alphabet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token(pub u32);

impl Token {
    pub const PAD: Token = Token(0);
    pub const NULL: Token = Token(1);
    pub const BOS: Token = Token(2);
    pub const EOS: Token = Token(3);
    pub const MASK: Token = Token(4);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub const SPECIAL_TOKENS: u32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Null,
    Bos,
    Eos,
    Mask,
    Entity(EntityId),
    Relation(RelationId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

const SPECIAL_NAMES: [&str; SPECIAL_TOKENS as usize] = ["<pad>", "<null>", "<bos>", "<eos>", "<mask>"];

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Vocabulary {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_index: BTreeMap<String, EntityId>,
    relation_index: BTreeMap<String, RelationId>,
}

impl Vocabulary {
    /// Builds a vocabulary from entity and forward-relation names. Duplicates
    /// are merged; order of the input does not matter.
    pub fn build<'a>(
        entities: impl IntoIterator<Item = &'a str>,
        relations: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let entities: Vec<String> = entities
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(String::from)
            .collect();
        let forward: Vec<String> = relations
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(String::from)
            .collect();
        let mut relations = forward.clone();
        relations.extend(forward.iter().map(|r| format!("{r}{INVERSE_SUFFIX}")));
        let entity_index = entities
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), EntityId(i as u32)))
            .collect();
        let mut relation_index = BTreeMap::new();
        for (i, n) in relations.iter().enumerate() {
            if relation_index.insert(n.clone(), RelationId(i as u32)).is_some() {
                return Err(Error::Config(format!(
                    "relation `{n}` collides with a synthesized inverse name"
                )));
            }
        }
        Ok(Self {
            entities,
            relations,
            entity_index,
            relation_index,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Forward plus inverse relations.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_forward_relations(&self) -> usize {
        self.relations.len() / 2
    }

    /// Size of the token alphabet.
    pub fn size(&self) -> usize {
        SPECIAL_TOKENS as usize + self.entities.len() + self.relations.len()
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities
    }

    pub fn forward_relation_names(&self) -> &[String] {
        &self.relations[..self.num_forward_relations()]
    }

    pub fn entity(&self, name: &str) -> Result<EntityId> {
        self.entity_index.get(name).copied().ok_or_else(|| Error::Lookup {
            kind: "entity",
            name: name.to_string(),
        })
    }

    pub fn relation(&self, name: &str) -> Result<RelationId> {
        self.relation_index.get(name).copied().ok_or_else(|| Error::Lookup {
            kind: "relation",
            name: name.to_string(),
        })
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entities[e.0 as usize]
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relations[r.0 as usize]
    }

    pub fn inverse(&self, r: RelationId) -> RelationId {
        let half = self.num_forward_relations() as u32;
        if r.0 < half {
            RelationId(r.0 + half)
        } else {
            RelationId(r.0 - half)
        }
    }

    pub fn is_inverse(&self, r: RelationId) -> bool {
        (r.0 as usize) >= self.num_forward_relations()
    }

    pub fn entity_token(&self, e: EntityId) -> Token {
        Token(SPECIAL_TOKENS + e.0)
    }

    pub fn relation_token(&self, r: RelationId) -> Token {
        Token(SPECIAL_TOKENS + self.entities.len() as u32 + r.0)
    }

    pub fn kind(&self, t: Token) -> TokenKind {
        let e = self.entities.len() as u32;
        match t.0 {
            0 => TokenKind::Pad,
            1 => TokenKind::Null,
            2 => TokenKind::Bos,
            3 => TokenKind::Eos,
            4 => TokenKind::Mask,
            x if x < SPECIAL_TOKENS + e => TokenKind::Entity(EntityId(x - SPECIAL_TOKENS)),
            x => TokenKind::Relation(RelationId(x - SPECIAL_TOKENS - e)),
        }
    }

    pub fn is_entity(&self, t: Token) -> bool {
        matches!(self.kind(t), TokenKind::Entity(_))
    }

    pub fn is_relation(&self, t: Token) -> bool {
        matches!(self.kind(t), TokenKind::Relation(_))
    }

    pub fn entity_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.entities.len() as u32).map(|i| Token(SPECIAL_TOKENS + i))
    }

    pub fn relation_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        let base = SPECIAL_TOKENS + self.entities.len() as u32;
        (0..self.relations.len() as u32).map(move |i| Token(base + i))
    }

    pub fn token_name(&self, t: Token) -> String {
        match self.kind(t) {
            TokenKind::Pad | TokenKind::Null | TokenKind::Bos | TokenKind::Eos | TokenKind::Mask => {
                SPECIAL_NAMES[t.0 as usize].into()
            }
            TokenKind::Entity(e) => self.entity_name(e).into(),
            TokenKind::Relation(r) => self.relation_name(r).into(),
        }
    }

    /// Inverse of [`Vocabulary::token_name`]. A name used by both an entity
    /// and a relation is rejected as ambiguous.
    pub fn token(&self, name: &str) -> Result<Token> {
        if let Some(i) = SPECIAL_NAMES.iter().position(|&n| n == name) {
            return Ok(Token(i as u32));
        }
        match (self.entity_index.get(name), self.relation_index.get(name)) {
            (Some(&e), None) => Ok(self.entity_token(e)),
            (None, Some(&r)) => Ok(self.relation_token(r)),
            (Some(_), Some(_)) => Err(Error::Config(format!("token name `{name}` is both an entity and a relation"))),
            (None, None) => Err(Error::Lookup {
                kind: "token",
                name: name.to_string(),
            }),
        }
    }

    /// Names closest to `name` among entities or relations, for error hints.
    pub fn suggestions(&self, name: &str, relations: bool, limit: usize) -> Vec<String> {
        let pool: &[String] = if relations {
            &self.relations
        } else {
            &self.entities
        };
        closest(name, pool.iter().map(String::as_str), limit)
    }
}

/// Up to `limit` of `candidates` nearest to `name` by edit distance.
pub fn closest<'a>(name: &str, candidates: impl Iterator<Item = &'a str>, limit: usize) -> Vec<String> {
    let mut scored: Vec<(usize, &str)> = candidates.map(|c| (edit_distance(name, c), c)).collect();
    scored.sort();
    scored.into_iter().take(limit).map(|(_, c)| String::from(c)).collect()
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Raw `(head, relation, tail)` names of a TSV triple file, in file order.
pub fn parse_triple_names(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected head<TAB>relation<TAB>tail, got `{line}`"),
            });
        }
        out.push((parts[0].into(), parts[1].into(), parts[2].into()));
    }
    Ok(out)
}

/// Resolves parsed names against a vocabulary.
pub fn resolve_triples(
    vocab: &Vocabulary,
    names: &[(String, String, String)],
) -> Result<Vec<Triple>> {
    names
        .iter()
        .map(|(h, r, t)| Ok(Triple::new(vocab.entity(h)?, vocab.relation(r)?, vocab.entity(t)?)))
        .collect()
}

/// Vocabulary over the union of several parsed triple lists.
pub fn vocabulary_for(lists: &[&[(String, String, String)]]) -> Result<Vocabulary> {
    let entities = lists
        .iter()
        .flat_map(|l| l.iter().flat_map(|(h, _, t)| [h.as_str(), t.as_str()]));
    let relations = lists.iter().flat_map(|l| l.iter().map(|(_, r, _)| r.as_str()));
    Vocabulary::build(entities, relations)
}

/// Parses one triple file and builds its vocabulary.
pub fn ingest_triples(text: &str) -> Result<(Vec<Triple>, Vocabulary)> {
    let names = parse_triple_names(text)?;
    let vocab = vocabulary_for(&[&names])?;
    let triples = resolve_triples(&vocab, &names)?;
    Ok((triples, vocab))
}

/// A list of triples that remembers whether inverses were already added.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TripleSet {
    pub triples: Vec<Triple>,
    augmented: bool,
}

impl TripleSet {
    pub fn new(triples: Vec<Triple>) -> Self {
        Self {
            triples,
            augmented: false,
        }
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Appends `(t, r⁻¹, h)` for every `(h, r, t)`. Applying it twice is an error.
pub fn augment_inverse(set: &TripleSet, vocab: &Vocabulary) -> Result<TripleSet> {
    if set.augmented {
        return Err(Error::State("triples are already inverse-augmented".into()));
    }
    let mut triples = set.triples.clone();
    triples.extend(
        set.triples
            .iter()
            .map(|t| Triple::new(t.tail, vocab.inverse(t.relation), t.head)),
    );
    Ok(TripleSet {
        triples,
        augmented: true,
    })
}

/// Train/valid/test triples sharing one vocabulary.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: TripleSet,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

impl Dataset {
    pub fn from_texts(train: &str, valid: &str, test: &str) -> Result<Self> {
        let (tr, va, te) = (
            parse_triple_names(train)?,
            parse_triple_names(valid)?,
            parse_triple_names(test)?,
        );
        let vocab = vocabulary_for(&[&tr, &va, &te])?;
        Ok(Self {
            train: TripleSet::new(resolve_triples(&vocab, &tr)?),
            valid: resolve_triples(&vocab, &va)?,
            test: resolve_triples(&vocab, &te)?,
            vocab,
        })
    }

    /// Every known true tail per `(head, relation)` across all splits, with
    /// inverses included.
    pub fn known_tails(&self) -> BTreeMap<(EntityId, RelationId), BTreeSet<EntityId>> {
        let mut map: BTreeMap<_, BTreeSet<_>> = BTreeMap::new();
        let all = self.train.triples.iter().chain(&self.valid).chain(&self.test);
        for t in all {
            map.entry((t.head, t.relation)).or_default().insert(t.tail);
            map.entry((t.tail, self.vocab.inverse(t.relation)))
                .or_default()
                .insert(t.head);
        }
        map
    }
}

/// Per-entity image and OCR vectors; either may be absent.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModalFeatureSet {
    pub image: Option<Vec<f64>>,
    pub ocr: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Ocr,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Image => "img",
            Modality::Ocr => "ocr",
        }
    }
}

/// Maps entities to their raw modal features. Unregistered entities read
/// back as having neither modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRegistry {
    width: usize,
    entries: Vec<ModalFeatureSet>,
}

impl FeatureRegistry {
    pub fn new(num_entities: usize, width: usize) -> Self {
        Self {
            width,
            entries: vec![ModalFeatureSet::default(); num_entities],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_entities(&self) -> usize {
        self.entries.len()
    }

    pub fn register_features(&mut self, entity: EntityId, features: ModalFeatureSet) -> Result<()> {
        for v in [&features.image, &features.ocr].into_iter().flatten() {
            if v.len() != self.width {
                return Err(Error::Dimension {
                    op: "register_features",
                    left: vec![self.width],
                    right: vec![v.len()],
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("feature of entity {}", entity.0)));
            }
        }
        let slot = self.entries.get_mut(entity.0 as usize).ok_or_else(|| Error::Lookup {
            kind: "entity id",
            name: format!("{}", entity.0),
        })?;
        *slot = features;
        Ok(())
    }

    /// Sets a single modality, leaving the other untouched.
    pub fn register_modality(&mut self, entity: EntityId, modality: Modality, v: Vec<f64>) -> Result<()> {
        let mut f = self.get(entity).clone();
        match modality {
            Modality::Image => f.image = Some(v),
            Modality::Ocr => f.ocr = Some(v),
        }
        self.register_features(entity, f)
    }

    pub fn get(&self, entity: EntityId) -> &ModalFeatureSet {
        &self.entries[entity.0 as usize]
    }

    pub fn image(&self, entity: EntityId) -> Option<&[f64]> {
        self.entries.get(entity.0 as usize)?.image.as_deref()
    }

    pub fn ocr(&self, entity: EntityId) -> Option<&[f64]> {
        self.entries.get(entity.0 as usize)?.ocr.as_deref()
    }

    pub fn count_with(&self, modality: Modality) -> usize {
        self.entries
            .iter()
            .filter(|f| match modality {
                Modality::Image => f.image.is_some(),
                Modality::Ocr => f.ocr.is_some(),
            })
            .count()
    }

    /// Parses `entity<TAB>img|ocr<TAB>v1,v2,...` lines into a registry.
    pub fn parse(text: &str, vocab: &Vocabulary, width: usize) -> Result<Self> {
        let mut reg = Self::new(vocab.num_entities(), width);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(parse_err(format!("expected 3 tab-separated fields in `{line}`")));
            }
            let entity = vocab.entity(parts[0])?;
            let modality = match parts[1] {
                "img" => Modality::Image,
                "ocr" => Modality::Ocr,
                other => return Err(parse_err(format!("unknown feature kind `{other}`"))),
            };
            let values = parts[2]
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<core::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("bad number: {e}")))?;
            reg.register_modality(entity, modality, values)?;
        }
        Ok(reg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_line() {
        let (t, v) = ingest_triples("A\tr1\tB\n").unwrap();
        assert_eq!(t, vec![Triple::new(v.entity("A").unwrap(), v.relation("r1").unwrap(), v.entity("B").unwrap())]);
    }

    #[test]
    fn token_names_round_trip() {
        let v = Vocabulary::build(["A", "B", "x"], ["r1", "x"]).unwrap();
        for i in 0..v.size() as u32 {
            let t = Token(i);
            let name = v.token_name(t);
            if name == "x" {
                assert!(v.token(&name).is_err());
            } else {
                assert_eq!(v.token(&name).unwrap(), t);
            }
        }
        assert!(matches!(v.token("zz"), Err(Error::Lookup { .. })));
    }

    #[test]
    fn empty_file() {
        let (t, v) = ingest_triples("").unwrap();
        assert!(t.is_empty());
        assert_eq!(v.num_entities(), 0);
    }

    #[test]
    fn fixture_counts() {
        let (t, v) = ingest_triples("A\tr1\tB\nB\tr2\tC\nC\tr1\tD\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(v.num_entities(), 4);
        assert_eq!(v.num_forward_relations(), 2);
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = ingest_triples("A\tr1\tB\nA r1 B\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn duplicates_are_kept() {
        let (t, _) = ingest_triples("A\tr\tB\nA\tr\tB\n").unwrap();
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn vocabulary_is_order_independent() {
        let (_, a) = ingest_triples("B\tr2\tC\nA\tr1\tB\n").unwrap();
        let (_, b) = ingest_triples("A\tr1\tB\nB\tr2\tC\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.entity("A").unwrap(), EntityId(0));
    }

    #[test]
    fn token_layout_round_trips() {
        let (_, v) = ingest_triples("A\tr1\tB\n").unwrap();
        assert_eq!(v.size(), 5 + 2 + 2);
        for e in v.entity_tokens() {
            assert!(v.is_entity(e));
        }
        let r = v.relation("r1").unwrap();
        assert_eq!(v.kind(v.relation_token(r)), TokenKind::Relation(r));
        assert_eq!(v.relation_name(v.inverse(r)), "r1_inv");
        assert_eq!(v.inverse(v.inverse(r)), r);
        assert_eq!(v.kind(Token::PAD), TokenKind::Pad);
    }

    #[test]
    fn inverse_augmentation() {
        let (t, v) = ingest_triples("A\tr1\tB\n").unwrap();
        let set = augment_inverse(&TripleSet::new(t.clone()), &v).unwrap();
        let (a, b) = (v.entity("A").unwrap(), v.entity("B").unwrap());
        let r = v.relation("r1").unwrap();
        assert_eq!(set.triples, vec![Triple::new(a, r, b), Triple::new(b, v.inverse(r), a)]);
        assert!(augment_inverse(&set, &v).is_err());
        let empty = augment_inverse(&TripleSet::default(), &v).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn doubling_on_larger_fixture() {
        let mut text = String::new();
        for i in 0..100 {
            text.push_str(&format!("e{}\tr{}\te{}\n", i, i % 3, (i * 7 + 1) % 40));
        }
        let (t, v) = ingest_triples(&text).unwrap();
        let set = augment_inverse(&TripleSet::new(t), &v).unwrap();
        assert_eq!(set.len(), 200);
    }

    #[test]
    fn registry_round_trip_and_absence() {
        let (_, v) = ingest_triples("A\tr1\tB\n").unwrap();
        let mut reg = FeatureRegistry::new(v.num_entities(), 3);
        let f = ModalFeatureSet {
            image: Some(vec![1.0, 2.0, 3.0]),
            ocr: None,
        };
        reg.register_features(EntityId(0), f.clone()).unwrap();
        assert_eq!(reg.get(EntityId(0)), &f);
        assert_eq!(reg.get(EntityId(1)), &ModalFeatureSet::default());
        let bad = ModalFeatureSet {
            image: Some(vec![1.0]),
            ocr: None,
        };
        assert!(matches!(reg.register_features(EntityId(1), bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn feature_file_parsing() {
        let (_, v) = ingest_triples("A\tr1\tB\n").unwrap();
        let reg = FeatureRegistry::parse("A\timg\t1,2\nA\tocr\t0.5,-1\n", &v, 2).unwrap();
        assert_eq!(reg.image(EntityId(0)), Some(&[1.0, 2.0][..]));
        assert_eq!(reg.ocr(EntityId(0)), Some(&[0.5, -1.0][..]));
        assert_eq!(reg.image(EntityId(1)), None);
        assert!(FeatureRegistry::parse("A\tpng\t1,2\n", &v, 2).is_err());
        assert!(FeatureRegistry::parse("Z\timg\t1,2\n", &v, 2).is_err());
    }
}
