//! Self-describing checkpoint container: a text header (version, kind,
//! config snapshot, vocabulary, array directory) followed by the arrays as
//! little-endian f64 values in directory order.

use std::fmt::Write as _;
use std::path::Path;

use kgseq_core::encoder::Encoder;
use kgseq_core::fusion::{FusedState, FusedTable, FusionModel};
use kgseq_core::kg::{EntityId, FeatureRegistry, Modality, Vocabulary};
use kgseq_core::params::{Branch, ParamStore};
use kgseq_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{f64s, split_header};

const MAGIC: &str = "kgseq-checkpoint";
pub const VERSION: u32 = 1;

const ENCODER: &str = "encoder";
const FUSION: &str = "fusion";
const TABLE: &str = "table";
const TABLE_NAME: &str = "fused_states";
const IMAGES: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Pretrained fusion blocks.
    Fusion,
    /// Trained encoder, plus the fused entity states when multimodal.
    Model,
}

impl Kind {
    fn tag(self) -> &'static str {
        match self {
            Kind::Fusion => "fusion",
            Kind::Model => "model",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub group: String,
    pub name: String,
    pub branch: Branch,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub config: RunConfig,
    pub vocab: Vocabulary,
    /// Raw width of the structure modality, when fusion arrays are present.
    pub structure_raw_width: usize,
    pub arrays: Vec<Array>,
}

fn store_arrays<'a>(group: &'a str, store: &'a ParamStore) -> impl Iterator<Item = Array> + 'a {
    store.iter().map(move |p| Array {
        group: group.to_string(),
        name: p.name.clone(),
        branch: p.branch,
        value: p.value.clone(),
    })
}

impl Checkpoint {
    pub fn fusion(config: &RunConfig, vocab: &Vocabulary, model: &FusionModel) -> Self {
        Self {
            kind: Kind::Fusion,
            config: config.clone(),
            vocab: vocab.clone(),
            structure_raw_width: model.structure.raw_width(),
            arrays: store_arrays(FUSION, &model.store).collect(),
        }
    }

    /// `images` is kept so returns can be replayed at ranking time.
    pub fn model(
        config: &RunConfig,
        vocab: &Vocabulary,
        encoder: &Encoder,
        table: Option<&FusedTable>,
        images: &FeatureRegistry,
    ) -> Result<Self> {
        let mut arrays: Vec<Array> = store_arrays(ENCODER, &encoder.store).collect();
        if let Some(t) = table {
            let width = t.states.first().map_or(0, FusedState::width);
            let data: Vec<f64> = t.states.iter().flat_map(FusedState::concatenated).collect();
            arrays.push(Array {
                group: TABLE.into(),
                name: TABLE_NAME.into(),
                branch: Branch::Shared,
                value: Tensor::new(vec![t.states.len(), width], data)?,
            });
        }
        let n = images.num_entities();
        let w = images.width();
        if w > 0 && images.count_with(Modality::Image) > 0 {
            let mut vectors = vec![0.0; n * w];
            let mut present = vec![0.0; n];
            for e in 0..n {
                if let Some(v) = images.image(EntityId(e as u32)) {
                    vectors[e * w..(e + 1) * w].copy_from_slice(v);
                    present[e] = 1.0;
                }
            }
            for (name, value) in [("vectors", Tensor::new(vec![n, w], vectors)?), ("present", Tensor::new(vec![n, 1], present)?)] {
                arrays.push(Array {
                    group: IMAGES.into(),
                    name: name.into(),
                    branch: Branch::Shared,
                    value,
                });
            }
        }
        Ok(Self {
            kind: Kind::Model,
            config: config.clone(),
            vocab: vocab.clone(),
            structure_raw_width: 0,
            arrays,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = format!(
            "{MAGIC} {VERSION}\nkind {}\nstructure_raw_width {}\n",
            self.kind.tag(),
            self.structure_raw_width
        );
        let config = self.config.to_text();
        let _ = write!(h, "config {}\n{config}", config.lines().count());
        let _ = writeln!(h, "entities {}", self.vocab.num_entities());
        for n in self.vocab.entity_names() {
            let _ = writeln!(h, "{n}");
        }
        let _ = writeln!(h, "relations {}", self.vocab.num_forward_relations());
        for n in self.vocab.forward_relation_names() {
            let _ = writeln!(h, "{n}");
        }
        let _ = writeln!(h, "arrays {}", self.arrays.len());
        for a in &self.arrays {
            let dims: Vec<String> = a.value.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(h, "{}\t{}\t{}\t{}", a.group, a.name, a.branch.tag(), dims.join(","));
        }
        h.push_str("end\n");
        let mut out = h.into_bytes();
        for a in &self.arrays {
            for v in a.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (lines, payload) = split_header(path, bytes)?;
        let fmt = |line: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            line,
            msg,
        };
        match lines.first().and_then(|l| l.strip_prefix(MAGIC)).map(str::trim) {
            Some(v) if v == VERSION.to_string() => {}
            Some(v) => return Err(Error::Version(format!("checkpoint version {v}, this build reads {VERSION}"))),
            None => return Err(Error::Version(format!("{} is not a checkpoint", path.display()))),
        }
        let field = |i: usize, key: &str| -> Result<&str> {
            lines
                .get(i)
                .and_then(|l| l.strip_prefix(key))
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| fmt(i + 1, format!("expected `{key} ...`")))
        };
        let kind = match field(1, "kind")? {
            "fusion" => Kind::Fusion,
            "model" => Kind::Model,
            k => return Err(Error::Version(format!("unknown checkpoint kind `{k}`"))),
        };
        let structure_raw_width: usize = field(2, "structure_raw_width")?
            .parse()
            .map_err(|_| fmt(3, "bad structure_raw_width".into()))?;
        // Counted sections, read in order.
        let mut at = 3;
        let mut section = |key: &str| -> Result<&[&str]> {
            let line = lines.get(at).ok_or_else(|| fmt(at + 1, format!("missing `{key}` section")))?;
            let n: usize = line
                .strip_prefix(key)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| fmt(at + 1, format!("expected `{key} <count>`")))?;
            let body = lines
                .get(at + 1..at + 1 + n)
                .ok_or_else(|| fmt(at + 1, format!("`{key}` section is truncated")))?;
            at += 1 + n;
            Ok(body)
        };
        let config = RunConfig::parse(&section("config")?.join("\n"))?;
        let entities = section("entities")?.to_vec();
        let relations = section("relations")?.to_vec();
        let directory = section("arrays")?.to_vec();
        let vocab = Vocabulary::build(entities.iter().copied(), relations.iter().copied())?;

        let values = f64s(path, payload)?;
        let mut offset = 0;
        let mut arrays = Vec::with_capacity(directory.len());
        for (i, line) in directory.iter().enumerate() {
            let parts: Vec<&str> = line.split('\t').collect();
            let [group, name, branch, dims] = parts[..] else {
                return Err(fmt(0, format!("array entry {i} needs 4 fields")));
            };
            let shape: Vec<usize> = dims
                .split(',')
                .filter(|d| !d.is_empty())
                .map(|d| d.parse().map_err(|_| fmt(0, format!("bad dimension `{d}` for {name}"))))
                .collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            let data = values
                .get(offset..offset + len)
                .ok_or_else(|| fmt(0, format!("payload ends inside `{name}`")))?
                .to_vec();
            offset += len;
            arrays.push(Array {
                group: group.into(),
                name: name.into(),
                branch: Branch::from_tag(branch).ok_or_else(|| fmt(0, format!("unknown branch `{branch}`")))?,
                value: Tensor::new(shape, data)?,
            });
        }
        if offset != values.len() {
            return Err(fmt(0, format!("{} trailing payload values", values.len() - offset)));
        }
        Ok(Self {
            kind,
            config,
            vocab,
            structure_raw_width,
            arrays,
        })
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Version(format!(
                "expected a {} checkpoint, found {}",
                kind.tag(),
                self.kind.tag()
            )))
        }
    }

    /// Rejects data whose vocabulary differs from the one trained on.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if self.vocab.entity_names() != vocab.entity_names() {
            return Err(Error::Version(format!(
                "checkpoint has {} entities, data has {} (or names differ)",
                self.vocab.num_entities(),
                vocab.num_entities()
            )));
        }
        if self.vocab.forward_relation_names() != vocab.forward_relation_names() {
            return Err(Error::Version(format!(
                "checkpoint has {} relations, data has {} (or names differ)",
                self.vocab.num_forward_relations(),
                vocab.num_forward_relations()
            )));
        }
        Ok(())
    }

    fn group(&self, group: &str) -> Vec<(String, Tensor)> {
        self.arrays
            .iter()
            .filter(|a| a.group == group)
            .map(|a| (a.name.clone(), a.value.clone()))
            .collect()
    }

    pub fn encoder(&self) -> Result<Encoder> {
        self.expect_kind(Kind::Model)?;
        let mut enc = Encoder::new(self.config.encoder(self.vocab.size())?)?;
        enc.load_values(self.group(ENCODER))?;
        Ok(enc)
    }

    pub fn fusion_model(&self) -> Result<FusionModel> {
        self.expect_kind(Kind::Fusion)?;
        Ok(FusionModel::from_values(
            self.config.fusion(),
            self.structure_raw_width,
            self.group(FUSION),
        )?)
    }

    /// Image features stored with a model; empty when none were saved.
    pub fn images(&self) -> Result<FeatureRegistry> {
        let n = self.vocab.num_entities();
        let find = |name: &str| self.arrays.iter().find(|a| a.group == IMAGES && a.name == name);
        let (Some(vectors), Some(present)) = (find("vectors"), find("present")) else {
            return Ok(FeatureRegistry::new(n, 0));
        };
        let w = vectors.value.shape().get(1).copied().unwrap_or(0);
        if vectors.value.shape() != [n, w] || present.value.shape() != [n, 1] {
            return Err(Error::Version(format!(
                "image arrays have shapes {:?} and {:?} for {n} entities",
                vectors.value.shape(),
                present.value.shape()
            )));
        }
        let mut reg = FeatureRegistry::new(n, w);
        for e in 0..n {
            if present.value.row(e)[0] != 0.0 {
                reg.register_modality(EntityId(e as u32), Modality::Image, vectors.value.row(e).to_vec())?;
            }
        }
        Ok(reg)
    }

    pub fn table(&self) -> Result<Option<FusedTable>> {
        let Some(a) = self.arrays.iter().find(|a| a.group == TABLE) else {
            return Ok(None);
        };
        let (s, i) = (self.config.structure_width, self.config.image_width);
        let width = s + i + self.config.ocr_width;
        if a.value.shape() != [self.vocab.num_entities(), width] {
            return Err(Error::Version(format!(
                "fused state table has shape {:?}, expected [{}, {width}]",
                a.value.shape(),
                self.vocab.num_entities()
            )));
        }
        let states = (0..self.vocab.num_entities())
            .map(|e| FusedState::from_concatenated(a.value.row(e), s, i))
            .collect();
        Ok(Some(FusedTable { states }))
    }
}
