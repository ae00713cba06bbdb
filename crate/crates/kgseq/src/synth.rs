//! Seeded synthetic KG whose answers are predictable from image clusters.
//!
//! Entity `i` sits in cluster `i / per_cluster` with slot `i % per_cluster`.
//! Every relation is a bijective shift on (cluster, slot), so the tail's
//! cluster is a function of the head's cluster and the relation. Image
//! vectors carry the cluster centroid, OCR vectors carry the slot centroid,
//! both scaled by `signal` and blurred with Gaussian noise.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub clusters: usize,
    pub per_cluster: usize,
    pub relations: usize,
    pub width: usize,
    /// Scale of the centroid component; 0 makes features pure noise.
    pub signal: f64,
    pub noise: f64,
    pub image_fraction: f64,
    pub ocr_fraction: f64,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clusters: 5,
            per_cluster: 10,
            relations: 5,
            width: 32,
            signal: 1.0,
            noise: 0.3,
            image_fraction: 1.0,
            ocr_fraction: 0.9,
            valid: 25,
            test: 25,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn entities(&self) -> usize {
        self.clusters * self.per_cluster
    }

    fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.per_cluster == 0 || self.relations == 0 || self.width == 0 {
            return Err(Error::Config("generator sizes must be positive".into()));
        }
        if self.relations >= self.clusters * self.per_cluster {
            return Err(Error::Config("more relations than distinct shifts".into()));
        }
        for (k, f) in [("image_fraction", self.image_fraction), ("ocr_fraction", self.ocr_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{k} must lie in [0, 1], got {f}")));
            }
        }
        if !(self.noise >= 0.0 && self.signal.is_finite()) {
            return Err(Error::Config("noise must be non-negative and signal finite".into()));
        }
        if self.valid + self.test >= self.entities() * self.relations {
            return Err(Error::Config("held-out splits leave no training triples".into()));
        }
        Ok(())
    }
}

/// Generated dataset as file contents.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: String,
    pub valid: String,
    pub test: String,
    pub features: String,
    /// `(cluster shift, slot shift)` of each relation.
    pub shifts: Vec<(usize, usize)>,
}

pub fn entity_name(i: usize) -> String {
    format!("e{i:03}")
}

pub fn relation_name(j: usize) -> String {
    format!("r{j}")
}

fn centroids(rng: &mut ChaCha8Rng, n: usize, width: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn feature_line(out: &mut String, name: &str, tag: &str, v: &[f64]) {
    let values: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    let _ = writeln!(out, "{name}\t{tag}\t{}", values.join(","));
}

fn chosen(rng: &mut ChaCha8Rng, n: usize, fraction: f64) -> Vec<bool> {
    let k = (fraction * n as f64).round() as usize;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let mut keep = vec![false; n];
    for &i in &ids[..k.min(n)] {
        keep[i] = true;
    }
    keep
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let (c, p) = (cfg.clusters, cfg.per_cluster);
    let n = cfg.entities();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Distinct non-identity shifts; the third relation composes the first two
    // so multi-hop evidence exists for it.
    let mut shifts: Vec<(usize, usize)> = Vec::new();
    while shifts.len() < cfg.relations {
        let composed = (shifts.len() == 2)
            .then(|| ((shifts[0].0 + shifts[1].0) % c, (shifts[0].1 + shifts[1].1) % p))
            .filter(|s| *s != (0, 0) && !shifts.contains(s));
        let s = composed.unwrap_or_else(|| (rng.random_range(0..c), rng.random_range(0..p)));
        if s != (0, 0) && !shifts.contains(&s) {
            shifts.push(s);
        }
    }

    let mut triples: Vec<(usize, usize, usize)> = Vec::with_capacity(n * cfg.relations);
    for h in 0..n {
        for (j, &(sc, sp)) in shifts.iter().enumerate() {
            let t = ((h / p + sc) % c) * p + (h % p + sp) % p;
            triples.push((h, j, t));
        }
    }
    triples.shuffle(&mut rng);
    let fmt = |ts: &[(usize, usize, usize)]| {
        let mut s = String::new();
        for &(h, r, t) in ts {
            let _ = writeln!(s, "{}\t{}\t{}", entity_name(h), relation_name(r), entity_name(t));
        }
        s
    };
    let (valid, rest) = triples.split_at(cfg.valid);
    let (test, train) = rest.split_at(cfg.test);

    let image_c = centroids(&mut rng, c, cfg.width);
    let ocr_c = centroids(&mut rng, p, cfg.width);
    let with_image = chosen(&mut rng, n, cfg.image_fraction);
    let with_ocr = chosen(&mut rng, n, cfg.ocr_fraction);
    let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut features = String::new();
    for i in 0..n {
        let name = entity_name(i);
        let mut draw = |centroid: &[f64]| -> Vec<f64> {
            centroid.iter().map(|m| cfg.signal * m + normal.sample(&mut rng)).collect()
        };
        let img = draw(&image_c[i / p]);
        let ocr = draw(&ocr_c[i % p]);
        if with_image[i] {
            feature_line(&mut features, &name, "img", &img);
        }
        if with_ocr[i] {
            feature_line(&mut features, &name, "ocr", &ocr);
        }
    }
    Ok(SynthData {
        train: fmt(train),
        valid: fmt(valid),
        test: fmt(test),
        features,
        shifts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use kgseq_core::kg::{augment_inverse, Dataset, FeatureRegistry, Modality};

    #[test]
    fn default_sizes() {
        let d = generate(&SynthConfig::default()).unwrap();
        let ds = Dataset::from_texts(&d.train, &d.valid, &d.test).unwrap();
        assert_eq!(ds.vocab.num_entities(), 50);
        assert_eq!(ds.vocab.num_forward_relations(), 5);
        assert_eq!(ds.train.len(), 200);
        assert_eq!(augment_inverse(&ds.train, &ds.vocab).unwrap().len(), 400);
        assert_eq!((ds.valid.len(), ds.test.len()), (25, 25));
        let reg = FeatureRegistry::parse(&d.features, &ds.vocab, 32).unwrap();
        assert_eq!(reg.count_with(Modality::Image), 50);
        assert_eq!(reg.count_with(Modality::Ocr), 45);
    }

    #[test]
    fn same_seed_same_files() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 8, ..Default::default() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn third_relation_composes() {
        let d = generate(&SynthConfig::default()).unwrap();
        let s = &d.shifts;
        assert_eq!(s[2], ((s[0].0 + s[1].0) % 5, (s[0].1 + s[1].1) % 10));
    }

    #[test]
    fn zero_signal_is_pure_noise() {
        let cfg = SynthConfig {
            signal: 0.0,
            noise: 0.0,
            ..Default::default()
        };
        let d = generate(&cfg).unwrap();
        for line in d.features.lines() {
            let v = line.rsplit('\t').next().unwrap();
            assert!(v.split(',').all(|x| x.parse::<f64>().unwrap() == 0.0));
        }
    }
}
