//! Synthetic identity datasets on the unit hypersphere with injected label
//! noise, CSV ingestion, and the held-out verification pairs.
//!
//! Each class is a random prototype direction; a clean sample is the
//! normalized prototype plus isotropic Gaussian jitter. A fraction of the
//! samples is then corrupted, half by moving the label to another class and
//! half by replacing the features with samples of identities outside the
//! label set.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    LabelFlip,
    Outlier,
}

impl Provenance {
    pub fn token(self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::LabelFlip => "label_flip",
            Provenance::Outlier => "outlier",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "clean" => Some(Provenance::Clean),
            "label_flip" => Some(Provenance::LabelFlip),
            "outlier" => Some(Provenance::Outlier),
            _ => None,
        }
    }

    pub fn is_clean(self) -> bool {
        self == Provenance::Clean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
    /// Ground truth; never read by the loss path.
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub classes: usize,
    pub dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn noisy_count(&self) -> usize {
        self.samples.iter().filter(|s| !s.provenance.is_clean()).count()
    }

    pub fn feature_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), self.dim));
        for (mut row, s) in m.rows_mut().into_iter().zip(&self.samples) {
            row.iter_mut().zip(&s.features).for_each(|(d, &v)| *d = v);
        }
        m
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn provenance(&self) -> Vec<Provenance> {
        self.samples.iter().map(|s| s.provenance).collect()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            classes: self.classes,
            dim: self.dim,
        }
    }

    /// Splits each class by `train_fraction`, keeping the original order
    /// inside both halves.
    pub fn stratified_split<R: Rng + ?Sized>(&self, train_fraction: f64, rng: &mut R) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        let mut train = Vec::new();
        let mut held = Vec::new();
        for mut members in by_class {
            members.shuffle(rng);
            let k = (train_fraction * members.len() as f64).round() as usize;
            train.extend_from_slice(&members[..k]);
            held.extend_from_slice(&members[k..]);
        }
        train.sort_unstable();
        held.sort_unstable();
        Ok((self.subset(&train), self.subset(&held)))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("label");
        for k in 0..self.dim {
            out.push_str(&format!(",f{k}"));
        }
        out.push_str(",provenance\n");
        for s in &self.samples {
            out.push_str(&s.label.to_string());
            for v in &s.features {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push(',');
            out.push_str(s.provenance.token());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Parses `label,f0,f1,...[,provenance]`; missing provenance is clean.
    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let parse_err = |line: u64, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| parse_err(0, e.to_string()))?;
        let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let cols: Vec<&str> = header.iter().map(str::trim).collect();
        if cols.first() != Some(&"label") {
            return Err(parse_err(1, "first column must be `label`".into()));
        }
        let has_prov = cols.last() == Some(&"provenance");
        let feature_cols = &cols[1..cols.len() - usize::from(has_prov)];
        if feature_cols.is_empty() {
            return Err(parse_err(1, "no feature columns".into()));
        }
        for (k, name) in feature_cols.iter().enumerate() {
            if *name != format!("f{k}") {
                return Err(parse_err(1, format!("expected column f{k}, found {name:?}")));
            }
        }
        let dim = feature_cols.len();

        let mut samples = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != cols.len() {
                return Err(parse_err(
                    line,
                    format!("row has {} fields, header has {}", record.len(), cols.len()),
                ));
            }
            let label = record[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(line, format!("bad label {:?}: {e}", &record[0])))?;
            let features = (1..=dim)
                .map(|k| {
                    let field = record[k].trim();
                    match field.parse::<f64>() {
                        Ok(v) if v.is_finite() => Ok(v),
                        _ => Err(parse_err(line, format!("non-numeric feature f{} {field:?}", k - 1))),
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            let provenance = if has_prov {
                let token = record[dim + 1].trim();
                Provenance::parse(token)
                    .ok_or_else(|| parse_err(line, format!("unknown provenance {token:?}")))?
            } else {
                Provenance::Clean
            };
            samples.push(LabeledSample {
                features,
                label,
                provenance,
            });
        }
        let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
        Ok(Dataset { samples, classes, dim })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Per-coordinate standard deviation of the jitter added to the
    /// prototype before renormalization.
    pub spread: f64,
    pub noise_rate: f64,
    /// Share of the noisy samples that are label flips; the rest are outliers.
    pub flip_outlier_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 200,
            samples_per_class: 100,
            input_dim: 64,
            spread: 0.15,
            noise_rate: 0.4,
            flip_outlier_ratio: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn total(&self) -> usize {
        self.classes * self.samples_per_class
    }

    pub fn noisy_count(&self) -> usize {
        (self.noise_rate * self.total() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(format!("data: {what}")));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.samples_per_class == 0 || self.input_dim == 0 {
            return bad("samples_per_class and input_dim must be positive".into());
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return bad(format!("spread {} must be positive", self.spread));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1)", self.noise_rate));
        }
        if !(0.0..=1.0).contains(&self.flip_outlier_ratio) {
            return bad(format!("flip_outlier_ratio {} outside [0, 1]", self.flip_outlier_ratio));
        }
        let both = self.flip_outlier_ratio > 0.0 && self.flip_outlier_ratio < 1.0;
        let noisy = self.noisy_count();
        if both && noisy > 0 && noisy < 2 {
            return bad(format!("{noisy} noisy sample(s) cannot be split into flips and outliers"));
        }
        Ok(())
    }
}

/// Which identity actually generated a sample's features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Class(usize),
    /// Index into the pool of identities outside the label set.
    Foreign(usize),
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub dataset: Dataset,
    pub origins: Vec<Origin>,
    pub prototypes: Array2<f64>,
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn jittered<R: Rng + ?Sized>(proto: &[f64], spread: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = proto
            .iter()
            .map(|&p| p + spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn synthesize(cfg: &SynthConfig) -> Result<Synthesis> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, d) = (cfg.classes, cfg.input_dim);
    let prototypes: Vec<Vec<f64>> = (0..c).map(|_| random_unit(d, &mut rng)).collect();
    let foreign: Vec<Vec<f64>> = (0..c).map(|_| random_unit(d, &mut rng)).collect();

    let mut samples = Vec::with_capacity(cfg.total());
    let mut origins = Vec::with_capacity(cfg.total());
    for (k, proto) in prototypes.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            samples.push(LabeledSample {
                features: jittered(proto, cfg.spread, &mut rng),
                label: k,
                provenance: Provenance::Clean,
            });
            origins.push(Origin::Class(k));
        }
    }

    let noisy = cfg.noisy_count();
    let flips = (noisy as f64 * cfg.flip_outlier_ratio).round() as usize;
    let chosen = index::sample(&mut rng, samples.len(), noisy).into_vec();
    for (rank, &i) in chosen.iter().enumerate() {
        let s = &mut samples[i];
        if rank < flips {
            let other = rng.random_range(0..c - 1);
            s.label = if other >= s.label { other + 1 } else { other };
            s.provenance = Provenance::LabelFlip;
        } else {
            let f = rng.random_range(0..foreign.len());
            s.features = jittered(&foreign[f], cfg.spread, &mut rng);
            s.provenance = Provenance::Outlier;
            origins[i] = Origin::Foreign(f);
        }
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let samples = order.iter().map(|&i| samples[i].clone()).collect();
    let origins = order.iter().map(|&i| origins[i]).collect();

    let mut proto_m = Array2::zeros((c, d));
    for (mut row, p) in proto_m.rows_mut().into_iter().zip(&prototypes) {
        row.iter_mut().zip(p).for_each(|(dst, &v)| *dst = v);
    }
    Ok(Synthesis {
        dataset: Dataset {
            samples,
            classes: c,
            dim: d,
        },
        origins,
        prototypes: proto_m,
    })
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    synthesize(cfg).map(|s| s.dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "C")]
    pub classes: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub total: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub spread: f64,
}

impl Manifest {
    pub fn from_config(cfg: &SynthConfig) -> Self {
        Manifest {
            classes: cfg.classes,
            dim: cfg.input_dim,
            total: cfg.total(),
            noise_rate: cfg.noise_rate,
            seed: cfg.seed,
            spread: cfg.spread,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Index pair into [`VerificationSet::features`] and whether both sides share
/// an identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Balanced same/different pairs drawn from clean held-out samples, split
/// into a threshold-selection half and a test half.
#[derive(Debug, Clone)]
pub struct VerificationSet {
    pub features: Array2<f64>,
    pub validation: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl VerificationSet {
    /// `pairs_per_split` pairs in each half, half of them same-identity.
    pub fn build<R: Rng + ?Sized>(held_out: &Dataset, pairs_per_split: usize, rng: &mut R) -> Result<Self> {
        let clean: Vec<&LabeledSample> = held_out.samples.iter().filter(|s| s.provenance.is_clean()).collect();
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); held_out.classes];
        for (i, s) in clean.iter().enumerate() {
            by_class[s.label].push(i);
        }
        let multi: Vec<usize> = (0..by_class.len()).filter(|&k| by_class[k].len() >= 2).collect();
        let populated: Vec<usize> = (0..by_class.len()).filter(|&k| !by_class[k].is_empty()).collect();
        if multi.is_empty() || populated.len() < 2 || pairs_per_split == 0 {
            return Err(Error::InvalidInput(
                "held-out set too small to form same and different pairs".into(),
            ));
        }
        let mut draw = |n: usize| -> Vec<Pair> {
            (0..n)
                .map(|k| {
                    if k % 2 == 0 {
                        let members = &by_class[multi[rng.random_range(0..multi.len())]];
                        let picked = index::sample(rng, members.len(), 2);
                        Pair {
                            a: members[picked.index(0)],
                            b: members[picked.index(1)],
                            same: true,
                        }
                    } else {
                        let picked = index::sample(rng, populated.len(), 2);
                        let ca = &by_class[populated[picked.index(0)]];
                        let cb = &by_class[populated[picked.index(1)]];
                        Pair {
                            a: ca[rng.random_range(0..ca.len())],
                            b: cb[rng.random_range(0..cb.len())],
                            same: false,
                        }
                    }
                })
                .collect()
        };
        let validation = draw(pairs_per_split);
        let test = draw(pairs_per_split);
        let mut features = Array2::zeros((clean.len(), held_out.dim));
        for (mut row, s) in features.rows_mut().into_iter().zip(&clean) {
            row.iter_mut().zip(&s.features).for_each(|(d, &v)| *d = v);
        }
        Ok(VerificationSet {
            features,
            validation,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise_rate: f64) -> SynthConfig {
        SynthConfig {
            classes: 10,
            samples_per_class: 20,
            input_dim: 8,
            noise_rate,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_is_all_clean() {
        let ds = generate(&small(0.0)).unwrap();
        assert_eq!(ds.len(), 200);
        assert!(ds.samples.iter().all(|s| s.provenance.is_clean()));
    }

    #[test]
    fn forty_percent_of_ten_thousand() {
        let cfg = SynthConfig {
            classes: 100,
            samples_per_class: 100,
            input_dim: 4,
            noise_rate: 0.4,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        let flips = ds.samples.iter().filter(|s| s.provenance == Provenance::LabelFlip).count();
        let outliers = ds.samples.iter().filter(|s| s.provenance == Provenance::Outlier).count();
        assert_eq!((flips, outliers), (2000, 2000));
    }

    #[test]
    fn flips_change_label_and_outliers_are_foreign() {
        let syn = synthesize(&small(0.5)).unwrap();
        for (s, o) in syn.dataset.samples.iter().zip(&syn.origins) {
            match (s.provenance, o) {
                (Provenance::LabelFlip, Origin::Class(k)) => assert_ne!(s.label, *k),
                (Provenance::Clean, Origin::Class(k)) => assert_eq!(s.label, *k),
                (Provenance::Outlier, Origin::Foreign(_)) => {}
                other => panic!("inconsistent origin {other:?}"),
            }
        }
    }

    #[test]
    fn features_are_unit_norm() {
        let ds = generate(&small(0.3)).unwrap();
        for s in &ds.samples {
            let n: f64 = s.features.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(generate(&small(0.4)).unwrap(), generate(&small(0.4)).unwrap());
        let other = SynthConfig { seed: 8, ..small(0.4) };
        assert_ne!(generate(&small(0.4)).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn intra_class_cosine_exceeds_inter_class() {
        let cfg = SynthConfig {
            classes: 20,
            samples_per_class: 30,
            noise_rate: 0.0,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
        for (i, a) in ds.samples.iter().enumerate() {
            for b in &ds.samples[i + 1..] {
                let c: f64 = a.features.iter().zip(&b.features).map(|(x, y)| x * y).sum();
                if a.label == b.label {
                    intra += c;
                    ni += 1;
                } else {
                    inter += c;
                    nx += 1;
                }
            }
        }
        assert!(intra / ni as f64 > inter / nx as f64 + 0.05);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        assert!(SynthConfig { noise_rate: 1.0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { classes: 1, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { spread: 0.0, ..Default::default() }.validate().is_err());
        // one noisy sample cannot be split 50:50
        let tiny = SynthConfig {
            classes: 2,
            samples_per_class: 5,
            noise_rate: 0.1,
            ..Default::default()
        };
        assert!(tiny.validate().is_err());
        assert!(SynthConfig { flip_outlier_ratio: 1.0, ..tiny }.validate().is_ok());
    }

    #[test]
    fn split_is_stratified() {
        let ds = generate(&small(0.0)).unwrap();
        let (train, held) = ds.stratified_split(0.8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(train.len(), 160);
        assert_eq!(held.len(), 40);
        for k in 0..10 {
            assert_eq!(train.samples.iter().filter(|s| s.label == k).count(), 16);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(0.4)).unwrap();
        let path = dir.path().join("d.csv");
        ds.save_csv(&path).unwrap();
        assert_eq!(Dataset::load_csv(&path).unwrap(), ds);
    }

    #[test]
    fn csv_two_rows_without_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "label,f0,f1,f2\n0,0.1,0.2,0.3\n1,-1,0,1\n").unwrap();
        let ds = Dataset::load_csv(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim, 3);
        assert_eq!(ds.classes, 2);
        assert!(ds.samples.iter().all(|s| s.provenance == Provenance::Clean));
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "label,f0,f1,provenance\n0,0.1,0.2,clean\n1,0.5,outlier\n").unwrap();
        match Dataset::load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "label,f0,f1,provenance\n0,abc,0.2,clean\n").unwrap();
        assert!(matches!(Dataset::load_csv(&path), Err(Error::Parse { line: 2, .. })));
        fs::write(&path, "label,f0,f1,provenance\n0,0.1,0.2,dirty\n").unwrap();
        let err = Dataset::load_csv(&path).unwrap_err().to_string();
        assert!(err.contains("dirty") && err.contains(":2:"), "{err}");
    }

    #[test]
    fn verification_pairs_are_balanced() {
        let ds = generate(&small(0.3)).unwrap();
        let (_, held) = ds.stratified_split(0.5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let set = VerificationSet::build(&held, 100, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(set.validation.len(), 100);
        assert_eq!(set.test.iter().filter(|p| p.same).count(), 50);
        assert!(set.test.iter().all(|p| p.a != p.b));
    }
}
