use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::treatment::TreatmentSet;
use crate::embedlib::{EmbeddingRecord, Level};
use crate::error::{io_err, Error, Result};
use crate::synth::{Archetype, City};

pub const SAMPLES_CSV: &str = "samples.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct UpliftSample {
    pub sample_id: usize,
    pub region_id: usize,
    /// Index into the treatment set.
    pub treatment: usize,
    pub converted: bool,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpliftData {
    pub treatments: TreatmentSet,
    pub samples: Vec<UpliftSample>,
    /// Width of the appended region block, zero when not augmented.
    pub embedding_dim: usize,
}

impl UpliftData {
    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        for s in &self.samples {
            if s.features.len() != d {
                return Err(Error::Shape(format!("sample {} has {} features, expected {d}", s.sample_id, s.features.len())));
            }
            if s.treatment >= self.treatments.len() {
                return Err(Error::Invalid(format!("sample {} has treatment index {}", s.sample_id, s.treatment)));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("sample {} has a non-finite feature", s.sample_id)));
            }
        }
        if self.embedding_dim > d {
            return Err(Error::Shape(format!("embedding block {} wider than {d} features", self.embedding_dim)));
        }
        Ok(())
    }

    /// Splits by a seeded shuffle, `fraction` of the samples going to the first part.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(UpliftData, UpliftData)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Invalid(format!("split fraction {fraction} outside (0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mvgr_tensor::derive_seed(seed, "uplift.split"));
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let cut = (self.samples.len() as f64 * fraction).round() as usize;
        let (a, b) = idx.split_at(cut);
        let part = |ix: &[usize]| {
            let mut ix = ix.to_vec();
            ix.sort_unstable();
            UpliftData {
                treatments: self.treatments.clone(),
                samples: ix.iter().map(|&i| self.samples[i].clone()).collect(),
                embedding_dim: self.embedding_dim,
            }
        };
        Ok((part(a), part(b)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpliftGenConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub n_features: usize,
    pub treatments: TreatmentSet,
}

impl Default for UpliftGenConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_samples: 12_000,
            n_features: 6,
            treatments: TreatmentSet::default(),
        }
    }
}

impl UpliftGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if self.n_features < 3 {
            return Err(Error::Config(format!("n_features = {} must be at least 3", self.n_features)));
        }
        Ok(())
    }
}

/// Baseline log-odds shift of each archetype.
fn archetype_base(a: Archetype) -> f64 {
    match a {
        Archetype::Downtown => 0.3,
        Archetype::Residential => 0.0,
        Archetype::Industrial => -0.2,
        Archetype::Rural => -0.4,
    }
}

/// How strongly each archetype responds to a subsidy, in log-odds per unit depth.
fn archetype_sensitivity(a: Archetype) -> f64 {
    match a {
        Archetype::Downtown => -0.3,
        Archetype::Residential => 1.2,
        Archetype::Industrial => 0.2,
        Archetype::Rural => 0.7,
    }
}

/// Depth of treatment `t` out of `n`: zero for control, rising to one for the last.
pub fn treatment_depth(t: usize, n: usize) -> f64 {
    if t == 0 || n < 2 {
        0.0
    } else {
        0.4 + 0.6 * (t - 1) as f64 / (n - 2).max(1) as f64
    }
}

/// Ground-truth conversion probability used by the generator.
pub fn conversion_probability(archetype: Archetype, treatment: usize, n_treatments: usize, x: &[f64]) -> f64 {
    let depth = treatment_depth(treatment, n_treatments);
    let logit = -0.8 + 0.6 * x[0] - 0.4 * x[1] + archetype_base(archetype) + depth * (archetype_sensitivity(archetype) + 0.5 * x[2]);
    1.0 / (1.0 + (-logit).exp())
}

/// Randomized-trial samples: each one lives in a uniformly drawn county and
/// receives a uniformly drawn treatment.
pub fn generate_uplift(city: &City, cfg: &UpliftGenConfig) -> Result<UpliftData> {
    cfg.validate()?;
    if city.counties.is_empty() {
        return Err(Error::Invalid("city has no counties".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mvgr_tensor::derive_seed(cfg.seed, "uplift.samples"));
    let nt = cfg.treatments.len();
    let samples = (0..cfg.n_samples)
        .map(|sample_id| {
            let county = &city.counties[rng.gen_range(0..city.counties.len())];
            let treatment = rng.gen_range(0..nt);
            let features: Vec<f64> = (0..cfg.n_features).map(|_| rng.sample(StandardNormal)).collect();
            let p = conversion_probability(county.archetype, treatment, nt, &features);
            UpliftSample {
                sample_id,
                region_id: county.id,
                treatment,
                converted: rng.gen::<f64>() < p,
                features,
            }
        })
        .collect();
    Ok(UpliftData {
        treatments: cfg.treatments.clone(),
        samples,
        embedding_dim: 0,
    })
}

/// Appends the library vector of each sample's region at `level`.
pub fn augment_features(data: &UpliftData, library: &[EmbeddingRecord], level: Level) -> Result<UpliftData> {
    let by_region: HashMap<usize, &EmbeddingRecord> = library.iter().filter(|r| r.level == level).map(|r| (r.region_id, r)).collect();
    let dim = by_region.values().next().map_or(0, |r| r.vector.len());
    let mut samples = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let rec = by_region
            .get(&s.region_id)
            .ok_or_else(|| Error::MissingArtifact(format!("no {level} embedding for region {}", s.region_id)))?;
        if rec.vector.len() != dim {
            return Err(Error::Shape(format!("region {} has a {}-dimensional vector, expected {dim}", s.region_id, rec.vector.len())));
        }
        let mut s = s.clone();
        s.features.extend(rec.vector.iter().map(|&v| f64::from(v)));
        samples.push(s);
    }
    Ok(UpliftData {
        treatments: data.treatments.clone(),
        samples,
        embedding_dim: data.embedding_dim + dim,
    })
}

pub fn write_samples_csv(path: &Path, data: &UpliftData) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "region_id".into(), "treatment".into(), "converted".into()];
    header.extend((0..data.feature_dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for s in &data.samples {
        let mut row = vec![
            s.sample_id.to_string(),
            s.region_id.to_string(),
            data.treatments.name(s.treatment).to_string(),
            u8::from(s.converted).to_string(),
        ];
        row.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_samples_csv(path: &Path, treatments: &TreatmentSet) -> Result<UpliftData> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("no samples file at {}", path.display())));
    }
    let file = path.display().to_string();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    let fixed = ["sample_id", "region_id", "treatment", "converted"];
    let ok = header.len() >= 4
        && header.iter().take(4).eq(fixed)
        && header.iter().skip(4).enumerate().all(|(i, h)| h == format!("f{i}"));
    if !ok {
        return Err(Error::Parse {
            file,
            line: 1,
            msg: format!("expected header {}", fixed.join(",") + ",f0..fn"),
        });
    }
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse {
            file: file.clone(),
            line,
            msg,
        };
        let int = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(format!("column {}: {e}", fixed[i])));
        let converted = match &rec[3] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("converted must be 0 or 1, got {other:?}"))),
        };
        let treatment = treatments.index(&rec[2]).map_err(|e| bad(e.to_string()))?;
        let features = rec
            .iter()
            .skip(4)
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("feature {v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(UpliftSample {
            sample_id: int(0)?,
            region_id: int(1)?,
            treatment,
            converted,
            features,
        });
    }
    let data = UpliftData {
        treatments: treatments.clone(),
        samples,
        embedding_dim: 0,
    };
    data.validate()?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_is_monotone_and_zero_for_control() {
        assert_eq!(treatment_depth(0, 6), 0.0);
        assert!((1..5).all(|t| treatment_depth(t, 6) < treatment_depth(t + 1, 6)));
        assert!((treatment_depth(5, 6) - 1.0).abs() < 1e-12);
    }
}
