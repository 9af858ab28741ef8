//! Hexagonal grid, counties and POIs of a synthetic city.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EDGE_M: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Downtown,
    Residential,
    Industrial,
    Rural,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::Downtown,
        Archetype::Residential,
        Archetype::Industrial,
        Archetype::Rural,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Downtown => "downtown",
            Archetype::Residential => "residential",
            Archetype::Industrial => "industrial",
            Archetype::Rural => "rural",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Relative POI density.
    fn poi_density(self) -> f64 {
        match self {
            Archetype::Downtown => 2.0,
            Archetype::Residential => 1.2,
            Archetype::Industrial => 0.8,
            Archetype::Rural => 0.4,
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Two-tier POI taxonomy; secondary `s` belongs to primary `secondary_to_primary[s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryVocab {
    pub primary_names: Vec<String>,
    pub secondary_names: Vec<String>,
    pub secondary_to_primary: Vec<usize>,
}

const DEFAULT_PRIMARY: [&str; 6] = [
    "Shopping & Dining",
    "Residential",
    "Industry & Logistics",
    "Nature & Agriculture",
    "Business Offices",
    "Education & Health",
];

const DEFAULT_SECONDARY: [[&str; 3]; 6] = [
    ["Shopping Mall", "Chinese Restaurant", "Snacks & Fast Food"],
    ["Residential Complex", "Convenience Store", "Community Center"],
    ["Factory", "Warehouse", "Logistics Park"],
    ["Farm", "Scenic Park", "Village Committee"],
    ["Office Tower", "Companies & Enterprises", "Government Agency"],
    ["School", "Hospital", "Clinic"],
];

impl CategoryVocab {
    /// `n_primary` primaries and `n_secondary` secondaries assigned round-robin
    /// (`secondary % n_primary`). The 6/18 default uses descriptive names.
    pub fn generate(n_primary: usize, n_secondary: usize) -> Result<Self> {
        if n_primary == 0 || n_secondary == 0 {
            return Err(Error::Config("vocabulary needs at least one primary and one secondary category".into()));
        }
        if n_secondary < n_primary {
            return Err(Error::Config(format!(
                "{n_secondary} secondary categories cannot cover {n_primary} primaries"
            )));
        }
        let default = n_primary == 6 && n_secondary == 18;
        let primary_names = (0..n_primary)
            .map(|p| if default { DEFAULT_PRIMARY[p].to_string() } else { format!("primary_{p}") })
            .collect();
        let secondary_to_primary: Vec<usize> = (0..n_secondary).map(|s| s % n_primary).collect();
        let secondary_names = (0..n_secondary)
            .map(|s| {
                if default {
                    DEFAULT_SECONDARY[s % 6][s / 6].to_string()
                } else {
                    format!("secondary_{s}")
                }
            })
            .collect();
        Ok(Self {
            primary_names,
            secondary_names,
            secondary_to_primary,
        })
    }

    pub fn n_primary(&self) -> usize {
        self.primary_names.len()
    }

    pub fn n_secondary(&self) -> usize {
        self.secondary_names.len()
    }

    pub fn primary_of(&self, secondary: usize) -> usize {
        self.secondary_to_primary[secondary]
    }

    pub fn secondaries_of(&self, primary: usize) -> Vec<usize> {
        (0..self.n_secondary()).filter(|&s| self.secondary_to_primary[s] == primary).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.secondary_to_primary.len() != self.secondary_names.len() {
            return Err(Error::Invalid("vocabulary map length differs from secondary names".into()));
        }
        if let Some(bad) = self.secondary_to_primary.iter().find(|&&p| p >= self.primary_names.len()) {
            return Err(Error::Invalid(format!("secondary category maps to unknown primary {bad}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub id: usize,
    pub q: i32,
    pub r: i32,
    pub x: f64,
    pub y: f64,
    pub county: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct County {
    pub id: usize,
    pub grids: Vec<usize>,
    pub archetype: Archetype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub primary: usize,
    pub secondary: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeCount {
    pub archetype: Archetype,
    pub counties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CityConfig {
    pub seed: u64,
    /// Hex rings around the center cell; `3R(R+1) + 1` grids in total.
    pub hex_radius: u32,
    pub edge_m: f64,
    pub archetype_mix: Vec<ArchetypeCount>,
    pub n_primary: usize,
    pub n_secondary: usize,
    /// Mean POIs per grid before the archetype density factor.
    pub pois_per_grid: f64,
}

impl Default for CityConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hex_radius: 6,
            edge_m: DEFAULT_EDGE_M,
            archetype_mix: Archetype::ALL
                .into_iter()
                .map(|archetype| ArchetypeCount { archetype, counties: 2 })
                .collect(),
            n_primary: 6,
            n_secondary: 18,
            pois_per_grid: 12.0,
        }
    }
}

impl CityConfig {
    pub fn n_counties(&self) -> usize {
        self.archetype_mix.iter().map(|a| a.counties).sum()
    }

    pub fn n_grids(&self) -> usize {
        let r = self.hex_radius as usize;
        3 * r * (r + 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_counties() == 0 {
            return Err(Error::Config("archetype_mix declares zero counties".into()));
        }
        if self.n_counties() > self.n_grids() {
            return Err(Error::Config(format!(
                "{} counties cannot partition {} grids",
                self.n_counties(),
                self.n_grids()
            )));
        }
        if !(self.edge_m > 0.0) {
            return Err(Error::Config("edge_m must be positive".into()));
        }
        if !(self.pois_per_grid >= 0.0) {
            return Err(Error::Config("pois_per_grid must be nonnegative".into()));
        }
        CategoryVocab::generate(self.n_primary, self.n_secondary).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct City {
    pub edge_m: f64,
    pub grids: Vec<GridCell>,
    pub counties: Vec<County>,
    pub pois: Vec<Poi>,
    pub vocab: CategoryVocab,
}

impl City {
    pub fn n_grids(&self) -> usize {
        self.grids.len()
    }

    pub fn n_counties(&self) -> usize {
        self.counties.len()
    }

    /// POI indices per grid, in POI order.
    pub fn pois_by_grid(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.grids.len()];
        for (i, p) in self.pois.iter().enumerate() {
            if let Some(g) = self.locate(p.x, p.y) {
                out[g].push(i);
            }
        }
        out
    }

    /// Grid containing the planar point, if any.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        let (q, r) = point_to_axial(x, y, self.edge_m);
        self.grids.iter().position(|g| g.q == q && g.r == r)
    }

    pub fn county_of_grid(&self) -> Vec<usize> {
        self.grids.iter().map(|g| g.county).collect()
    }

    pub fn archetypes(&self) -> Vec<Archetype> {
        self.counties.iter().map(|c| c.archetype).collect()
    }

    /// Checks the partition and vocabulary invariants.
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        let mut seen = vec![false; self.grids.len()];
        for c in &self.counties {
            if c.grids.is_empty() {
                return Err(Error::Invalid(format!("county {} has no grids", c.id)));
            }
            for &g in &c.grids {
                if g >= seen.len() || seen[g] || self.grids[g].county != c.id {
                    return Err(Error::Invalid(format!("grid {g} breaks the county partition")));
                }
                seen[g] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid("some grids belong to no county".into()));
        }
        for p in &self.pois {
            if p.secondary >= self.vocab.n_secondary() || self.vocab.primary_of(p.secondary) != p.primary {
                return Err(Error::Invalid(format!("poi {} has inconsistent categories", p.id)));
            }
        }
        Ok(())
    }
}

/// Pointy-top axial coordinates to planar center.
pub fn axial_to_point(q: i32, r: i32, edge: f64) -> (f64, f64) {
    let x = edge * 3f64.sqrt() * (q as f64 + r as f64 / 2.0);
    let y = edge * 1.5 * r as f64;
    (x, y)
}

/// Planar point to the axial coordinates of the containing hexagon.
pub fn point_to_axial(x: f64, y: f64, edge: f64) -> (i32, i32) {
    let qf = (3f64.sqrt() / 3.0 * x - y / 3.0) / edge;
    let rf = (2.0 / 3.0 * y) / edge;
    cube_round(qf, rf)
}

fn cube_round(qf: f64, rf: f64) -> (i32, i32) {
    let sf = -qf - rf;
    let (mut q, mut r, s) = (qf.round(), rf.round(), sf.round());
    let (dq, dr, ds) = ((q - qf).abs(), (r - rf).abs(), (s - sf).abs());
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    (q as i32, r as i32)
}

fn inside_hex(dx: f64, dy: f64, edge: f64) -> bool {
    let half_w = edge * 3f64.sqrt() / 2.0;
    dx.abs() <= half_w && dy.abs() + dx.abs() / 3f64.sqrt() <= edge
}

/// Affinity of an archetype for a primary category.
pub(crate) fn category_weight(archetype: Archetype, primary: usize) -> f64 {
    if primary % 4 == archetype.index() {
        6.0
    } else {
        1.0
    }
}

pub fn generate_city(config: &CityConfig) -> Result<City> {
    config.validate()?;
    let vocab = CategoryVocab::generate(config.n_primary, config.n_secondary)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let radius = config.hex_radius as i32;

    let mut coords = Vec::new();
    for r in -radius..=radius {
        for q in -radius..=radius {
            if (q + r).abs() <= radius {
                coords.push((q, r));
            }
        }
    }
    let centers: Vec<(f64, f64)> = coords.iter().map(|&(q, r)| axial_to_point(q, r, config.edge_m)).collect();
    let dist2 = |a: usize, b: usize| {
        let (dx, dy) = (centers[a].0 - centers[b].0, centers[a].1 - centers[b].1);
        dx * dx + dy * dy
    };

    // Farthest-point county seeds, then nearest-seed assignment.
    let n_counties = config.n_counties();
    let mut seeds = vec![rng.gen_range(0..coords.len())];
    while seeds.len() < n_counties {
        let next = (0..coords.len())
            .filter(|g| !seeds.contains(g))
            .map(|g| (g, seeds.iter().map(|&s| dist2(g, s)).fold(f64::INFINITY, f64::min)))
            .fold((usize::MAX, f64::NEG_INFINITY), |best, cand| if cand.1 > best.1 { cand } else { best })
            .0;
        seeds.push(next);
    }
    let mut grids = Vec::with_capacity(coords.len());
    for (id, (&(q, r), &(x, y))) in coords.iter().zip(&centers).enumerate() {
        let county = (0..n_counties)
            .map(|c| (c, dist2(id, seeds[c])))
            .fold((0, f64::INFINITY), |best, cand| if cand.1 < best.1 { cand } else { best })
            .0;
        grids.push(GridCell { id, q, r, x, y, county });
    }

    let mut tags: Vec<Archetype> = config
        .archetype_mix
        .iter()
        .flat_map(|a| std::iter::repeat_n(a.archetype, a.counties))
        .collect();
    tags.shuffle(&mut rng);
    let counties: Vec<County> = (0..n_counties)
        .map(|c| County {
            id: c,
            grids: grids.iter().filter(|g| g.county == c).map(|g| g.id).collect(),
            archetype: tags[c],
        })
        .collect();

    let mut pois = Vec::new();
    for g in &grids {
        let arch = counties[g.county].archetype;
        let mean = config.pois_per_grid * arch.poi_density();
        let count = (mean * rng.gen_range(0.5..1.5)).round() as usize;
        let weights: Vec<f64> = (0..vocab.n_primary()).map(|p| category_weight(arch, p)).collect();
        let total: f64 = weights.iter().sum();
        for _ in 0..count {
            let (dx, dy) = loop {
                let dx = rng.gen_range(-config.edge_m..config.edge_m);
                let dy = rng.gen_range(-config.edge_m..config.edge_m);
                // Keep a small margin so points never sit on a shared edge.
                if inside_hex(dx, dy, config.edge_m * 0.98) {
                    break (dx, dy);
                }
            };
            let mut u = rng.gen_range(0.0..total);
            let mut primary = 0;
            for (p, w) in weights.iter().enumerate() {
                if u < *w {
                    primary = p;
                    break;
                }
                u -= w;
            }
            let options = vocab.secondaries_of(primary);
            let secondary = options[rng.gen_range(0..options.len())];
            pois.push(Poi {
                id: pois.len(),
                x: g.x + dx,
                y: g.y + dy,
                primary,
                secondary,
            });
        }
    }

    let city = City {
        edge_m: config.edge_m,
        grids,
        counties,
        pois,
        vocab,
    };
    city.validate()?;
    Ok(city)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(radius: u32, mix: &[(Archetype, usize)]) -> CityConfig {
        CityConfig {
            hex_radius: radius,
            archetype_mix: mix
                .iter()
                .map(|&(archetype, counties)| ArchetypeCount { archetype, counties })
                .collect(),
            ..CityConfig::default()
        }
    }

    #[test]
    fn one_county_seven_grids() {
        let city = generate_city(&single(1, &[(Archetype::Downtown, 1)])).unwrap();
        assert_eq!(city.grids.len(), 7);
        assert!(city.grids.iter().all(|g| g.county == 0));
        assert_eq!(city.counties[0].grids.len(), 7);
    }

    #[test]
    fn archetype_counts_match_mix() {
        let city = generate_city(&CityConfig::default()).unwrap();
        assert_eq!(city.counties.len(), 8);
        for a in Archetype::ALL {
            assert_eq!(city.counties.iter().filter(|c| c.archetype == a).count(), 2);
        }
        let total: usize = city.counties.iter().map(|c| c.grids.len()).sum();
        assert_eq!(total, city.grids.len());
        assert_eq!(city.grids.len(), 127);
    }

    #[test]
    fn deterministic_for_seed() {
        let a = serde_json::to_string(&generate_city(&CityConfig::default()).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_city(&CityConfig::default()).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&generate_city(&CityConfig { seed: 1, ..CityConfig::default() }).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_empty_configs() {
        assert!(generate_city(&single(2, &[])).is_err());
        assert!(generate_city(&CityConfig { n_primary: 0, ..CityConfig::default() }).is_err());
        assert!(generate_city(&single(0, &[(Archetype::Rural, 2)])).is_err());
    }

    #[test]
    fn pois_fall_inside_their_grid() {
        let city = generate_city(&CityConfig::default()).unwrap();
        let by_grid = city.pois_by_grid();
        assert_eq!(by_grid.iter().map(Vec::len).sum::<usize>(), city.pois.len());
    }

    #[test]
    fn hex_round_trip() {
        for q in -3..=3 {
            for r in -3..=3 {
                let (x, y) = axial_to_point(q, r, 600.0);
                assert_eq!(point_to_axial(x, y, 600.0), (q, r));
            }
        }
    }

    #[test]
    fn vocabulary_map_is_total() {
        let v = CategoryVocab::generate(18, 218).unwrap();
        assert_eq!(v.n_secondary(), 218);
        for p in 0..18 {
            assert!(!v.secondaries_of(p).is_empty());
        }
    }
}
