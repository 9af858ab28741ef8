//! Half-hourly Call/TSH panels with rainfall, holiday and event covariates.

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::city::{Archetype, City};
use crate::error::{Error, Result};

pub const STEPS_PER_DAY: usize = 48;
pub const STEPS_PER_WEEK: usize = 336;
pub const DEFAULT_HOLIDAY_TYPES: u8 = 3;
pub const DEFAULT_EVENT_TYPES: u8 = 4;

/// Holiday codes: 0 none, 1 public holiday, 2 festival eve, 3 school vacation day.
pub const HOLIDAY_NAMES: [&str; 4] = ["none", "public holiday", "festival eve", "school vacation"];
/// Event codes: 0 none, 1 concert, 2 sports match, 3 exhibition, 4 transit disruption.
pub const EVENT_NAMES: [&str; 5] = ["none", "concert", "sports match", "exhibition", "transit disruption"];

/// Calendar position of step `t` for a panel starting at `start`.
pub fn weekday_hour(start: NaiveDateTime, t: usize) -> (usize, usize) {
    let ts = start + Duration::minutes(30 * t as i64);
    (ts.weekday().num_days_from_monday() as usize, ts.hour() as usize)
}

pub fn is_half_hour_aligned(ts: NaiveDateTime) -> bool {
    ts.second() == 0 && ts.nanosecond() == 0 && (ts.minute() == 0 || ts.minute() == 30)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPanel {
    pub start: NaiveDateTime,
    pub region_ids: Vec<usize>,
    /// `call[region][step]`
    pub call: Vec<Vec<f64>>,
    /// `tsh[region][step]`
    pub tsh: Vec<Vec<f64>>,
}

impl SeriesPanel {
    pub fn steps(&self) -> usize {
        self.call.first().map_or(0, Vec::len)
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::minutes(30 * t as i64)
    }

    pub fn weekday_hour(&self, t: usize) -> (usize, usize) {
        weekday_hour(self.start, t)
    }

    pub fn indicator(&self, ind: Indicator) -> &[Vec<f64>] {
        match ind {
            Indicator::Call => &self.call,
            Indicator::Tsh => &self.tsh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !is_half_hour_aligned(self.start) {
            return Err(Error::Invalid(format!("panel start {} is not half-hour aligned", self.start)));
        }
        let n = self.steps();
        if self.call.len() != self.region_ids.len() || self.tsh.len() != self.region_ids.len() {
            return Err(Error::Shape("panel columns do not match region count".into()));
        }
        for (r, (c, s)) in self.call.iter().zip(&self.tsh).enumerate() {
            if c.len() != n || s.len() != n {
                return Err(Error::Shape(format!("region {} has ragged series", self.region_ids[r])));
            }
            if c.iter().chain(s).any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Invalid(format!("region {} has negative or non-finite values", self.region_ids[r])));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Indicator {
    #[serde(rename = "call")]
    Call,
    #[serde(rename = "tsh")]
    Tsh,
}

impl Indicator {
    pub const ALL: [Indicator; 2] = [Indicator::Call, Indicator::Tsh];

    pub fn name(self) -> &'static str {
        match self {
            Indicator::Call => "call",
            Indicator::Tsh => "tsh",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Indicator::Call => "ride requests per half hour",
            Indicator::Tsh => "driver in-service hours per half hour",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExogenousPanel {
    /// `rainfall[region][step]` in mm.
    pub rainfall: Vec<Vec<f64>>,
    /// Shared across regions.
    pub holiday: Vec<u8>,
    /// `event[region][step]`
    pub event: Vec<Vec<u8>>,
    pub n_holiday_types: u8,
    pub n_event_types: u8,
}

impl ExogenousPanel {
    pub fn empty(regions: usize, steps: usize) -> Self {
        Self {
            rainfall: vec![vec![0.0; steps]; regions],
            holiday: vec![0; steps],
            event: vec![vec![0; steps]; regions],
            n_holiday_types: DEFAULT_HOLIDAY_TYPES,
            n_event_types: DEFAULT_EVENT_TYPES,
        }
    }

    pub fn validate(&self, panel: &SeriesPanel) -> Result<()> {
        let (n, r) = (panel.steps(), panel.n_regions());
        if self.holiday.len() != n || self.rainfall.len() != r || self.event.len() != r {
            return Err(Error::Shape("exogenous panel does not align with the series panel".into()));
        }
        if self.rainfall.iter().any(|c| c.len() != n) || self.event.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("exogenous columns have the wrong length".into()));
        }
        if self.rainfall.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("rainfall must be finite and nonnegative".into()));
        }
        if self.holiday.iter().any(|&h| h > self.n_holiday_types) {
            return Err(Error::Invalid(format!("holiday code above {}", self.n_holiday_types)));
        }
        if self.event.iter().flatten().any(|&e| e > self.n_event_types) {
            return Err(Error::Invalid(format!("event code above {}", self.n_event_types)));
        }
        Ok(())
    }
}

/// Hour-by-weekday mean levels for one archetype, `[weekday][hour]`.
pub type HourDay = [[f64; 24]; 7];

/// Call and TSH templates for every archetype.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub call: [HourDay; 4],
    pub tsh: [HourDay; 4],
}

fn bump(h: f64, center: f64, width: f64) -> f64 {
    let d = (h - center).abs().min(24.0 - (h - center).abs());
    (-(d * d) / (2.0 * width * width)).exp()
}

fn call_level(a: Archetype, weekday: usize, hour: usize) -> f64 {
    let h = hour as f64;
    let weekend = weekday >= 5;
    let friday = weekday == 4;
    match a {
        Archetype::Downtown => {
            if weekend {
                40.0 + 70.0 * bump(h, 13.0, 3.0) + 110.0 * bump(h, 20.0, 2.0)
            } else {
                35.0 + 160.0 * bump(h, 8.5, 1.2) + 60.0 * bump(h, 12.5, 1.5)
                    + 190.0 * bump(h, 18.5, 1.5)
                    + if friday { 90.0 * bump(h, 22.0, 1.5) } else { 0.0 }
            }
        }
        Archetype::Residential => {
            if weekend {
                25.0 + 90.0 * bump(h, 10.5, 2.0) + 60.0 * bump(h, 17.0, 2.5)
            } else {
                20.0 + 170.0 * bump(h, 7.5, 1.0) + 30.0 * bump(h, 13.0, 2.0) + 80.0 * bump(h, 20.0, 1.5)
            }
        }
        Archetype::Industrial => {
            let shifts = 120.0 * bump(h, 7.0, 0.8) + 110.0 * bump(h, 15.0, 0.8) + 70.0 * bump(h, 23.0, 0.8);
            if weekend {
                15.0 + 0.35 * shifts
            } else {
                15.0 + shifts
            }
        }
        Archetype::Rural => {
            let day = 25.0 * bump(h, 11.0, 3.0) + 15.0 * bump(h, 17.0, 2.0);
            if weekend {
                8.0 + 1.4 * day
            } else {
                8.0 + day
            }
        }
    }
}

impl Default for Templates {
    fn default() -> Self {
        let mut call = [[[0.0; 24]; 7]; 4];
        let mut tsh = [[[0.0; 24]; 7]; 4];
        for a in Archetype::ALL {
            for w in 0..7 {
                for h in 0..24 {
                    call[a.index()][w][h] = call_level(a, w, h);
                }
            }
            // Supply lags and smooths demand.
            for w in 0..7 {
                for h in 0..24 {
                    let prev = if h == 0 { call[a.index()][(w + 6) % 7][23] } else { call[a.index()][w][h - 1] };
                    let next = if h == 23 { call[a.index()][(w + 1) % 7][0] } else { call[a.index()][w][h + 1] };
                    let cur = call[a.index()][w][h];
                    tsh[a.index()][w][h] = 0.3 * (0.4 * prev + 0.4 * cur + 0.2 * next) + 4.0;
                }
            }
        }
        Self { call, tsh }
    }
}

impl Templates {
    pub fn constant(c: f64) -> Self {
        Self {
            call: [[[c; 24]; 7]; 4],
            tsh: [[[c; 24]; 7]; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PanelConfig {
    pub seed: u64,
    pub weeks: usize,
    pub start: NaiveDateTime,
    /// Relative standard deviation of multiplicative noise on Call (TSH uses half).
    pub noise: f64,
    pub holidays: bool,
    pub holiday_probability: f64,
    pub events: bool,
    /// Probability of an event per region per day.
    pub event_density: f64,
    pub rain: bool,
    /// Probability of a city-wide rain episode per day.
    pub rain_probability: f64,
    pub n_holiday_types: u8,
    pub n_event_types: u8,
}

impl Default for PanelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            weeks: 23,
            start: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
            noise: 0.05,
            holidays: true,
            holiday_probability: 0.04,
            events: true,
            event_density: 0.2,
            rain: true,
            rain_probability: 0.12,
            n_holiday_types: DEFAULT_HOLIDAY_TYPES,
            n_event_types: DEFAULT_EVENT_TYPES,
        }
    }
}

impl PanelConfig {
    /// Everything off: the output is the templates tiled weekly.
    pub fn quiet(weeks: usize) -> Self {
        Self {
            weeks,
            noise: 0.0,
            holidays: false,
            events: false,
            rain: false,
            ..Self::default()
        }
    }

    pub fn steps(&self) -> usize {
        self.weeks * STEPS_PER_WEEK
    }

    pub fn validate(&self) -> Result<()> {
        if self.weeks == 0 {
            return Err(Error::Config("weeks must be at least 1".into()));
        }
        if !is_half_hour_aligned(self.start) {
            return Err(Error::Config(format!("start {} is not half-hour aligned", self.start)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        for (name, p) in [
            ("holiday_probability", self.holiday_probability),
            ("event_density", self.event_density),
            ("rain_probability", self.rain_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.n_holiday_types == 0 || self.n_event_types == 0 {
            return Err(Error::Config("holiday and event vocabularies need at least one code".into()));
        }
        Ok(())
    }
}

/// Effect sizes drawn once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effects {
    /// `holiday[type - 1][archetype]`
    pub holiday: Vec<[f64; 4]>,
    /// `event[type - 1][archetype]`, applied to Call; TSH receives half the lift.
    pub event: Vec<[f64; 4]>,
    /// Call lift per 10 mm/h-equivalent of rain, per archetype.
    pub rain_call: [f64; 4],
    /// TSH drop per 10 mm of rain, per archetype.
    pub rain_tsh: [f64; 4],
}

impl Effects {
    fn draw(rng: &mut ChaCha8Rng, n_holiday: u8, n_event: u8) -> Self {
        let holiday = (0..n_holiday)
            .map(|_| {
                let mut row = [0.0; 4];
                for v in &mut row {
                    *v = rng.gen_range(0.55..1.35);
                }
                row
            })
            .collect();
        let event = (0..n_event)
            .map(|_| {
                let mut row = [0.0; 4];
                for v in &mut row {
                    *v = rng.gen_range(1.3..2.2);
                }
                row
            })
            .collect();
        let mut rain_call = [0.0; 4];
        let mut rain_tsh = [0.0; 4];
        for a in 0..4 {
            rain_call[a] = rng.gen_range(0.3..0.6);
            rain_tsh[a] = rng.gen_range(0.15..0.35);
        }
        Self {
            holiday,
            event,
            rain_call,
            rain_tsh,
        }
    }

    pub fn for_config(config: &PanelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mvgr_tensor::derive_seed(config.seed, "panel.effects"));
        Self::draw(&mut rng, config.n_holiday_types, config.n_event_types)
    }
}

fn rain_response(mm: f64) -> f64 {
    mm.min(10.0) / 10.0
}

/// Region-level panel for every county of `city`.
pub fn generate_panel(city: &City, config: &PanelConfig) -> Result<(SeriesPanel, ExogenousPanel)> {
    generate_panel_with(city, config, &Templates::default())
}

pub fn generate_panel_with(city: &City, config: &PanelConfig, templates: &Templates) -> Result<(SeriesPanel, ExogenousPanel)> {
    config.validate()?;
    let steps = config.steps();
    let days = steps / STEPS_PER_DAY;
    let n = city.n_counties();
    let effects = Effects::for_config(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut exo = ExogenousPanel::empty(n, steps);
    exo.n_holiday_types = config.n_holiday_types;
    exo.n_event_types = config.n_event_types;

    if config.holidays {
        for d in 0..days {
            if rng.gen_bool(config.holiday_probability) {
                let code = rng.gen_range(1..=config.n_holiday_types);
                exo.holiday[d * STEPS_PER_DAY..(d + 1) * STEPS_PER_DAY].fill(code);
            }
        }
    }
    if config.rain {
        for d in 0..days {
            if !rng.gen_bool(config.rain_probability) {
                continue;
            }
            let start = d * STEPS_PER_DAY + rng.gen_range(0..STEPS_PER_DAY);
            let len = rng.gen_range(4..=16);
            let intensity = rng.gen_range(1.0..8.0);
            for c in 0..n {
                if rng.gen_bool(0.2) {
                    continue;
                }
                let local = intensity * rng.gen_range(0.5..1.5);
                for t in start..(start + len).min(steps) {
                    exo.rainfall[c][t] = local;
                }
            }
        }
    }
    if config.events {
        for c in 0..n {
            for d in 0..days {
                if !rng.gen_bool(config.event_density) {
                    continue;
                }
                let code = rng.gen_range(1..=config.n_event_types);
                let start = d * STEPS_PER_DAY + rng.gen_range(16..40);
                let len = rng.gen_range(4..=10);
                for t in start..(start + len).min(steps) {
                    exo.event[c][t] = code;
                }
            }
        }
    }

    let mut call = vec![vec![0.0; steps]; n];
    let mut tsh = vec![vec![0.0; steps]; n];
    for (c, county) in city.counties.iter().enumerate() {
        let a = county.archetype.index();
        for t in 0..steps {
            let (w, h) = weekday_hour(config.start, t);
            let mut m_call = 1.0;
            let mut m_tsh = 1.0;
            let hol = exo.holiday[t];
            if hol > 0 {
                m_call *= effects.holiday[hol as usize - 1][a];
                m_tsh *= effects.holiday[hol as usize - 1][a];
            }
            let ev = exo.event[c][t];
            if ev > 0 {
                let f = effects.event[ev as usize - 1][a];
                m_call *= f;
                m_tsh *= 1.0 + 0.5 * (f - 1.0);
            }
            let rain = exo.rainfall[c][t];
            if rain > 0.0 {
                m_call *= 1.0 + effects.rain_call[a] * rain_response(rain);
                m_tsh *= 1.0 - effects.rain_tsh[a] * rain_response(rain);
            }
            let mut vc = templates.call[a][w][h] * m_call;
            let mut vt = templates.tsh[a][w][h] * m_tsh;
            if config.noise > 0.0 {
                let e1: f64 = StandardNormal.sample(&mut rng);
                let e2: f64 = StandardNormal.sample(&mut rng);
                vc *= (1.0 + config.noise * e1).max(0.0);
                vt *= (1.0 + 0.5 * config.noise * e2).max(0.0);
            }
            call[c][t] = vc;
            tsh[c][t] = vt;
        }
    }

    let panel = SeriesPanel {
        start: config.start,
        region_ids: city.counties.iter().map(|c| c.id).collect(),
        call,
        tsh,
    };
    panel.validate()?;
    exo.validate(&panel)?;
    Ok((panel, exo))
}

/// Grid-level Call activity used for mobility profiles.
///
/// Each grid follows its county's archetype template blended with a small
/// share of the city-wide mean template, scaled by the grid's POI count.
pub fn generate_grid_activity(city: &City, config: &PanelConfig) -> Result<SeriesPanel> {
    config.validate()?;
    let templates = Templates::default();
    let steps = config.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(mvgr_tensor::derive_seed(config.seed, "grid.activity"));
    let poi_counts: Vec<usize> = city.pois_by_grid().iter().map(Vec::len).collect();
    let mean_pois = (poi_counts.iter().sum::<usize>() as f64 / poi_counts.len().max(1) as f64).max(1.0);

    let mut call = Vec::with_capacity(city.n_grids());
    for (g, grid) in city.grids.iter().enumerate() {
        let a = city.counties[grid.county].archetype.index();
        let blend = rng.gen_range(0.0..0.25);
        let scale = (0.5 + poi_counts[g] as f64 / mean_pois) / 8.0;
        let mut series = Vec::with_capacity(steps);
        for t in 0..steps {
            let (w, h) = weekday_hour(config.start, t);
            let mean_t: f64 = templates.call.iter().map(|tpl| tpl[w][h]).sum::<f64>() / 4.0;
            let mut v = scale * ((1.0 - blend) * templates.call[a][w][h] + blend * mean_t);
            if config.noise > 0.0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                v *= (1.0 + config.noise * e).max(0.0);
            }
            series.push(v);
        }
        call.push(series);
    }
    let tsh = call.iter().map(|s| s.iter().map(|v| 0.3 * v).collect()).collect();
    Ok(SeriesPanel {
        start: config.start,
        region_ids: city.grids.iter().map(|g| g.id).collect(),
        call,
        tsh,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::city::{generate_city, ArchetypeCount, CityConfig};

    fn city() -> City {
        generate_city(&CityConfig {
            hex_radius: 3,
            ..CityConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn quiet_panel_reaverages_to_template() {
        let city = city();
        let (panel, _) = generate_panel(&city, &PanelConfig::quiet(2)).unwrap();
        let tpl = Templates::default();
        for (c, county) in city.counties.iter().enumerate() {
            let mut sum = [[0.0; 24]; 7];
            let mut cnt = [[0usize; 24]; 7];
            for t in 0..panel.steps() {
                let (w, h) = panel.weekday_hour(t);
                sum[w][h] += panel.call[c][t];
                cnt[w][h] += 1;
            }
            for w in 0..7 {
                for h in 0..24 {
                    assert_eq!(sum[w][h] / cnt[w][h] as f64, tpl.call[county.archetype.index()][w][h]);
                }
            }
        }
    }

    #[test]
    fn constant_template_gives_constant_series() {
        let (panel, _) = generate_panel_with(&city(), &PanelConfig::quiet(1), &Templates::constant(3.5)).unwrap();
        assert!(panel.call.iter().chain(&panel.tsh).flatten().all(|&v| v == 3.5));
    }

    #[test]
    fn same_archetype_columns_identical_without_noise() {
        let city = generate_city(&CityConfig {
            hex_radius: 2,
            archetype_mix: vec![ArchetypeCount {
                archetype: Archetype::Downtown,
                counties: 2,
            }],
            ..CityConfig::default()
        })
        .unwrap();
        let config = PanelConfig {
            noise: 0.0,
            events: false,
            rain: false,
            ..PanelConfig::default()
        };
        let (panel, _) = generate_panel(&city, &config).unwrap();
        assert_eq!(panel.call[0], panel.call[1]);
        assert_eq!(panel.tsh[0], panel.tsh[1]);
    }

    #[test]
    fn deterministic_and_aligned() {
        let city = city();
        let config = PanelConfig { weeks: 3, ..PanelConfig::default() };
        let a = generate_panel(&city, &config).unwrap();
        let b = generate_panel(&city, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.steps(), 3 * STEPS_PER_WEEK);
        assert_eq!(a.1.holiday.len(), a.0.steps());
        assert!(a.1.event.iter().flatten().any(|&e| e > 0));
    }

    #[test]
    fn zero_weeks_rejected() {
        assert!(generate_panel(&city(), &PanelConfig::quiet(0)).is_err());
    }

    #[test]
    fn grid_activity_covers_all_grids() {
        let city = city();
        let g = generate_grid_activity(&city, &PanelConfig::quiet(1)).unwrap();
        assert_eq!(g.n_regions(), city.n_grids());
        assert!(g.call.iter().flatten().all(|v| *v > 0.0));
    }
}
