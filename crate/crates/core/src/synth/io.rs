//! CSV readers and writers for panels and cities.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::city::{Archetype, CategoryVocab, City, County, GridCell, Poi};
use super::panel::{is_half_hour_aligned, ExogenousPanel, SeriesPanel, DEFAULT_EVENT_TYPES, DEFAULT_HOLIDAY_TYPES};
use crate::error::{io_err, Error, Result};

pub const PANEL_HEADER: [&str; 7] = ["timestamp", "region_id", "call", "tsh", "rainfall_mm", "holiday_code", "event_code"];
const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format(TS_FORMAT).to_string()
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(f))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn check_header(rdr: &mut csv::Reader<File>, path: &Path, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?.clone();
    if header.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::Parse {
            file: path.display().to_string(),
            line: 1,
            msg: format!("expected header `{}`", expected.join(",")),
        });
    }
    Ok(())
}

/// Long-format panel CSV, ordered by timestamp then region. Values are written
/// as binary32 decimals.
pub fn write_panel_csv(panel: &SeriesPanel, exo: &ExogenousPanel, path: &Path) -> Result<()> {
    panel.validate()?;
    exo.validate(panel)?;
    let mut w = writer(path)?;
    w.write_record(PANEL_HEADER)?;
    for t in 0..panel.steps() {
        let ts = format_timestamp(panel.timestamp(t));
        for (r, id) in panel.region_ids.iter().enumerate() {
            w.write_record([
                ts.clone(),
                id.to_string(),
                (panel.call[r][t] as f32).to_string(),
                (panel.tsh[r][t] as f32).to_string(),
                (exo.rainfall[r][t] as f32).to_string(),
                exo.holiday[t].to_string(),
                exo.event[r][t].to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PanelRow {
    timestamp: String,
    region_id: usize,
    call: f32,
    tsh: f32,
    rainfall_mm: f32,
    holiday_code: u8,
    event_code: u8,
}

pub fn read_panel_csv(path: &Path) -> Result<(SeriesPanel, ExogenousPanel)> {
    let file = path.display().to_string();
    let mut rdr = reader(path)?;
    check_header(&mut rdr, path, &PANEL_HEADER)?;
    let perr = |line: u64, msg: String| Error::Parse {
        file: file.clone(),
        line,
        msg,
    };

    let mut start: Option<NaiveDateTime> = None;
    let mut region_ids: Vec<usize> = Vec::new();
    let mut region_pos: HashMap<usize, usize> = HashMap::new();
    let mut in_first_block = true;
    let mut current_ts: Option<NaiveDateTime> = None;
    let mut seen_in_block = 0usize;
    let (mut call, mut tsh, mut rain, mut event): (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<u8>>) =
        Default::default();
    let mut holiday: Vec<u8> = Vec::new();
    let mut max_h = 0u8;
    let mut max_e = 0u8;

    let headers = rdr.headers()?.clone();
    for result in rdr.records() {
        let rec = result.map_err(|e| perr(e.position().map_or(0, |p| p.line()), format!("malformed row: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: PanelRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| perr(line, format!("malformed row: {e}")))?;
        let (v_call, v_tsh, v_rain) = (f64::from(row.call), f64::from(row.tsh), f64::from(row.rainfall_mm));
        let ts = parse_timestamp(&row.timestamp).ok_or_else(|| perr(line, format!("bad timestamp `{}`", row.timestamp)))?;
        if !is_half_hour_aligned(ts) {
            return Err(perr(line, format!("timestamp {ts} is not aligned to a half-hour boundary")));
        }
        if !(v_rain >= 0.0) || !v_rain.is_finite() {
            return Err(perr(line, format!("negative or non-finite rainfall {v_rain}")));
        }
        if !(v_call >= 0.0 && v_tsh >= 0.0) || !v_call.is_finite() || !v_tsh.is_finite() {
            return Err(perr(line, "call and tsh must be finite and nonnegative".into()));
        }
        match current_ts {
            None => {
                start = Some(ts);
                current_ts = Some(ts);
                holiday.push(row.holiday_code);
            }
            Some(cur) if cur == ts => {}
            Some(cur) => {
                if ts != cur + Duration::minutes(30) {
                    return Err(perr(line, format!("non-contiguous half-hour grid: {cur} followed by {ts}")));
                }
                if seen_in_block != region_ids.len() {
                    return Err(perr(line, format!("timestamp {cur} covers {seen_in_block} of {} regions", region_ids.len())));
                }
                in_first_block = false;
                current_ts = Some(ts);
                seen_in_block = 0;
                holiday.push(row.holiday_code);
            }
        }
        let t = holiday.len() - 1;
        if holiday[t] != row.holiday_code {
            return Err(perr(line, format!("holiday code differs across regions at {ts}")));
        }
        let r = match region_pos.get(&row.region_id) {
            Some(&r) => r,
            None if in_first_block => {
                region_pos.insert(row.region_id, region_ids.len());
                region_ids.push(row.region_id);
                call.push(Vec::new());
                tsh.push(Vec::new());
                rain.push(Vec::new());
                event.push(Vec::new());
                region_ids.len() - 1
            }
            None => return Err(perr(line, format!("region {} absent from the first timestamp", row.region_id))),
        };
        if call[r].len() != t {
            return Err(perr(line, format!("duplicate row for region {} at {ts}", row.region_id)));
        }
        call[r].push(v_call);
        tsh[r].push(v_tsh);
        rain[r].push(v_rain);
        event[r].push(row.event_code);
        max_h = max_h.max(row.holiday_code);
        max_e = max_e.max(row.event_code);
        seen_in_block += 1;
    }
    let start = start.ok_or_else(|| perr(2, "panel has no rows".into()))?;
    if seen_in_block != region_ids.len() {
        return Err(perr(0, "last timestamp does not cover every region".into()));
    }
    let panel = SeriesPanel {
        start,
        region_ids,
        call,
        tsh,
    };
    let exo = ExogenousPanel {
        rainfall: rain,
        holiday,
        event,
        n_holiday_types: max_h.max(DEFAULT_HOLIDAY_TYPES),
        n_event_types: max_e.max(DEFAULT_EVENT_TYPES),
    };
    panel.validate()?;
    exo.validate(&panel)?;
    Ok((panel, exo))
}

#[derive(Debug, Serialize, Deserialize)]
struct GridRow {
    grid_id: usize,
    q: i32,
    r: i32,
    center_x_m: f64,
    center_y_m: f64,
    county_id: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoiRow {
    poi_id: usize,
    x_m: f64,
    y_m: f64,
    primary_cat: usize,
    secondary_cat: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CountyRow {
    county_id: usize,
    archetype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabRow {
    secondary_id: usize,
    secondary_name: String,
    primary_id: usize,
    primary_name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CityMeta {
    edge_m: f64,
}

/// Writes `grids.csv`, `pois.csv`, `counties.csv`, `vocab.csv` and `city.json` into `dir`.
pub fn write_city(city: &City, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut w = writer(&dir.join("grids.csv"))?;
    for g in &city.grids {
        w.serialize(GridRow {
            grid_id: g.id,
            q: g.q,
            r: g.r,
            center_x_m: g.x,
            center_y_m: g.y,
            county_id: g.county,
        })?;
    }
    w.flush().map_err(io_err(dir.join("grids.csv")))?;

    let mut w = writer(&dir.join("pois.csv"))?;
    for p in &city.pois {
        w.serialize(PoiRow {
            poi_id: p.id,
            x_m: p.x,
            y_m: p.y,
            primary_cat: p.primary,
            secondary_cat: p.secondary,
        })?;
    }
    w.flush().map_err(io_err(dir.join("pois.csv")))?;

    let mut w = writer(&dir.join("counties.csv"))?;
    for c in &city.counties {
        w.serialize(CountyRow {
            county_id: c.id,
            archetype: c.archetype.name().to_string(),
        })?;
    }
    w.flush().map_err(io_err(dir.join("counties.csv")))?;

    write_vocab(&city.vocab, &dir.join("vocab.csv"))?;
    let meta = serde_json::to_string_pretty(&CityMeta { edge_m: city.edge_m })?;
    std::fs::write(dir.join("city.json"), meta + "\n").map_err(io_err(dir.join("city.json")))?;
    Ok(())
}

pub fn write_vocab(vocab: &CategoryVocab, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    for s in 0..vocab.n_secondary() {
        let p = vocab.primary_of(s);
        w.serialize(VocabRow {
            secondary_id: s,
            secondary_name: vocab.secondary_names[s].clone(),
            primary_id: p,
            primary_name: vocab.primary_names[p].clone(),
        })?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<T>().enumerate() {
        out.push(rec.map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: e.position().map_or(i as u64 + 2, |p| p.line()),
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_vocab(path: &Path) -> Result<CategoryVocab> {
    let rows: Vec<VocabRow> = read_rows(path)?;
    let n_p = rows.iter().map(|r| r.primary_id + 1).max().unwrap_or(0);
    let mut primary_names = vec![String::new(); n_p];
    let mut secondary_names = vec![String::new(); rows.len()];
    let mut map = vec![usize::MAX; rows.len()];
    for r in rows {
        if r.secondary_id >= map.len() {
            return Err(Error::Invalid(format!("secondary id {} is not dense", r.secondary_id)));
        }
        secondary_names[r.secondary_id] = r.secondary_name;
        primary_names[r.primary_id] = r.primary_name;
        map[r.secondary_id] = r.primary_id;
    }
    if map.contains(&usize::MAX) {
        return Err(Error::Invalid("vocabulary has duplicate secondary ids".into()));
    }
    let vocab = CategoryVocab {
        primary_names,
        secondary_names,
        secondary_to_primary: map,
    };
    vocab.validate()?;
    Ok(vocab)
}

pub fn read_city(dir: &Path) -> Result<City> {
    let meta: CityMeta = match std::fs::read_to_string(dir.join("city.json")) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => CityMeta {
            edge_m: super::city::DEFAULT_EDGE_M,
        },
    };
    let grid_rows: Vec<GridRow> = read_rows(&dir.join("grids.csv"))?;
    let grids: Vec<GridCell> = grid_rows
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            if g.grid_id != i {
                return Err(Error::Invalid(format!("grid ids must be dense and ordered; found {} at row {i}", g.grid_id)));
            }
            Ok(GridCell {
                id: g.grid_id,
                q: g.q,
                r: g.r,
                x: g.center_x_m,
                y: g.center_y_m,
                county: g.county_id,
            })
        })
        .collect::<Result<_>>()?;
    let county_rows: Vec<CountyRow> = read_rows(&dir.join("counties.csv"))?;
    let counties = county_rows
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let archetype = Archetype::parse(&c.archetype)
                .ok_or_else(|| Error::Invalid(format!("unknown archetype `{}`", c.archetype)))?;
            if c.county_id != i {
                return Err(Error::Invalid(format!("county ids must be dense and ordered; found {}", c.county_id)));
            }
            Ok(County {
                id: c.county_id,
                grids: grids.iter().filter(|g| g.county == i).map(|g| g.id).collect(),
                archetype,
            })
        })
        .collect::<Result<_>>()?;
    let pois = read_rows::<PoiRow>(&dir.join("pois.csv"))?
        .into_iter()
        .map(|p| Poi {
            id: p.poi_id,
            x: p.x_m,
            y: p.y_m,
            primary: p.primary_cat,
            secondary: p.secondary_cat,
        })
        .collect();
    let vocab = read_vocab(&dir.join("vocab.csv"))?;
    let city = City {
        edge_m: meta.edge_m,
        grids,
        counties,
        pois,
        vocab,
    };
    city.validate()?;
    Ok(city)
}

/// Grid activity as `timestamp,grid_id,call`.
pub fn write_grid_activity_csv(panel: &SeriesPanel, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["timestamp", "grid_id", "call"])?;
    for t in 0..panel.steps() {
        let ts = format_timestamp(panel.timestamp(t));
        for (r, id) in panel.region_ids.iter().enumerate() {
            w.write_record([ts.clone(), id.to_string(), (panel.call[r][t] as f32).to_string()])?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_grid_activity_csv(path: &Path) -> Result<SeriesPanel> {
    #[derive(Deserialize)]
    struct Row {
        timestamp: String,
        grid_id: usize,
        call: f32,
    }
    let rows: Vec<Row> = read_rows(path)?;
    let file = path.display().to_string();
    let mut ids: Vec<usize> = Vec::new();
    let mut pos: HashMap<usize, usize> = HashMap::new();
    let mut call: Vec<Vec<f64>> = Vec::new();
    let mut start = None;
    for (i, row) in rows.iter().enumerate() {
        let line = i as u64 + 2;
        let ts = parse_timestamp(&row.timestamp).ok_or_else(|| Error::Parse {
            file: file.clone(),
            line,
            msg: format!("bad timestamp `{}`", row.timestamp),
        })?;
        let start = *start.get_or_insert(ts);
        let r = *pos.entry(row.grid_id).or_insert_with(|| {
            ids.push(row.grid_id);
            call.push(Vec::new());
            ids.len() - 1
        });
        let expect = start + Duration::minutes(30 * call[r].len() as i64);
        if ts != expect {
            return Err(Error::Parse {
                file: file.clone(),
                line,
                msg: format!("non-contiguous half-hour grid: expected {expect}, found {ts}"),
            });
        }
        call[r].push(f64::from(row.call));
    }
    let start = start.ok_or_else(|| Error::Invalid(format!("{file} has no rows")))?;
    let tsh = call.iter().map(|s| vec![0.0; s.len()]).collect();
    let panel = SeriesPanel {
        start,
        region_ids: ids,
        call,
        tsh,
    };
    panel.validate()?;
    Ok(panel)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_city, generate_panel, CityConfig, PanelConfig};

    fn small() -> (SeriesPanel, ExogenousPanel) {
        let mut config = PanelConfig {
            weeks: 1,
            ..PanelConfig::default()
        };
        config.rain_probability = 0.5;
        let city = generate_city(&CityConfig {
            hex_radius: 2,
            archetype_mix: vec![crate::synth::ArchetypeCount {
                archetype: Archetype::Downtown,
                counties: 2,
            }],
            ..CityConfig::default()
        })
        .unwrap();
        let (mut p, mut e) = generate_panel(&city, &config).unwrap();
        p.call.iter_mut().chain(p.tsh.iter_mut()).for_each(|c| c.truncate(96));
        e.rainfall.iter_mut().for_each(|c| c.truncate(96));
        e.event.iter_mut().for_each(|c| c.truncate(96));
        e.holiday.truncate(96);
        (p, e)
    }

    #[test]
    fn panel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        let (p, e) = small();
        write_panel_csv(&p, &e, &path).unwrap();
        let (p2, e2) = read_panel_csv(&path).unwrap();
        assert_eq!(p2.steps(), 96);
        assert_eq!(p2.region_ids, p.region_ids);
        for r in 0..2 {
            for t in 0..96 {
                assert_eq!(p2.call[r][t], p.call[r][t] as f32 as f64);
                assert_eq!(p2.tsh[r][t], p.tsh[r][t] as f32 as f64);
                assert_eq!(e2.rainfall[r][t], e.rainfall[r][t] as f32 as f64);
                assert_eq!(e2.event[r][t], e.event[r][t]);
            }
        }
        assert_eq!(e2.holiday, e.holiday);
        // Second pass is exact.
        let path2 = dir.path().join("panel2.csv");
        write_panel_csv(&p2, &e2, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    fn write_lines(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        (dir, path)
    }

    #[test]
    fn negative_rainfall_names_line() {
        let (_d, path) = write_lines(&[
            "timestamp,region_id,call,tsh,rainfall_mm,holiday_code,event_code",
            "2024-01-01T00:00:00,0,1,1,0,0,0",
            "2024-01-01T00:30:00,0,1,1,-1,0,0",
        ]);
        let err = read_panel_csv(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("rainfall"), "{err}");
    }

    #[test]
    fn gap_is_rejected() {
        let (_d, path) = write_lines(&[
            "timestamp,region_id,call,tsh,rainfall_mm,holiday_code,event_code",
            "2024-01-01T00:00:00,0,1,1,0,0,0",
            "2024-01-01T01:30:00,0,1,1,0,0,0",
        ]);
        let err = read_panel_csv(&path).unwrap_err().to_string();
        assert!(err.contains("non-contiguous half-hour grid"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn misaligned_and_malformed_rows() {
        let (_d, path) = write_lines(&[
            "timestamp,region_id,call,tsh,rainfall_mm,holiday_code,event_code",
            "2024-01-01T00:10:00,0,1,1,0,0,0",
        ]);
        assert!(read_panel_csv(&path).unwrap_err().to_string().contains("half-hour"));
        let (_d, path) = write_lines(&[
            "timestamp,region_id,call,tsh,rainfall_mm,holiday_code,event_code",
            "2024-01-01T00:00:00,0,abc,1,0,0,0",
        ]);
        assert!(read_panel_csv(&path).unwrap_err().to_string().contains("line 2"));
    }

    #[test]
    fn city_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let city = generate_city(&CityConfig {
            hex_radius: 2,
            ..CityConfig::default()
        })
        .unwrap();
        write_city(&city, dir.path()).unwrap();
        let back = read_city(dir.path()).unwrap();
        assert_eq!(back.grids, city.grids);
        assert_eq!(back.counties, city.counties);
        assert_eq!(back.vocab, city.vocab);
        assert_eq!(back.pois, city.pois);
    }
}
