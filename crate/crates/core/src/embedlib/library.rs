use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use mvgr_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, MANIFEST};
use crate::error::{io_err, Error, Result};
use crate::fusion::Stage1Embeddings;

pub const INDEX_FILE: &str = "index.csv";
pub const VECTORS_FILE: &str = "vectors.f32";
const FORMAT: &str = "mvgr-embeddings/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Grid,
    County,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Grid => "grid",
            Level::County => "county",
        })
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Level::Grid),
            "county" => Ok(Level::County),
            other => Err(Error::Invalid(format!("unknown level {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub region_id: usize,
    pub level: Level,
    pub vector: Vec<f32>,
    pub version: String,
    /// Hash of the configuration that produced the vector.
    pub source_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibraryManifest {
    pub format: String,
    pub version: String,
    pub dimension: usize,
    pub count: usize,
    pub created: String,
    pub source_hash: String,
    /// SHA-256 of `vectors.f32`.
    pub vectors_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    row: usize,
    region_id: usize,
    level: Level,
}

/// Writes a new library version into `dir`. An existing library in `dir` is
/// never overwritten.
pub fn save_library(records: &[EmbeddingRecord], dir: &Path, created: &str) -> Result<LibraryManifest> {
    let first = records.first().ok_or_else(|| Error::Invalid("cannot save an empty library".into()))?;
    let dim = first.vector.len();
    if dim == 0 {
        return Err(Error::Invalid("embedding dimension is zero".into()));
    }
    for (i, r) in records.iter().enumerate() {
        if r.vector.len() != dim {
            return Err(Error::Shape(format!("record {i} has dimension {} but record 0 has {dim}", r.vector.len())));
        }
        if r.version != first.version || r.source_hash != first.source_hash {
            return Err(Error::Invalid(format!("record {i} belongs to a different library version")));
        }
        if r.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("record {i} has a non-finite component")));
        }
    }
    if dir.join(MANIFEST).exists() {
        return Err(Error::Invalid(format!("{} already holds a library; versions are immutable", dir.display())));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let bytes: Vec<u8> = records.iter().flat_map(|r| r.vector.iter().flat_map(|v| v.to_le_bytes())).collect();
    let vpath = dir.join(VECTORS_FILE);
    fs::write(&vpath, &bytes).map_err(io_err(&vpath))?;
    let mut w = csv::Writer::from_path(dir.join(INDEX_FILE))?;
    for (row, r) in records.iter().enumerate() {
        w.serialize(IndexRow {
            row,
            region_id: r.region_id,
            level: r.level,
        })?;
    }
    w.flush().map_err(io_err(dir.join(INDEX_FILE)))?;
    let manifest = LibraryManifest {
        format: FORMAT.into(),
        version: first.version.clone(),
        dimension: dim,
        count: records.len(),
        created: created.into(),
        source_hash: first.source_hash.clone(),
        vectors_sha256: sha256_hex(&bytes),
    };
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&mpath))?;
    Ok(manifest)
}

/// Reads a library, checking format, hash, dimension and count before any
/// record is returned.
pub fn load_library(dir: &Path) -> Result<(LibraryManifest, Vec<EmbeddingRecord>)> {
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(Error::MissingArtifact(format!("{} not found", mpath.display())));
    }
    let manifest: LibraryManifest = serde_json::from_str(&fs::read_to_string(&mpath).map_err(io_err(&mpath))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Invalid(format!("unsupported library format {:?}", manifest.format)));
    }
    let vpath = dir.join(VECTORS_FILE);
    let bytes = fs::read(&vpath).map_err(io_err(&vpath))?;
    let hash = sha256_hex(&bytes);
    if hash != manifest.vectors_sha256 {
        return Err(Error::Integrity(format!(
            "{} hashes to {hash}, manifest records {}",
            vpath.display(),
            manifest.vectors_sha256
        )));
    }
    if manifest.dimension == 0 || bytes.len() != manifest.count * manifest.dimension * 4 {
        return Err(Error::Shape(format!(
            "{} bytes cannot hold {} vectors of dimension {}",
            bytes.len(),
            manifest.count,
            manifest.dimension
        )));
    }
    let mut rdr = csv::Reader::from_path(dir.join(INDEX_FILE))?;
    let mut index = Vec::with_capacity(manifest.count);
    for (i, row) in rdr.deserialize::<IndexRow>().enumerate() {
        let row = row?;
        if row.row != i {
            return Err(Error::Parse {
                file: INDEX_FILE.into(),
                line: i as u64 + 2,
                msg: format!("expected row {i}, found {}", row.row),
            });
        }
        index.push(row);
    }
    if index.len() != manifest.count {
        return Err(Error::Invalid(format!("index lists {} rows, manifest {}", index.len(), manifest.count)));
    }
    let records = index
        .into_iter()
        .zip(bytes.chunks_exact(manifest.dimension * 4))
        .map(|(row, chunk)| EmbeddingRecord {
            region_id: row.region_id,
            level: row.level,
            vector: chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
            version: manifest.version.clone(),
            source_hash: manifest.source_hash.clone(),
        })
        .collect();
    Ok((manifest, records))
}

/// Library records for trained stage-1 output: fused grid vectors and county
/// vectors, with the grid or county index as region id.
pub fn records_from_embeddings(emb: &Stage1Embeddings, version: &str, source_hash: &str) -> Vec<EmbeddingRecord> {
    let rows = |t: &Tensor, level: Level| {
        (0..t.rows())
            .map(|i| EmbeddingRecord {
                region_id: i,
                level,
                vector: t.row_slice(i).iter().map(|&v| v as f32).collect(),
                version: version.to_string(),
                source_hash: source_hash.to_string(),
            })
            .collect::<Vec<_>>()
    };
    let mut out = rows(&emb.z_f, Level::Grid);
    out.extend(rows(&emb.h, Level::County));
    out
}
