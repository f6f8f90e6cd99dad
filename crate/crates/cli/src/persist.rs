//! On-disk artifacts.
//!
//! Parameter snapshots and feature matrices use a flat little-endian
//! container: the magic bytes `APOLAB1\0`, a `u32` kind tag, a `u32` count
//! of dimensions, that many `u64` dimensions, then the payload as `f64`
//! values. Kind 0 is a linear scorer (dims `[input]`), kind 1 a two-layer
//! scorer (dims `[input, hidden]`), kind 2 a row-major matrix (dims
//! `[rows, cols]`). Everything else is pretty-printed JSON carrying a
//! `schema` string.

use std::fs;
use std::path::{Path, PathBuf};

use apolab::apo::Lab;
use apolab::numcore::{Arch, ScorerParams};
use apolab::world::{DataSplit, GoldenExample, PreferencePair, World, WorldConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"APOLAB1\0";
const KIND_LINEAR: u32 = 0;
const KIND_MLP2: u32 = 1;
const KIND_MATRIX: u32 = 2;

pub const WORLD_SCHEMA: &str = "apolab-world/1";
pub const DATA_SCHEMA: &str = "apolab-data/1";

pub const WORLD_FILE: &str = "world.json";
pub const QUERIES_FILE: &str = "queries.bin";
pub const CANDIDATES_FILE: &str = "candidates.bin";
pub const GOLDEN_FILE: &str = "golden.bin";
pub const SPLIT_FILE: &str = "split.json";
pub const PREF_PAIRS_FILE: &str = "pref_pairs.json";
pub const GOLDEN_SET_FILE: &str = "golden_set.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

fn encode(kind: u32, dims: &[usize], payload: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * dims.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Decoded {
    kind: u32,
    dims: Vec<usize>,
    payload: Vec<f64>,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], String> {
    if bytes.len() < n {
        return Err("truncated header".into());
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn decode(mut bytes: &[u8]) -> Result<Decoded, String> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err("bad magic bytes".into());
    }
    let kind = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
    let ndims = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap()) as usize;
    if ndims > 8 {
        return Err(format!("implausible dimension count {ndims}"));
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        let d = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| "dimension overflows usize".to_string())?);
    }
    if bytes.len() % 8 != 0 {
        return Err("payload is not a whole number of f64 values".into());
    }
    let payload = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Decoded { kind, dims, payload })
}

pub fn encode_params(params: &ScorerParams) -> Vec<u8> {
    match params.arch() {
        Arch::Linear { input } => encode(KIND_LINEAR, &[input], params.values()),
        Arch::Mlp2 { input, hidden } => encode(KIND_MLP2, &[input, hidden], params.values()),
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ScorerParams, String> {
    let d = decode(bytes)?;
    let arch = match (d.kind, d.dims.as_slice()) {
        (KIND_LINEAR, &[input]) => Arch::Linear { input },
        (KIND_MLP2, &[input, hidden]) => Arch::Mlp2 { input, hidden },
        (kind, dims) => return Err(format!("kind {kind} with dims {dims:?} is not a scorer")),
    };
    ScorerParams::from_values(arch, d.payload).map_err(|e| e.to_string())
}

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    encode(KIND_MATRIX, &[m.rows, m.cols], &m.data)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix, String> {
    let d = decode(bytes)?;
    match (d.kind, d.dims.as_slice()) {
        (KIND_MATRIX, &[rows, cols]) => {
            let expected = rows.checked_mul(cols).ok_or("matrix size overflows")?;
            if d.payload.len() != expected {
                return Err(format!("expected {expected} values, found {}", d.payload.len()));
            }
            Ok(Matrix {
                rows,
                cols,
                data: d.payload,
            })
        }
        (kind, dims) => Err(format!("kind {kind} with dims {dims:?} is not a matrix")),
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn save_params(path: &Path, params: &ScorerParams) -> Result<()> {
    write_file(path, &encode_params(params))
}

pub fn load_params(path: &Path) -> Result<ScorerParams> {
    decode_params(&read_file(path)?).map_err(|r| CliError::format(path, r))
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_file(path, &encode_matrix(m))
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    decode_matrix(&read_file(path)?).map_err(|r| CliError::format(path, r))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact types serialize infallibly");
    s.push('\n');
    s
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, to_json(value).as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::format(path, e.to_string()))
}

/// JSON artifact with a schema tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub schema: String,
    pub data: T,
}

pub fn save_versioned<T: Serialize>(path: &Path, schema: &str, data: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Borrowed<'a, T> {
        schema: &'a str,
        data: &'a T,
    }
    save_json(path, &Borrowed { schema, data })
}

pub fn load_versioned<T: DeserializeOwned>(path: &Path, schema: &'static str) -> Result<T> {
    let env: Envelope<T> = load_json(path)?;
    if env.schema != schema {
        return Err(CliError::Schema {
            path: path.to_path_buf(),
            found: env.schema,
            expected: schema,
        });
    }
    Ok(env.data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldHeader {
    pub config: WorldConfig,
    pub seed: u64,
    pub n_queries: usize,
    pub n_candidates: usize,
    pub dim: usize,
}

/// Writes a lab into `dir` and returns the written paths in a fixed order.
pub fn save_lab(dir: &Path, lab: &Lab) -> Result<Vec<PathBuf>> {
    let w = &lab.world;
    let d = w.config().dim;
    let header = WorldHeader {
        config: w.config().clone(),
        seed: w.seed(),
        n_queries: w.n_queries(),
        n_candidates: w.n_candidates(),
        dim: d,
    };
    let paths: Vec<PathBuf> = [
        WORLD_FILE,
        QUERIES_FILE,
        CANDIDATES_FILE,
        GOLDEN_FILE,
        SPLIT_FILE,
        PREF_PAIRS_FILE,
        GOLDEN_SET_FILE,
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect();
    save_versioned(&paths[0], WORLD_SCHEMA, &header)?;
    save_matrix(
        &paths[1],
        &Matrix {
            rows: w.n_queries(),
            cols: d,
            data: w.query_matrix().to_vec(),
        },
    )?;
    save_matrix(
        &paths[2],
        &Matrix {
            rows: w.n_queries() * w.n_candidates(),
            cols: d,
            data: w.candidate_matrix().to_vec(),
        },
    )?;
    save_params(&paths[3], w.golden())?;
    save_versioned(&paths[4], DATA_SCHEMA, &lab.split)?;
    save_versioned(&paths[5], DATA_SCHEMA, &lab.d_p)?;
    save_versioned(&paths[6], DATA_SCHEMA, &lab.golden_set)?;
    Ok(paths)
}

/// Reads a lab written by [`save_lab`], validating every index against the
/// reconstructed world.
pub fn load_lab(dir: &Path) -> Result<Lab> {
    let header: WorldHeader = load_versioned(&dir.join(WORLD_FILE), WORLD_SCHEMA)?;
    let queries = load_matrix(&dir.join(QUERIES_FILE))?;
    let candidates = load_matrix(&dir.join(CANDIDATES_FILE))?;
    let golden = load_params(&dir.join(GOLDEN_FILE))?;
    if queries.cols != header.dim || candidates.cols != header.dim {
        return Err(CliError::format(dir, "feature matrices disagree with world.json"));
    }
    let world = World::from_parts(header.config, header.seed, queries.data, candidates.data, golden)?;

    let split: DataSplit = load_versioned(&dir.join(SPLIT_FILE), DATA_SCHEMA)?;
    split.validate(&world)?;
    let d_p: Vec<PreferencePair> = load_versioned(&dir.join(PREF_PAIRS_FILE), DATA_SCHEMA)?;
    for p in &d_p {
        world.check_pair(p)?;
    }
    let golden_set: Vec<GoldenExample> = load_versioned(&dir.join(GOLDEN_SET_FILE), DATA_SCHEMA)?;
    for g in &golden_set {
        world.check_response(g.query, g.golden_response)?;
    }
    Ok(Lab {
        world,
        split,
        d_p,
        golden_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_exactly() {
        let p = ScorerParams::from_values(
            Arch::Mlp2 { input: 2, hidden: 1 },
            vec![0.1, -3.5e-300, f64::MIN_POSITIVE, 7.0, 1.0 / 3.0],
        )
        .unwrap();
        let bytes = encode_params(&p);
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode_params(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode_params(&back), bytes);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = encode_matrix(&Matrix {
            rows: 1,
            cols: 2,
            data: vec![1.0, 2.0],
        });
        assert_eq!(bytes.len(), 8 + 4 + 4 + 16 + 16);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(&bytes[32..40], &1.0f64.to_le_bytes());
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let good = encode_matrix(&Matrix {
            rows: 2,
            cols: 2,
            data: vec![1.0; 4],
        });
        assert!(decode_matrix(&good[..good.len() - 8]).is_err());
        assert!(decode_matrix(&good[..good.len() - 3]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_matrix(&bad).is_err());
        assert!(decode_params(&good).is_err());
        assert!(decode_matrix(&[]).is_err());
    }
}
