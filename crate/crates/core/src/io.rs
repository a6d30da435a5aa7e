//! File formats: embedding tables, world directories, checkpoints and
//! per-sample results.
//!
//! Embedding tables come in two flavours sharing one loader:
//!
//! * binary: the 16-byte magic `NEGSTREAM-EMB-1\0`, a dtype byte (`0x01` =
//!   little-endian `f32`), `d` as `u32` LE, `n` as `u64` LE, then `n · d`
//!   floats. Rows carry no identifiers; they are named `0`, `1`, ...
//! * text: a header line `NEGSTREAM-EMB-1,text,<d>,<n>` followed by one
//!   comma-separated row per vector, `id,v1,...,vd`.
//!
//! Values are stored as 32-bit floats, so the loader re-normalizes every row
//! after checking that its norm is within [`NORM_TOLERANCE`] of one.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{SyntheticEncoder, TextEncoder};
use crate::negatives::VocabularyEntry;
use crate::scoring::Label;
use crate::vector::{l2_norm, normalize, EmbeddingVector};
use crate::world::{PoolSample, SamplePools, World, WorldSpec};

pub const BINARY_MAGIC: &[u8; 16] = b"NEGSTREAM-EMB-1\0";
pub const TEXT_MAGIC: &str = "NEGSTREAM-EMB-1";
const DTYPE_F32_LE: u8 = 0x01;
const BINARY_HEADER_LEN: usize = 16 + 1 + 4 + 8;

/// Allowed deviation of a stored row's norm from one.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingFormat {
    #[default]
    Binary,
    Text,
}

/// Named unit vectors of one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub ids: Vec<String>,
    pub vectors: Vec<EmbeddingVector>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, vectors: Vec<EmbeddingVector>) -> Result<Self> {
        let dim = vectors.first().map(EmbeddingVector::dim).ok_or(Error::EmptyVector)?;
        if ids.len() != vectors.len() {
            return Err(Error::InvalidConfig(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.dim(),
            });
        }
        Ok(Self { dim, ids, vectors })
    }

    /// Rows named by their index.
    pub fn unnamed(vectors: Vec<EmbeddingVector>) -> Result<Self> {
        let ids = (0..vectors.len()).map(|i| i.to_string()).collect();
        Self::new(ids, vectors)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable, format: EmbeddingFormat) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    match format {
        EmbeddingFormat::Binary => {
            out.write_all(BINARY_MAGIC).map_err(io)?;
            out.write_all(&[DTYPE_F32_LE]).map_err(io)?;
            let d = u32::try_from(table.dim)
                .map_err(|_| Error::InvalidConfig(format!("dimension {} exceeds u32", table.dim)))?;
            out.write_all(&d.to_le_bytes()).map_err(io)?;
            out.write_all(&(table.len() as u64).to_le_bytes()).map_err(io)?;
            for v in &table.vectors {
                for &x in v.as_slice() {
                    out.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
                }
            }
        }
        EmbeddingFormat::Text => {
            let mut w = csv::WriterBuilder::new().flexible(true).from_writer(&mut out);
            let header = [TEXT_MAGIC.to_string(), "text".into(), table.dim.to_string(), table.len().to_string()];
            w.write_record(&header).map_err(|e| csv_error(path, e))?;
            for (id, v) in table.ids.iter().zip(&table.vectors) {
                let mut row = Vec::with_capacity(v.dim() + 1);
                row.push(id.clone());
                row.extend(v.as_slice().iter().map(|&x| (x as f32).to_string()));
                w.write_record(&row).map_err(|e| csv_error(path, e))?;
            }
            w.flush().map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::format(path, format!("{kind:?}")),
    }
}

/// Re-normalizes a stored row after checking its norm.
fn unit_row(path: &Path, row: usize, values: Vec<f64>) -> Result<EmbeddingVector> {
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::format(path, format!("row {row} has a non-finite value")));
    }
    let norm = l2_norm(&values);
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::format(path, format!("row {row} has norm {norm}, expected 1")));
    }
    normalize(&values)
}

/// Loads a binary or text embedding table, detected from its header.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        read_binary(path, &bytes)
    } else if bytes.starts_with(TEXT_MAGIC.as_bytes()) {
        read_text(path, &bytes)
    } else {
        Err(Error::format(path, "missing NEGSTREAM-EMB-1 header"))
    }
}

fn read_binary(path: &Path, bytes: &[u8]) -> Result<EmbeddingTable> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if bytes[16] != DTYPE_F32_LE {
        return Err(Error::format(path, format!("unsupported dtype tag {:#04x}", bytes[16])));
    }
    let d = u32::from_le_bytes(bytes[17..21].try_into().expect("4 bytes")) as usize;
    let n = u64::from_le_bytes(bytes[21..29].try_into().expect("8 bytes"));
    if d == 0 {
        return Err(Error::format(path, "dimension is zero"));
    }
    let body = &bytes[BINARY_HEADER_LEN..];
    let expected = (n as u128) * (d as u128) * 4;
    if body.len() as u128 != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes of data for {n} rows of {d}, found {}", body.len()),
        ));
    }
    let vectors = body
        .chunks_exact(d * 4)
        .enumerate()
        .map(|(row, chunk)| {
            let values = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            unit_row(path, row, values)
        })
        .collect::<Result<Vec<_>>>()?;
    if vectors.is_empty() {
        return Ok(EmbeddingTable {
            dim: d,
            ids: Vec::new(),
            vectors,
        });
    }
    EmbeddingTable::unnamed(vectors)
}

fn read_text(path: &Path, bytes: &[u8]) -> Result<EmbeddingTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?
        .map_err(|e| csv_error(path, e))?;
    let field = |i: usize| header.get(i).unwrap_or("");
    if header.len() != 4 || field(0) != TEXT_MAGIC || field(1) != "text" {
        return Err(Error::format(path, "header must be NEGSTREAM-EMB-1,text,<d>,<n>"));
    }
    let parse = |s: &str, what: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad {what} '{s}' in header")))
    };
    let (d, n) = (parse(field(2), "dimension")?, parse(field(3), "count")?);
    if d == 0 {
        return Err(Error::format(path, "dimension is zero"));
    }
    let (mut ids, mut vectors) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (row, record) in records.enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != d + 1 {
            return Err(Error::format(
                path,
                format!("row {row} has {} values, expected {d}", record.len().saturating_sub(1)),
            ));
        }
        let values = record
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<f32>()
                    .map(f64::from)
                    .map_err(|_| Error::format(path, format!("row {row}: bad value '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(record[0].to_string());
        vectors.push(unit_row(path, row, values)?);
    }
    if vectors.len() != n {
        return Err(Error::format(path, format!("header promises {n} rows, found {}", vectors.len())));
    }
    if vectors.is_empty() {
        return Ok(EmbeddingTable { dim: d, ids, vectors });
    }
    EmbeddingTable::new(ids, vectors)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::format(path, e.to_string()))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))
}

/// Layout of per-sample records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordFormat {
    #[default]
    Csv,
    JsonLines,
}

impl RecordFormat {
    pub fn extension(self) -> &'static str {
        match self {
            RecordFormat::Csv => "csv",
            RecordFormat::JsonLines => "jsonl",
        }
    }
}

/// Column order of result files; matches the fields of
/// [`StreamResult`](crate::engine::StreamResult).
pub const RESULT_COLUMNS: [&str; 8] = [
    "sample_id",
    "phase",
    "truth",
    "initial_score",
    "final_score",
    "potential_ood",
    "accepted",
    "bank_size_after",
];

/// Writes flat records as CSV with a header row, or as one JSON object per
/// line. Field order follows the record type.
pub fn write_records<T: Serialize>(path: &Path, records: &[T], format: RecordFormat) -> Result<()> {
    let mut out = create(path)?;
    match format {
        RecordFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            for r in records {
                w.serialize(r).map_err(|e| csv_error(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        RecordFormat::JsonLines => {
            for r in records {
                serde_json::to_writer(&mut out, r).map_err(|e| Error::format(path, e.to_string()))?;
                out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records<T: DeserializeOwned>(path: &Path, format: RecordFormat) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        RecordFormat::Csv => csv::Reader::from_reader(BufReader::new(file))
            .deserialize()
            .map(|r| r.map_err(|e| csv_error(path, e)))
            .collect(),
        RecordFormat::JsonLines => {
            let mut text = String::new();
            BufReader::new(file)
                .read_to_string(&mut text)
                .map_err(|e| Error::io(path, e))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
                .collect()
        }
    }
}

pub const WORLD_MANIFEST: &str = "world.json";
const WORLD_FORMAT: &str = "negstream-world-1";

/// Per-sample metadata stored alongside pool embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub id: String,
    pub truth: Label,
    #[serde(default)]
    pub class: Option<usize>,
    #[serde(default)]
    pub cluster: Option<usize>,
    #[serde(default)]
    pub hard: bool,
}

/// A vocabulary word as stored on disk; its text feature is recomputed with
/// the world's encoder on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularyToken {
    pub token_id: String,
    pub token_embedding: Vec<f64>,
}

/// `world.json`: describes a world directory. File names are relative to
/// the directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldManifest {
    pub format: String,
    /// Generator settings, when the world is synthetic.
    #[serde(default)]
    pub spec: Option<WorldSpec>,
    pub class_names: Vec<String>,
    pub class_text: PathBuf,
    pub shots: PathBuf,
    /// Class of each row of `shots`.
    pub shot_classes: Vec<usize>,
    pub encoder: PathBuf,
    pub vocabulary: PathBuf,
    pub id_pool: PathBuf,
    pub id_samples: Vec<SampleMeta>,
    pub ood_pool: PathBuf,
    pub ood_samples: Vec<SampleMeta>,
    #[serde(default)]
    pub id_means: Vec<Vec<f64>>,
    #[serde(default)]
    pub ood_means: Vec<Vec<f64>>,
}

fn meta(s: &PoolSample) -> SampleMeta {
    SampleMeta {
        id: s.id.clone(),
        truth: s.truth,
        class: s.class,
        cluster: s.cluster,
        hard: s.hard,
    }
}

fn pool_table(pool: &[PoolSample]) -> Result<EmbeddingTable> {
    EmbeddingTable::new(
        pool.iter().map(|s| s.id.clone()).collect(),
        pool.iter().map(|s| s.embedding.clone()).collect(),
    )
}

/// Writes `world` into `dir` (created if missing).
pub fn save_world(world: &World, dir: &Path, format: EmbeddingFormat) -> Result<()> {
    let ext = match format {
        EmbeddingFormat::Binary => "emb",
        EmbeddingFormat::Text => "csv",
    };
    let name = |stem: &str| PathBuf::from(format!("{stem}.{ext}"));
    let manifest = WorldManifest {
        format: WORLD_FORMAT.into(),
        spec: Some(world.spec.clone()),
        class_names: world.class_names.clone(),
        class_text: name("class_text"),
        shots: name("shots"),
        shot_classes: world
            .shots
            .iter()
            .enumerate()
            .flat_map(|(c, s)| std::iter::repeat_n(c, s.len()))
            .collect(),
        encoder: "encoder.json".into(),
        vocabulary: "vocabulary.json".into(),
        id_pool: name("id_pool"),
        id_samples: world.pools.id.iter().map(meta).collect(),
        ood_pool: name("ood_pool"),
        ood_samples: world.pools.ood.iter().map(meta).collect(),
        id_means: world.id_means.clone(),
        ood_means: world.ood_means.clone(),
    };
    let class_text = EmbeddingTable::new(world.class_names.clone(), world.class_text.clone())?;
    write_embeddings(&dir.join(&manifest.class_text), &class_text, format)?;
    let shots = EmbeddingTable::unnamed(world.shots.iter().flatten().cloned().collect())?;
    write_embeddings(&dir.join(&manifest.shots), &shots, format)?;
    write_json(&dir.join(&manifest.encoder), &world.encoder)?;
    let tokens: Vec<VocabularyToken> = world
        .vocabulary
        .iter()
        .map(|v| VocabularyToken {
            token_id: v.token_id.clone(),
            token_embedding: v.token_embedding.clone(),
        })
        .collect();
    write_json(&dir.join(&manifest.vocabulary), &tokens)?;
    if !world.pools.id.is_empty() {
        write_embeddings(&dir.join(&manifest.id_pool), &pool_table(&world.pools.id)?, format)?;
    }
    if !world.pools.ood.is_empty() {
        write_embeddings(&dir.join(&manifest.ood_pool), &pool_table(&world.pools.ood)?, format)?;
    }
    write_json(&dir.join(WORLD_MANIFEST), &manifest)
}

fn load_pool(dir: &Path, file: &Path, metas: &[SampleMeta], dim: usize) -> Result<Vec<PoolSample>> {
    if metas.is_empty() {
        return Ok(Vec::new());
    }
    let path = dir.join(file);
    let table = read_embeddings(&path)?;
    if table.len() != metas.len() {
        return Err(Error::format(
            &path,
            format!("{} rows but the manifest lists {} samples", table.len(), metas.len()),
        ));
    }
    if table.dim != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: table.dim,
        });
    }
    Ok(metas
        .iter()
        .zip(table.vectors)
        .map(|(m, embedding)| PoolSample {
            id: m.id.clone(),
            embedding,
            truth: m.truth,
            class: m.class,
            cluster: m.cluster,
            hard: m.hard,
        })
        .collect())
}

/// Loads a world directory written by [`save_world`] (or assembled by hand).
pub fn load_world(dir: &Path) -> Result<World> {
    let manifest_path = dir.join(WORLD_MANIFEST);
    let manifest: WorldManifest = read_json(&manifest_path)?;
    if manifest.format != WORLD_FORMAT {
        return Err(Error::format(
            &manifest_path,
            format!("unknown world format '{}'", manifest.format),
        ));
    }
    let classes = manifest.class_names.len();
    let class_text = read_embeddings(&dir.join(&manifest.class_text))?;
    if class_text.len() != classes {
        return Err(Error::format(
            dir.join(&manifest.class_text),
            format!("{} rows for {classes} classes", class_text.len()),
        ));
    }
    let dim = class_text.dim;

    let shots_table = read_embeddings(&dir.join(&manifest.shots))?;
    if shots_table.len() != manifest.shot_classes.len() || shots_table.dim != dim {
        return Err(Error::format(
            dir.join(&manifest.shots),
            "shot rows do not match shot_classes or the class text dimension",
        ));
    }
    let mut shots = vec![Vec::new(); classes];
    for (v, &c) in shots_table.vectors.into_iter().zip(&manifest.shot_classes) {
        shots
            .get_mut(c)
            .ok_or_else(|| Error::format(&manifest_path, format!("shot class {c} out of range")))?
            .push(v);
    }

    let raw: SyntheticEncoder = read_json(&dir.join(&manifest.encoder))?;
    let encoder = SyntheticEncoder::new(
        raw.feature_dim(),
        raw.token_dim(),
        raw.projection().to_vec(),
        raw.prefix_offset().to_vec(),
    )?;
    if encoder.feature_dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: encoder.feature_dim(),
        });
    }
    let tokens: Vec<VocabularyToken> = read_json(&dir.join(&manifest.vocabulary))?;
    let vocabulary = tokens
        .into_iter()
        .map(|t| {
            Ok(VocabularyEntry {
                text_feature: encoder.encode(&t.token_embedding)?,
                token_id: t.token_id,
                token_embedding: t.token_embedding,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let pools = SamplePools {
        id: load_pool(dir, &manifest.id_pool, &manifest.id_samples, dim)?,
        ood: load_pool(dir, &manifest.ood_pool, &manifest.ood_samples, dim)?,
    };
    Ok(World {
        spec: manifest.spec.unwrap_or_default(),
        class_names: manifest.class_names,
        class_text: class_text.vectors,
        shots,
        vocabulary,
        encoder,
        pools,
        id_means: manifest.id_means,
        ood_means: manifest.ood_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::StreamResult;
    use crate::rng::Rng;
    use crate::world::generate_world;

    fn random_table(n: usize, d: usize, seed: u64) -> EmbeddingTable {
        let mut rng = Rng::new(seed);
        let vectors = (0..n).map(|_| normalize(&rng.normal_vec(d, 1.0)).unwrap()).collect();
        EmbeddingTable::new((0..n).map(|i| format!("s{i}")).collect(), vectors).unwrap()
    }

    fn close(a: &EmbeddingTable, b: &EmbeddingTable) -> bool {
        a.dim == b.dim
            && a.vectors
                .iter()
                .zip(&b.vectors)
                .all(|(x, y)| x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| (p - q).abs() < 1e-6))
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.emb");
        let table = random_table(7, 5, 1);
        write_embeddings(&path, &table, EmbeddingFormat::Binary).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..16], BINARY_MAGIC);
        assert_eq!(bytes.len(), BINARY_HEADER_LEN + 7 * 5 * 4);
        let back = read_embeddings(&path).unwrap();
        assert!(close(&table, &back));
        assert_eq!(back.ids[3], "3");
        for v in &back.vectors {
            assert!((l2_norm(v.as_slice()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn text_round_trip_keeps_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let table = random_table(4, 3, 2);
        write_embeddings(&path, &table, EmbeddingFormat::Text).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("NEGSTREAM-EMB-1,text,3,4\n"));
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.ids, table.ids);
        assert!(close(&table, &back));
    }

    #[test]
    fn loader_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        let check = |content: &[u8]| {
            fs::write(&p, content).unwrap();
            read_embeddings(&p).unwrap_err()
        };
        assert!(matches!(check(b"hello"), Error::Format { .. }));
        // norm 2 is outside the tolerance
        assert!(matches!(check(b"NEGSTREAM-EMB-1,text,2,1\na,2,0\n"), Error::Format { .. }));
        assert!(matches!(check(b"NEGSTREAM-EMB-1,text,2,2\na,1,0\n"), Error::Format { .. }));
        assert!(matches!(check(b"NEGSTREAM-EMB-1,text,2,1\na,1\n"), Error::Format { .. }));
        let mut truncated = BINARY_MAGIC.to_vec();
        truncated.extend([1u8, 2, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]);
        truncated.extend(1f32.to_le_bytes());
        assert!(matches!(check(&truncated), Error::Format { .. }));
        let missing = read_embeddings(&dir.path().join("nope")).unwrap_err();
        assert_eq!(missing.exit_code(), 2);
    }

    #[test]
    fn slightly_off_norm_is_renormalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "NEGSTREAM-EMB-1,text,2,1\na,0.6004,0.8\n").unwrap();
        let t = read_embeddings(&p).unwrap();
        assert!((l2_norm(t.vectors[0].as_slice()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn world_round_trip() {
        let spec = WorldSpec {
            vocab_size: 60,
            id_samples: 20,
            ood_samples: 12,
            shots: 3,
            ..WorldSpec::default()
        };
        let world = generate_world(&spec).unwrap();
        for format in [EmbeddingFormat::Binary, EmbeddingFormat::Text] {
            let dir = tempfile::tempdir().unwrap();
            save_world(&world, dir.path(), format).unwrap();
            let back = load_world(dir.path()).unwrap();
            assert_eq!(back.spec, world.spec);
            assert_eq!(back.class_names, world.class_names);
            assert_eq!(back.encoder, world.encoder);
            assert_eq!(back.vocabulary, world.vocabulary);
            assert_eq!(back.shots.iter().map(Vec::len).collect::<Vec<_>>(), vec![3; 10]);
            assert_eq!(back.pools.id.len(), 20);
            assert_eq!(back.pools.ood[5].cluster, world.pools.ood[5].cluster);
            let err = back.pools.id[4].embedding.dot(&world.pools.id[4].embedding);
            assert!((err - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn results_round_trip_in_both_formats() {
        let results = vec![
            StreamResult {
                sample_id: "id-00001".into(),
                phase: 0,
                truth: Label::Id,
                initial_score: 0.987654321,
                final_score: 0.9,
                potential_ood: false,
                accepted: false,
                bank_size_after: 0,
            },
            StreamResult {
                sample_id: "ood,quoted".into(),
                phase: 2,
                truth: Label::Ood,
                initial_score: 1e-30,
                final_score: 0.0,
                potential_ood: true,
                accepted: true,
                bank_size_after: 1,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        for format in [RecordFormat::Csv, RecordFormat::JsonLines] {
            let p = dir.path().join(format!("r.{}", format.extension()));
            write_records(&p, &results, format).unwrap();
            let back: Vec<StreamResult> = read_records(&p, format).unwrap();
            assert_eq!(back, results);
        }
        let header = fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(header.lines().next().unwrap(), RESULT_COLUMNS.join(","));
    }
}
