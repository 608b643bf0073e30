//! Datasets, checkpoints, tensor/CSV files and JSONL logs.
//!
//! Checkpoint layout: a TOML header, the line `%%payload`, then the
//! little-endian `f32` payload of every section in layout order. The header
//! carries an FNV-1a 64 checksum of the payload bytes.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::cmodel::{CmConfig, ConsistencyModel};
use crate::error::{Error, Result};
use crate::nnkit::{NetSpec, ParamVector};
use crate::oracle::X0Source;
use crate::rng::{self, stage, Rng};
use crate::schedule::ScheduleConfig;
use crate::trainer::TrainState;

/// Endless supply of training batches.
pub trait BatchSource {
    fn dim(&self) -> usize;
    fn next_batch(&mut self, n: usize) -> Result<Batch>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SwissRoll,
    Gaussian,
    GaussianMixture,
    Checkerboard,
    File,
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub normalize: bool,
    /// Target per-coordinate standard deviation after normalization.
    #[serde(default = "half")]
    pub sigma_data: f64,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind) -> Self {
        Self {
            kind,
            params: BTreeMap::new(),
            path: None,
            normalize: false,
            sigma_data: 0.5,
        }
    }

    pub fn normalized(mut self, sigma_data: f64) -> Self {
        self.normalize = true;
        self.sigma_data = sigma_data;
        self
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.into(), value);
        self
    }

    fn allowed_params(&self) -> &'static [&'static str] {
        match self.kind {
            DatasetKind::SwissRoll => &["noise"],
            DatasetKind::Gaussian => &["dim", "mean", "std"],
            DatasetKind::GaussianMixture => &["modes", "radius", "std"],
            DatasetKind::Checkerboard => &["cells"],
            DatasetKind::File => &[],
        }
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let allowed = self.allowed_params();
        for key in self.params.keys() {
            if !allowed.contains(&key.as_str()) {
                p.push(format!("dataset.params.{key}: not a parameter of this dataset kind"));
            }
        }
        for (key, v) in &self.params {
            if !v.is_finite() {
                p.push(format!("dataset.params.{key}: must be finite"));
            }
        }
        let count = |key: &str, default: f64, p: &mut Vec<String>| {
            let v = self.param(key, default);
            if !(v >= 1.0 && v.fract() == 0.0) {
                p.push(format!("dataset.params.{key}: must be a positive integer, got {v}"));
            }
        };
        match self.kind {
            DatasetKind::Gaussian => {
                count("dim", 1.0, &mut p);
                if !(self.param("std", 1.0) > 0.0) {
                    p.push("dataset.params.std: must be > 0".into());
                }
            }
            DatasetKind::GaussianMixture => {
                count("modes", 8.0, &mut p);
                if !(self.param("std", 0.1) > 0.0) {
                    p.push("dataset.params.std: must be > 0".into());
                }
            }
            DatasetKind::Checkerboard => count("cells", 4.0, &mut p),
            DatasetKind::SwissRoll => {
                if !(self.param("noise", 0.0) >= 0.0) {
                    p.push("dataset.params.noise: must be >= 0".into());
                }
            }
            DatasetKind::File => match &self.path {
                None => p.push("dataset.path: required for file datasets".into()),
                Some(path) if !path.is_file() => {
                    p.push(format!("dataset.path: {} does not exist", path.display()))
                }
                _ => {}
            },
        }
        if self.kind != DatasetKind::File && self.path.is_some() {
            p.push("dataset.path: only valid for file datasets".into());
        }
        if self.normalize && !(self.sigma_data > 0.0) {
            p.push(format!("dataset.sigma_data: must be > 0, got {}", self.sigma_data));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            DatasetKind::Gaussian => self.param("dim", 1.0) as usize,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug)]
enum Source {
    Generator,
    Table(Batch),
}

/// Deterministic stream of (optionally normalized) samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    spec: DatasetSpec,
    source: Source,
    dim: usize,
    shift: Vec<f64>,
    scale: f64,
    seed: u64,
    counter: u64,
}

const PILOT_SEED: u64 = 0x005e_ed0f_da7a;
const PILOT_SIZE: usize = 50_000;

pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let (source, dim) = match spec.kind {
        DatasetKind::File => {
            let table = load_table(spec.path.as_deref().expect("validated"))?;
            if table.is_empty() {
                return Err(Error::Config("dataset file has no rows".into()));
            }
            let dim = table.dim();
            (Source::Table(table), dim)
        }
        _ => (Source::Generator, spec.dim()),
    };
    let mut ds = Dataset {
        spec: spec.clone(),
        source,
        dim,
        shift: vec![0.0; dim],
        scale: 1.0,
        seed,
        counter: 0,
    };
    if spec.normalize {
        let pilot = match &ds.source {
            Source::Table(t) => t.clone(),
            Source::Generator => {
                let mut rng = rng::stream(PILOT_SEED, stage::DATA, 0);
                ds.raw(PILOT_SIZE, &mut rng)
            }
        };
        let var = pilot.variance().iter().sum::<f64>() / dim as f64;
        if !(var > 0.0) {
            return Err(Error::Numeric("cannot normalize a dataset with zero variance".into()));
        }
        ds.shift = pilot.mean();
        ds.scale = spec.sigma_data / var.sqrt();
    }
    Ok(ds)
}

impl Dataset {
    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    fn raw(&self, n: usize, rng: &mut Rng) -> Batch {
        let s = &self.spec;
        let mut data = Vec::with_capacity(n * self.dim);
        match (&self.source, s.kind) {
            (Source::Table(t), _) => {
                for _ in 0..n {
                    data.extend_from_slice(t.row(rng.random_range(0..t.rows())));
                }
            }
            (_, DatasetKind::SwissRoll) => {
                let noise = s.param("noise", 0.0);
                for _ in 0..n {
                    let u: f64 = rng.random();
                    let th = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * u);
                    let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                    data.push(th * th.cos() + noise * a);
                    data.push(th * th.sin() + noise * b);
                }
            }
            (_, DatasetKind::Gaussian) => {
                let (mean, std) = (s.param("mean", 0.0), s.param("std", 1.0));
                for _ in 0..n * self.dim {
                    data.push(mean + std * rng.sample::<f64, _>(StandardNormal));
                }
            }
            (_, DatasetKind::GaussianMixture) => {
                let modes = s.param("modes", 8.0) as usize;
                let (radius, std) = (s.param("radius", 2.0), s.param("std", 0.1));
                for _ in 0..n {
                    let k = rng.random_range(0..modes);
                    let ang = 2.0 * std::f64::consts::PI * k as f64 / modes as f64;
                    data.push(radius * ang.cos() + std * rng.sample::<f64, _>(StandardNormal));
                    data.push(radius * ang.sin() + std * rng.sample::<f64, _>(StandardNormal));
                }
            }
            (_, DatasetKind::Checkerboard) => {
                let cells = s.param("cells", 4.0) as usize;
                let width = 4.0 / cells as f64;
                for _ in 0..n {
                    // pick a dark cell: (i + j) even
                    let (i, j) = loop {
                        let i = rng.random_range(0..cells);
                        let j = rng.random_range(0..cells);
                        if (i + j) % 2 == 0 {
                            break (i, j);
                        }
                    };
                    let (u, v): (f64, f64) = (rng.random(), rng.random());
                    data.push(-2.0 + width * (i as f64 + u));
                    data.push(-2.0 + width * (j as f64 + v));
                }
            }
            (Source::Generator, DatasetKind::File) => unreachable!("file datasets load a table"),
        }
        Batch::new(n, self.dim, data).expect("generator emits n * dim values")
    }

    /// Draw `n` samples with an explicit generator.
    pub fn draw(&self, n: usize, rng: &mut Rng) -> Batch {
        let mut b = self.raw(n, rng);
        if self.spec.normalize {
            let dim = self.dim;
            for row in b.as_mut_slice().chunks_exact_mut(dim) {
                for (v, m) in row.iter_mut().zip(&self.shift) {
                    *v = (*v - m) * self.scale;
                }
            }
        }
        b
    }

    /// Position the training stream at batch `index`.
    pub fn seek(&mut self, index: u64) {
        self.counter = index;
    }

    /// Held-out samples for evaluation, independent of the training stream.
    pub fn reference(&self, n: usize, index: u64) -> Batch {
        let mut rng = rng::stream(self.seed, stage::EVAL, index);
        self.draw(n, &mut rng)
    }
}

impl BatchSource for Dataset {
    fn dim(&self) -> usize {
        self.dim
    }

    fn next_batch(&mut self, n: usize) -> Result<Batch> {
        let mut rng = rng::stream(self.seed, stage::DATA, self.counter);
        self.counter += 1;
        Ok(self.draw(n, &mut rng))
    }
}

impl X0Source for Dataset {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Batch> {
        Ok(self.draw(n, rng))
    }
}

/// Turns any [`X0Source`] into a deterministic batch stream.
pub struct SourceStream<'a, S: X0Source + ?Sized> {
    source: &'a S,
    seed: u64,
    counter: u64,
}

impl<'a, S: X0Source + ?Sized> SourceStream<'a, S> {
    pub fn new(source: &'a S, seed: u64) -> Self {
        Self {
            source,
            seed,
            counter: 0,
        }
    }
}

impl<S: X0Source + ?Sized> BatchSource for SourceStream<'_, S> {
    fn dim(&self) -> usize {
        self.source.dim()
    }

    fn next_batch(&mut self, n: usize) -> Result<Batch> {
        let mut rng = rng::stream(self.seed, stage::DATA, self.counter);
        self.counter += 1;
        self.source.sample(n, &mut rng)
    }
}

pub fn read_csv(path: &Path) -> Result<Batch> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut count = 0;
        for field in trimmed.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("not a number: {:?}", field.trim())))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value {v}")));
            }
            data.push(v);
            count += 1;
        }
        match dim {
            None => dim = Some(count),
            Some(d) if d != count => {
                return Err(parse_err(format!("expected {d} columns, found {count}")))
            }
            _ => {}
        }
        rows += 1;
    }
    Batch::new(rows, dim.unwrap_or(0), data)
}

pub fn write_csv(path: &Path, batch: &Batch) -> Result<()> {
    let mut out = String::new();
    for row in batch.iter_rows() {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub const TENSOR_MAGIC: &[u8; 4] = b"ECTB";

/// Magic, `u32` dim, `u64` count, then `f32` little-endian values.
pub fn encode_tensor(batch: &Batch) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * batch.as_slice().len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(batch.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(batch.rows() as u64).to_le_bytes());
    for v in batch.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Batch> {
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.into(),
    };
    if bytes.len() < 16 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("missing tensor magic"));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    let expect = dim
        .checked_mul(count)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("tensor size overflows"))?;
    if body.len() != expect {
        return Err(bad(&format!(
            "payload has {} bytes, header implies {expect}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Batch::new(count, dim, data)
}

pub fn write_tensor(path: &Path, batch: &Batch) -> Result<()> {
    write_atomic(path, &encode_tensor(batch))
}

pub fn read_tensor(path: &Path) -> Result<Batch> {
    decode_tensor(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

/// CSV for `.csv` files, binary tensor otherwise.
pub fn load_table(path: &Path) -> Result<Batch> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_csv(path)
    } else {
        read_tensor(path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_VERSION: u32 = 1;
const PAYLOAD_MARK: &[u8] = b"\n%%payload\n";
pub const SECTIONS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

mod hex64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub sigma_data: f64,
    pub iters: u64,
    #[serde(with = "hex64")]
    pub seed: u64,
    pub sections: Vec<String>,
    /// Number of `f32` values in the payload.
    pub payload_len: u64,
    #[serde(with = "hex64")]
    pub checksum: u64,
    pub net: NetSpec,
    pub schedule: ScheduleConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payload: Vec<f32>,
}

pub fn payload_checksum(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl Checkpoint {
    pub fn from_state(
        state: &TrainState,
        cm: &CmConfig,
        schedule: &ScheduleConfig,
        seed: u64,
    ) -> Result<Self> {
        state.check()?;
        let parts = [&state.params, &state.ema_params, &state.adam_m, &state.adam_v];
        let payload: Vec<f32> = parts
            .iter()
            .flat_map(|p| p.values().iter().map(|&v| v as f32))
            .collect();
        let bytes = f32_bytes(&payload);
        Ok(Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                sigma_data: cm.sigma_data,
                iters: state.iters,
                seed,
                sections: SECTIONS.iter().map(|s| s.to_string()).collect(),
                payload_len: payload.len() as u64,
                checksum: payload_checksum(&bytes),
                net: cm.net.clone(),
                schedule: schedule.clone(),
            },
            payload,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header)
            .map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
        let mut out = header.into_bytes();
        out.extend_from_slice(PAYLOAD_MARK);
        out.extend_from_slice(&f32_bytes(&self.payload));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let split = bytes
            .windows(PAYLOAD_MARK.len())
            .position(|w| w == PAYLOAD_MARK)
            .ok_or_else(|| bad("missing payload marker".into()))?;
        let text = std::str::from_utf8(&bytes[..split])
            .map_err(|_| bad("header is not UTF-8".into()))?;
        let raw: toml::Table = toml::from_str(text).map_err(|e| bad(format!("header: {e}")))?;
        match raw.get("format_version").and_then(|v| v.as_integer()) {
            Some(v) if v == CHECKPOINT_VERSION as i64 => {}
            Some(v) => return Err(bad(format!("unsupported format version {v}"))),
            None => return Err(bad("header has no format_version".into())),
        }
        let header: CheckpointHeader =
            toml::from_str(text).map_err(|e| bad(format!("header: {e}")))?;
        let body = &bytes[split + PAYLOAD_MARK.len()..];
        if body.len() as u64 != header.payload_len * 4 {
            return Err(bad(format!(
                "payload has {} bytes, header declares {} values",
                body.len(),
                header.payload_len
            )));
        }
        let sum = payload_checksum(body);
        if sum != header.checksum {
            return Err(bad(format!(
                "checksum mismatch: header {:016x}, payload {sum:016x}",
                header.checksum
            )));
        }
        let payload = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ckpt = Self { header, payload };
        let per = ckpt.model()?.net().layout().len() as u64;
        if per * ckpt.header.sections.len() as u64 != ckpt.header.payload_len {
            return Err(bad(format!(
                "{} sections of {per} parameters do not fill {} values",
                ckpt.header.sections.len(),
                ckpt.header.payload_len
            )));
        }
        Ok(ckpt)
    }

    pub fn cm_config(&self) -> CmConfig {
        CmConfig {
            sigma_data: self.header.sigma_data,
            net: self.header.net.clone(),
        }
    }

    pub fn model(&self) -> Result<ConsistencyModel> {
        ConsistencyModel::new(&self.cm_config())
    }

    pub fn section(&self, name: &str) -> Option<&[f32]> {
        let i = self.header.sections.iter().position(|s| s == name)?;
        let per = self.payload.len() / self.header.sections.len();
        Some(&self.payload[i * per..(i + 1) * per])
    }

    pub fn section_params(&self, model: &ConsistencyModel, name: &str) -> Result<ParamVector> {
        let layout = model.net().layout();
        let values = self.section(name).ok_or_else(|| Error::Checkpoint {
            path: PathBuf::new(),
            msg: format!("no section {name:?}"),
        })?;
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "section {name} has {} values, network needs {}",
                values.len(),
                layout.len()
            )));
        }
        ParamVector::new(values.iter().map(|&v| v as f64).collect(), layout.clone())
    }

    /// Full training state; missing optimizer sections become zeros.
    pub fn state(&self, model: &ConsistencyModel) -> Result<TrainState> {
        let params = self.section_params(model, "params")?;
        let get = |name: &str| {
            if self.section(name).is_some() {
                self.section_params(model, name)
            } else {
                Ok(params.zeros_like())
            }
        };
        Ok(TrainState {
            ema_params: if self.section("ema").is_some() {
                self.section_params(model, "ema")?
            } else {
                params.clone()
            },
            adam_m: get("adam_m")?,
            adam_v: get("adam_v")?,
            params,
            iters: self.header.iters,
        })
    }
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes the checkpoint and returns its payload checksum.
pub fn save_checkpoint(
    path: &Path,
    state: &TrainState,
    cm: &CmConfig,
    schedule: &ScheduleConfig,
    seed: u64,
) -> Result<u64> {
    let ckpt = Checkpoint::from_state(state, cm, schedule, seed)?;
    write_atomic(path, &ckpt.to_bytes()?)?;
    Ok(ckpt.header.checksum)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Append-only JSON-lines writer.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Self::open(path, false)
    }

    pub fn append(path: &Path) -> Result<Self> {
        Self::open(path, true)
    }

    fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Config(format!("serializing record: {e}")))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for JsonlWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roll() -> DatasetSpec {
        DatasetSpec::new(DatasetKind::SwissRoll).normalized(0.5)
    }

    #[test]
    fn swiss_roll_normalization() {
        let ds = make_dataset(&roll(), 1).unwrap();
        let b = ds.reference(100_000, 0);
        for m in b.mean() {
            assert!(m.abs() <= 1e-2, "mean {m}");
        }
        let v = b.variance().iter().sum::<f64>() / 2.0;
        assert!((v / 0.25 - 1.0).abs() <= 0.02, "variance {v}");
    }

    #[test]
    fn gaussian_generator_variance() {
        let spec = DatasetSpec::new(DatasetKind::Gaussian);
        let mut ds = make_dataset(&spec, 3).unwrap();
        let b = ds.next_batch(100_000).unwrap();
        assert!((b.variance()[0] - 1.0).abs() < 0.02);
    }

    #[test]
    fn same_seed_same_first_batch() {
        for kind in [DatasetKind::SwissRoll, DatasetKind::GaussianMixture, DatasetKind::Checkerboard] {
            let spec = DatasetSpec::new(kind);
            let a = make_dataset(&spec, 9).unwrap().next_batch(32).unwrap();
            let b = make_dataset(&spec, 9).unwrap().next_batch(32).unwrap();
            let c = make_dataset(&spec, 10).unwrap().next_batch(32).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn unknown_params_are_listed() {
        let spec = DatasetSpec::new(DatasetKind::SwissRoll).with("turns", 3.0).with("radius", 1.0);
        assert_eq!(spec.problems().len(), 2);
    }

    #[test]
    fn csv_and_tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = Batch::from_rows(&[[0.5, -1.25], [3.0, 1e-3]]).unwrap();
        let csv = dir.path().join("x.csv");
        write_csv(&csv, &b).unwrap();
        assert_eq!(read_csv(&csv).unwrap(), b);
        let bin = dir.path().join("x.bin");
        write_tensor(&bin, &b).unwrap();
        let back = read_tensor(&bin).unwrap();
        for (x, y) in back.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "1,2\n# note\n3,x\n").unwrap();
        match read_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "1,2\n3\n").unwrap();
        assert!(matches!(read_csv(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn file_dataset_reads_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.csv");
        fs::write(&p, "1,1\n-1,-1\n").unwrap();
        let spec = DatasetSpec {
            path: Some(p),
            ..DatasetSpec::new(DatasetKind::File)
        };
        let mut ds = make_dataset(&spec, 0).unwrap();
        let b = ds.next_batch(50).unwrap();
        assert!(b.iter_rows().all(|r| r == [1.0, 1.0] || r == [-1.0, -1.0]));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = JsonlWriter::create(&p).unwrap();
        w.write(&[1.0, 2.0]).unwrap();
        w.write(&[3.0, 4.0]).unwrap();
        drop(w);
        let back: Vec<[f64; 2]> = read_jsonl(&p).unwrap();
        assert_eq!(back, vec![[1.0, 2.0], [3.0, 4.0]]);
    }
}
