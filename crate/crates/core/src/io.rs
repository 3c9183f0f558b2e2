//! On-disk formats: volume files, network checkpoints, loss logs, JSON
//! reports and run manifests. Every write goes to a temporary file in the
//! destination directory and is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::models::{LesionSynthNet, MaskSynthNet, NetConfig};
use crate::nn::{Module, Parameter};
use crate::volume::{voxel_count, Dims, MaskVolume, Volume};
use pavae_autograd::Tensor;

pub const MAGIC: [u8; 4] = *b"PVAE";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Contents of a volume file.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Float(Volume),
    Mask(MaskVolume),
}

impl VolumeFile {
    pub fn dims(&self) -> Dims {
        match self {
            Self::Float(v) => v.dims(),
            Self::Mask(m) => m.dims(),
        }
    }

    /// Real-valued view; masks become 0.0 / 1.0.
    pub fn into_volume(self) -> Volume {
        match self {
            Self::Float(v) => v,
            Self::Mask(m) => m.to_volume(),
        }
    }
}

fn header(dtype: u8, dims: Dims) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype);
    out.extend_from_slice(&0u16.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("volume dims", format!("{dims:?} exceed u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_F32, v.dims())?;
    out.reserve(v.data().len() * 4);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_mask(m: &MaskVolume) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_U8, m.dims())?;
    out.extend_from_slice(m.data());
    Ok(out)
}

/// Parses a volume file image. `path` only labels errors.
pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<VolumeFile> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    if bytes[4] != VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: bytes[4],
        });
    }
    let dtype = bytes[5];
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => {
            return Err(Error::BadDtype {
                path: path.to_path_buf(),
                found: other,
            })
        }
    };
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("four bytes")) as usize;
    let dims = [dim(0), dim(1), dim(2)];
    let expected = HEADER_LEN + voxel_count(dims) * width;
    if bytes.len() != expected {
        return Err(truncated(expected));
    }
    let payload = &bytes[HEADER_LEN..];
    if dtype == DTYPE_U8 {
        if let Some((index, &value)) = payload.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::MaskRange {
                path: path.to_path_buf(),
                index,
                value,
            });
        }
        return Ok(VolumeFile::Mask(MaskVolume::new(dims, payload.to_vec())?));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    Ok(VolumeFile::Float(Volume::new(dims, data)?))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(v)?)
}

pub fn write_mask(path: &Path, m: &MaskVolume) -> Result<()> {
    write_atomic(path, &encode_mask(m)?)
}

pub fn read_volume_file(path: &Path) -> Result<VolumeFile> {
    decode_volume(path, &read_bytes(path)?)
}

/// Any volume file as real values.
pub fn read_volume(path: &Path) -> Result<Volume> {
    Ok(read_volume_file(path)?.into_volume())
}

/// A mask file (dtype 1).
pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    match read_volume_file(path)? {
        VolumeFile::Mask(m) => Ok(m),
        VolumeFile::Float(_) => Err(Error::invalid("mask file", format!("{} holds real values", path.display()))),
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loss log as CSV, one row per generator step.
pub fn loss_csv(log: &[LossReport]) -> String {
    let mut out = String::from(LossReport::CSV_HEADER);
    out.push('\n');
    for (i, r) in log.iter().enumerate() {
        out.push_str(&r.csv_row(i));
        out.push('\n');
    }
    out
}

pub fn write_loss_log(path: &Path, log: &[LossReport]) -> Result<()> {
    write_atomic(path, loss_csv(log).as_bytes())
}

/// Git-style object hash: SHA-256 over `"blob <len>\0"` followed by the content.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(content_hash(&read_bytes(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub id: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Mask,
    Lesion,
}

/// All parameters of a network plus what is needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: NetKind,
    pub net: NetConfig,
    pub conditioning_frozen: bool,
    /// Mask networks only: range of training conditions.
    pub cond_range: Option<(f64, f64)>,
    pub params: Vec<ParamRecord>,
}

fn records(params: Vec<&Parameter<f32>>) -> Vec<ParamRecord> {
    params
        .into_iter()
        .map(|p| ParamRecord {
            id: p.id().to_string(),
            shape: p.shape().to_vec(),
            data: p.value().data().to_vec(),
        })
        .collect()
}

fn restore(params: Vec<&mut Parameter<f32>>, stored: &[ParamRecord]) -> Result<()> {
    let by_id: BTreeMap<&str, &ParamRecord> = stored.iter().map(|r| (r.id.as_str(), r)).collect();
    if by_id.len() != stored.len() {
        return Err(Error::invalid("checkpoint", "duplicate parameter ids"));
    }
    let count = params.len();
    for p in params {
        let r = by_id
            .get(p.id())
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing parameter {}", p.id())))?;
        p.set_value(Tensor::from_vec(r.shape.clone(), r.data.clone())?)?;
    }
    if count != stored.len() {
        return Err(Error::invalid(
            "checkpoint",
            format!("{} stored parameters, network has {count}", stored.len()),
        ));
    }
    Ok(())
}

impl Checkpoint {
    pub fn of_mask_net(net: &MaskSynthNet<f32>) -> Self {
        Self {
            kind: NetKind::Mask,
            net: net.cfg,
            conditioning_frozen: net.conditioning_frozen,
            cond_range: Some(net.cond_range),
            params: records(net.params()),
        }
    }

    pub fn of_lesion_net(net: &LesionSynthNet<f32>) -> Self {
        Self {
            kind: NetKind::Lesion,
            net: net.cfg,
            conditioning_frozen: net.conditioning_frozen,
            cond_range: None,
            params: records(net.params()),
        }
    }

    fn expect(&self, kind: NetKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid("checkpoint", format!("holds a {:?} network, expected {kind:?}", self.kind)));
        }
        Ok(())
    }

    pub fn into_mask_net(self) -> Result<MaskSynthNet<f32>> {
        self.expect(NetKind::Mask)?;
        let mut net = MaskSynthNet::new(&self.net, &mut crate::train::init_rng(0))?;
        restore(net.params_mut(), &self.params)?;
        net.conditioning_frozen = self.conditioning_frozen;
        net.cond_range = self.cond_range.unwrap_or((0.0, 1.0));
        Ok(net)
    }

    pub fn into_lesion_net(self) -> Result<LesionSynthNet<f32>> {
        self.expect(NetKind::Lesion)?;
        let mut net = LesionSynthNet::new(&self.net, &mut crate::train::init_rng(0))?;
        restore(net.params_mut(), &self.params)?;
        net.conditioning_frozen = self.conditioning_frozen;
        Ok(net)
    }
}

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to re-execute a run: the command and its arguments,
/// the full configuration, and content hashes of inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments other than the configuration and output directory.
    pub args: BTreeMap<String, String>,
    pub config: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub version: String,
}

impl RunManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn new(command: &str, config: String, seed: u64) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            command: command.to_string(),
            args: BTreeMap::new(),
            config,
            seed,
            timestamp,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            version: ARTIFACT_VERSION.to_string(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    /// Hashes every regular file under `dir` except the manifest itself,
    /// keyed by path relative to `dir`.
    pub fn record_outputs(&mut self, dir: &Path) -> Result<()> {
        self.outputs.clear();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
                let path: PathBuf = entry.map_err(|e| Error::io(&d, e))?.path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let rel = path.strip_prefix(dir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                if rel != Self::FILE_NAME {
                    self.outputs.insert(rel, hash_file(&path)?);
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(Self::FILE_NAME), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(Self::FILE_NAME))
    }
}
