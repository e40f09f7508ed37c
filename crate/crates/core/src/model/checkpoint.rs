//! Checkpoint containers. A checkpoint is a magic string, a format version,
//! a JSON metadata document (configuration, step count, vocabulary checksum,
//! metric snapshot, tensor manifest), and the raw tensor values as
//! little-endian f32 in manifest order. Adapters use the same layout in a
//! separate container that names the base checksum they were trained
//! against.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::lora::{LoraAdapter, LoraEntry};
use super::{ModelConfig, ModelError, Seq2Seq, TensorView, TensorViewMut};
use ndarray::Array2;

const MODEL_MAGIC: &[u8; 8] = b"GLSKMDL\n";
const ADAPTER_MAGIC: &[u8; 8] = b"GLSKLRA\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub step: u64,
    /// Fingerprint of the tokenizer the model was trained with, when known.
    pub vocab_checksum: Option<String>,
    /// Free-form metric snapshot recorded at save time.
    pub metrics: Option<serde_json::Value>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorInfo {
    name: String,
    dims: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelHeader {
    meta: CheckpointMeta,
    tensors: Vec<TensorInfo>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct AdapterHeader {
    rank: usize,
    alpha: f32,
    base_checksum: String,
    entries: Vec<AdapterEntryInfo>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct AdapterEntryInfo {
    name: String,
    a_dims: [usize; 2],
    b_dims: [usize; 2],
}

fn write_container(
    path: &Path,
    magic: &[u8; 8],
    header_json: &[u8],
    tensors: impl FnOnce(&mut BufWriter<File>) -> Result<(), ModelError>,
) -> Result<(), ModelError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(magic)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(header_json)?;
    tensors(&mut out)?;
    out.flush()?;
    Ok(())
}

fn read_header(reader: &mut BufReader<File>, magic: &[u8; 8]) -> Result<Vec<u8>, ModelError> {
    let mut found_magic = [0u8; 8];
    reader.read_exact(&mut found_magic)?;
    if &found_magic != magic {
        return Err(ModelError::Malformed("unrecognised container magic".into()));
    }
    let mut version = [0u8; 4];
    reader.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion { found: version });
    }
    let mut len = [0u8; 8];
    reader.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    reader.read_exact(&mut header)?;
    Ok(header)
}

fn write_values(out: &mut BufWriter<File>, values: impl Iterator<Item = f32>) -> Result<(), ModelError> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_values(reader: &mut BufReader<File>, count: usize) -> Result<Vec<f32>, ModelError> {
    let mut bytes = vec![0u8; count * 4];
    reader.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn expect_end(reader: &mut BufReader<File>) -> Result<(), ModelError> {
    let mut probe = [0u8; 1];
    match reader.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(ModelError::Malformed("trailing bytes after tensors".into())),
    }
}

pub fn save_seq2seq(
    path: &Path,
    model: &Seq2Seq<f32>,
    meta: &CheckpointMeta,
) -> Result<(), ModelError> {
    let mut tensors = Vec::new();
    model.params().visit(&mut |name, view| {
        let dims = match view {
            TensorView::M(m) => vec![m.nrows(), m.ncols()],
            TensorView::V(v) => vec![v.len()],
        };
        tensors.push(TensorInfo { name, dims });
    });
    let header = ModelHeader {
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| ModelError::Malformed(format!("metadata encode: {e}")))?;
    write_container(path, MODEL_MAGIC, &json, |out| {
        let mut res = Ok(());
        model.params().visit(&mut |_, view| {
            if res.is_err() {
                return;
            }
            let mut values = Vec::with_capacity(view.len());
            view.for_each(|v| values.push(v));
            res = write_values(out, values.into_iter());
        });
        res
    })
}

pub fn load_seq2seq(path: &Path) -> Result<(Seq2Seq<f32>, CheckpointMeta), ModelError> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header(&mut reader, MODEL_MAGIC)?;
    let header: ModelHeader = serde_json::from_slice(&header)
        .map_err(|e| ModelError::Malformed(format!("metadata decode: {e}")))?;
    let mut model = Seq2Seq::<f32>::new(header.meta.config.clone(), 0)?;
    let mut manifest = header.tensors.iter();
    let mut res: Result<(), ModelError> = Ok(());
    model.params_mut().visit_mut(&mut |name, mut view| {
        if res.is_err() {
            return;
        }
        let Some(info) = manifest.next() else {
            res = Err(ModelError::Malformed(format!(
                "manifest ended before tensor {name}"
            )));
            return;
        };
        let expected_dims: Vec<usize> = match &view {
            TensorViewMut::M(m) => vec![m.nrows(), m.ncols()],
            TensorViewMut::V(v) => vec![v.len()],
        };
        if info.name != name || info.dims != expected_dims {
            res = Err(ModelError::Malformed(format!(
                "tensor {name} {expected_dims:?} does not match manifest entry {} {:?}",
                info.name, info.dims
            )));
            return;
        }
        match read_values(&mut reader, view.len()) {
            Ok(values) => {
                let mut it = values.into_iter();
                view.fill_from(|| it.next().expect("sized read"));
            }
            Err(e) => res = Err(e),
        }
    });
    res?;
    if manifest.next().is_some() {
        return Err(ModelError::Malformed(
            "manifest lists tensors the model does not have".into(),
        ));
    }
    expect_end(&mut reader)?;
    Ok((model, header.meta))
}

pub fn save_adapter(path: &Path, adapter: &LoraAdapter<f32>) -> Result<(), ModelError> {
    let header = AdapterHeader {
        rank: adapter.rank(),
        alpha: adapter.alpha(),
        base_checksum: adapter.base_checksum().to_string(),
        entries: adapter
            .entries()
            .iter()
            .map(|e| AdapterEntryInfo {
                name: e.name.clone(),
                a_dims: [e.a.nrows(), e.a.ncols()],
                b_dims: [e.b.nrows(), e.b.ncols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| ModelError::Malformed(format!("metadata encode: {e}")))?;
    write_container(path, ADAPTER_MAGIC, &json, |out| {
        for entry in adapter.entries() {
            write_values(out, entry.a.iter().copied())?;
            write_values(out, entry.b.iter().copied())?;
        }
        Ok(())
    })
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter<f32>, ModelError> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header(&mut reader, ADAPTER_MAGIC)?;
    let header: AdapterHeader = serde_json::from_slice(&header)
        .map_err(|e| ModelError::Malformed(format!("metadata decode: {e}")))?;
    let mut entries = Vec::with_capacity(header.entries.len());
    for info in &header.entries {
        let a_values = read_values(&mut reader, info.a_dims[0] * info.a_dims[1])?;
        let b_values = read_values(&mut reader, info.b_dims[0] * info.b_dims[1])?;
        let a = Array2::from_shape_vec((info.a_dims[0], info.a_dims[1]), a_values)
            .map_err(|e| ModelError::Malformed(format!("factor shape: {e}")))?;
        let b = Array2::from_shape_vec((info.b_dims[0], info.b_dims[1]), b_values)
            .map_err(|e| ModelError::Malformed(format!("factor shape: {e}")))?;
        entries.push(LoraEntry {
            name: info.name.clone(),
            a,
            b,
        });
    }
    expect_end(&mut reader)?;
    Ok(LoraAdapter::from_parts(
        header.rank,
        header.alpha,
        header.base_checksum,
        entries,
    ))
}
