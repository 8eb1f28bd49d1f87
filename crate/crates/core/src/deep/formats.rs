//! On-disk formats shared with the upsampler trainer.
//!
//! FTS1 (one tensor, little-endian throughout):
//!
//! ```text
//! "FTS1" | u32 version=1 | u32 rank | u32 dims[rank] | u32 dtype (0 = f32)
//!        | u32 patch_size | u32 source_h | u32 source_w | f32 payload (C order)
//! ```
//!
//! WAR1 (named tensors plus a JSON manifest):
//!
//! ```text
//! "WAR1" | u32 version=1 | u32 manifest_len | manifest (UTF-8 JSON)
//!        | records until EOF: u16 name_len | name | u32 rank | u32 dims[rank] | f32 payload
//! ```
//!
//! The manifest's `layers` array lists every record as `{name, dims}`.

use std::fs;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FTS_MAGIC: &[u8; 4] = b"FTS1";
pub const WAR_MAGIC: &[u8; 4] = b"WAR1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

/// Decoded FTS1 file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub tensor: Tensor,
    pub patch_size: u32,
    pub source_dims: (u32, u32),
}

const MAX_FTS_HEADER: usize = 28 + 4 * 4;
const IO_CHUNK: usize = 1 << 20;

fn encode_fts_header(dims: &[usize], patch_size: u32, source_dims: (u32, u32)) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAX_FTS_HEADER);
    out.extend_from_slice(FTS_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, dims.len() as u32);
    for &d in dims {
        push_u32(&mut out, d as u32);
    }
    push_u32(&mut out, DTYPE_F32);
    push_u32(&mut out, patch_size);
    push_u32(&mut out, source_dims.0);
    push_u32(&mut out, source_dims.1);
    out
}

pub fn encode_fts(tensor: &Tensor, patch_size: u32, source_dims: (u32, u32)) -> Vec<u8> {
    let mut out = encode_fts_header(tensor.dims(), patch_size, source_dims);
    push_f32s(&mut out, tensor.data());
    out
}

pub fn decode_fts(bytes: &[u8]) -> Result<FeatureFile> {
    let mut r = Reader::new(bytes);
    r.magic(FTS_MAGIC)?;
    r.version()?;
    let dims = r.dims()?;
    let dtype_at = r.offset();
    let dtype = r.u32()?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(dtype_at, format!("unsupported dtype code {dtype}")));
    }
    let patch_size = r.u32()?;
    let source_dims = (r.u32()?, r.u32()?);
    let tensor = r.payload(dims)?;
    if !r.at_end() {
        return Err(Error::format(r.offset(), "trailing bytes after payload"));
    }
    Ok(FeatureFile {
        tensor,
        patch_size,
        source_dims,
    })
}

pub fn write_fts(path: impl AsRef<Path>, tensor: &Tensor, patch_size: u32, source_dims: (u32, u32)) -> Result<()> {
    let header = encode_fts_header(tensor.dims(), patch_size, source_dims);
    atomic_write_with(path.as_ref(), |w| {
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(IO_CHUNK);
        for chunk in tensor.data().chunks(IO_CHUNK / 4) {
            buf.clear();
            push_f32s(&mut buf, chunk);
            w.write_all(&buf)?;
        }
        Ok(())
    })
}

/// Reads an FTS1 file, streaming the payload straight into the tensor
/// buffer so no second copy of the data is held.
pub fn read_fts(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let mut file = fs::File::open(path)?;
    let total = file.metadata()?.len();
    let mut head = Vec::with_capacity(MAX_FTS_HEADER);
    (&mut file).take(MAX_FTS_HEADER as u64).read_to_end(&mut head)?;
    let mut r = Reader::new(&head);
    r.magic(FTS_MAGIC)?;
    r.version()?;
    let dims = r.dims()?;
    let dtype_at = r.offset();
    let dtype = r.u32()?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(dtype_at, format!("unsupported dtype code {dtype}")));
    }
    let patch_size = r.u32()?;
    let source_dims = (r.u32()?, r.u32()?);
    let header_len = r.offset();
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::format(header_len, format!("dims {dims:?} overflow")))?;
    let expected = header_len + 4 * n as u64;
    if total < expected {
        return Err(Error::format(
            header_len,
            format!("truncated: need {} payload bytes, {} remain", 4 * n, total - header_len),
        ));
    }
    if total > expected {
        return Err(Error::format(expected, "trailing bytes after payload"));
    }
    file.seek(SeekFrom::Start(header_len))?;
    let mut data = Vec::with_capacity(n);
    let mut buf = vec![0u8; IO_CHUNK];
    while data.len() < n {
        let want = ((n - data.len()) * 4).min(IO_CHUNK);
        file.read_exact(&mut buf[..want])?;
        data.extend(buf[..want].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
    }
    Ok(FeatureFile {
        tensor: Tensor::new(dims, data)?,
        patch_size,
        source_dims,
    })
}

/// Manifest plus named tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensorArchive {
    pub manifest: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl NamedTensorArchive {
    pub fn new(manifest: Value) -> Self {
        Self {
            manifest,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Archive(format!("missing layer {name:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut manifest = self.manifest.clone();
        let layers: Vec<Value> = self
            .tensors
            .iter()
            .map(|(n, t)| json!({"name": n, "dims": t.dims()}))
            .collect();
        match manifest.as_object_mut() {
            Some(obj) => {
                obj.insert("layers".into(), Value::Array(layers));
            }
            None => return Err(Error::arg("archive manifest must be a JSON object")),
        }
        let text = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(WAR_MAGIC);
        push_u32(&mut out, FORMAT_VERSION);
        push_u32(&mut out, text.len() as u32);
        out.extend_from_slice(&text);
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::arg(format!("layer name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            push_u32(&mut out, t.rank() as u32);
            for &d in t.dims() {
                push_u32(&mut out, d as u32);
            }
            push_f32s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(WAR_MAGIC)?;
        r.version()?;
        let len = r.u32()? as usize;
        let at = r.offset();
        let text = r.take(len)?;
        let manifest: Value = serde_json::from_slice(text)
            .map_err(|e| Error::format(at, format!("manifest is not valid JSON: {e}")))?;
        let mut tensors = Vec::new();
        while !r.at_end() {
            let name_len = r.u16()? as usize;
            let at = r.offset();
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(at, "layer name is not UTF-8"))?
                .to_string();
            let dims = r.dims()?;
            tensors.push((name, r.payload(dims)?));
        }
        let listed = manifest
            .get("layers")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Archive("manifest has no layer list".into()))?;
        for entry in listed {
            let name = entry
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Archive("layer entry without a name".into()))?;
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Archive(format!("missing layer {name:?}")))?;
            let dims: Vec<usize> = entry
                .get("dims")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_u64).map(|d| d as usize).collect())
                .unwrap_or_default();
            if dims != t.dims() {
                return Err(Error::Archive(format!(
                    "layer {name:?} has dims {:?}, manifest lists {dims:?}",
                    t.dims()
                )));
            }
        }
        if listed.len() != tensors.len() {
            return Err(Error::Archive(format!(
                "{} records present but manifest lists {}",
                tensors.len(),
                listed.len()
            )));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path.as_ref(), &self.encode()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Writes to a sibling temp file then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write_with(path, |w| w.write_all(bytes))
}

/// Writes through `fill` into a temporary sibling, then renames over `path`.
pub fn atomic_write_with(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::arg(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        fill(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::format(
                self.offset(),
                format!("truncated: need {n} bytes, {remaining} remain"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(expected)),
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.offset();
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let at = self.offset();
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::format(at, format!("rank {rank} outside 1..=4")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = self.offset();
            let d = self.u32()? as usize;
            if d == 0 {
                return Err(Error::format(at, "zero extent"));
            }
            dims.push(d);
        }
        Ok(dims)
    }

    fn payload(&mut self, dims: Vec<usize>) -> Result<Tensor> {
        let at = self.offset();
        let bytes = dims
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(at, format!("dims {dims:?} overflow")))?;
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(dims, data).map_err(|e| Error::format(at, e.to_string()))
    }
}
