//! Binary tensor container and CSV export.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! magic    "RGAE"            4 bytes
//! version  u32               currently 1
//! count    u32               number of records
//! record*  name_len u16, name (UTF-8), dtype u8 (1 = f64, 2 = f32),
//!          ndim u8, dims u64 × ndim, payload (row-major values)
//! ```
//!
//! Record names follow `<module>/<layer>/<kind>[.<qualifier>]` with `kind`
//! one of `attn`, `grad_attn`, `param`, `map`.

mod run_config;

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

pub use run_config::RunConfig;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RGAE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

const KINDS: [&str; 4] = ["attn", "grad_attn", "param", "map"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F64 = 1,
    F32 = 2,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

impl Record {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }
}

/// Checks the `<module>/<layer>/<kind>[.<qualifier>]` grammar.
pub fn validate_name(name: &str) -> Result<()> {
    let bad = || Error::InvalidName(name.to_string());
    if name.len() > u16::MAX as usize {
        return Err(bad());
    }
    let parts: Vec<&str> = name.split('/').collect();
    let [module, layer, kind] = parts[..] else {
        return Err(bad());
    };
    let ident = |s: &str| {
        !s.is_empty()
            && s.chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
    };
    if !ident(module) || !ident(layer) {
        return Err(bad());
    }
    let (kind, qualifier) = match kind.split_once('.') {
        Some((k, q)) => (k, Some(q)),
        None => (kind, None),
    };
    if !KINDS.contains(&kind) || qualifier.is_some_and(|q| !ident(q)) {
        return Err(bad());
    }
    Ok(())
}

/// Serialises records with an explicit per-record dtype.
pub fn encode(records: &[(Record, Dtype)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(records.len())
        .map_err(|_| Error::InvalidShape("too many records".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());

    let mut seen = HashSet::new();
    for (rec, dtype) in records {
        validate_name(&rec.name)?;
        if !seen.insert(rec.name.as_str()) {
            return Err(Error::DuplicateName(rec.name.clone()));
        }
        if !rec.tensor.all_finite() {
            return Err(Error::NonFinite(rec.name.clone()));
        }
        let ndim = u8::try_from(rec.tensor.ndim())
            .map_err(|_| Error::InvalidShape(format!("`{}` has too many dims", rec.name)))?;
        buf.extend_from_slice(&(rec.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(rec.name.as_bytes());
        buf.push(*dtype as u8);
        buf.push(ndim);
        for &d in rec.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F64 => {
                for v in rec.tensor.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F32 => {
                for &v in rec.tensor.data() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    Ok(buf)
}

/// Writes records as f64 and returns the number of bytes written.
pub fn write_trace(path: impl AsRef<Path>, records: &[Record]) -> Result<u64> {
    let tagged: Vec<(Record, Dtype)> = records.iter().map(|r| (r.clone(), Dtype::F64)).collect();
    let bytes = encode(&tagged)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(bytes.len() as u64)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parses a container; f32 payloads are widened to f64.
pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4) != Some(MAGIC.as_slice()) {
        return Err(Error::BadMagic);
    }
    let header = |v: Option<u32>| v.ok_or_else(|| Error::Truncated("<header>".into()));
    let version = header(cur.u32())?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = header(cur.u32())?;

    let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
    let mut seen = HashSet::new();
    for i in 0..count {
        let placeholder = format!("<record {i}>");
        let trunc = |n: &str| Error::Truncated(n.to_string());
        let name_len = cur.u16().ok_or_else(|| trunc(&placeholder))? as usize;
        let raw = cur.take(name_len).ok_or_else(|| trunc(&placeholder))?;
        let name = String::from_utf8(raw.to_vec()).map_err(|_| Error::InvalidName(placeholder))?;
        validate_name(&name)?;
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let code = cur.u8().ok_or_else(|| trunc(&name))?;
        let dtype = match code {
            1 => Dtype::F64,
            2 => Dtype::F32,
            code => return Err(Error::UnknownDtype { name, code }),
        };
        let ndim = cur.u8().ok_or_else(|| trunc(&name))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = cur.u64().ok_or_else(|| trunc(&name))?;
            shape.push(usize::try_from(d).map_err(|_| trunc(&name))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| trunc(&name))?;
        let nbytes = numel.checked_mul(dtype.size()).ok_or_else(|| trunc(&name))?;
        let payload = cur.take(nbytes).ok_or_else(|| trunc(&name))?;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
        };
        records.push(Record::new(name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    decode(&fs::read(path)?)
}

pub fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Tensor> {
    records
        .iter()
        .find(|r| r.name == name)
        .map(|r| &r.tensor)
        .ok_or_else(|| Error::MissingRecord(name.to_string()))
}

/// `%.17g`-style formatting: shortest fixed or exponent form with 17
/// significant digits and trailing zeros removed.
pub fn format_g17(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        strip_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", strip_zeros(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn strip_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn csv_string(map: &Tensor) -> Result<String> {
    let (rows, cols) = match map.shape() {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        other => {
            return Err(Error::InvalidShape(format!(
                "csv export needs a 2-D map, got {other:?}"
            )))
        }
    };
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = map.data()[r * cols..(r + 1) * cols]
            .iter()
            .map(|&v| format_g17(v))
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn export_csv(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, csv_string(map)?)?;
    Ok(())
}

pub fn parse_csv(text: &str, origin: &Path) -> Result<Tensor> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    parse_csv(&fs::read_to_string(path)?, path)
}
