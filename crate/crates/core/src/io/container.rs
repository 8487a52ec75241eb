//! The `SQNT` packed-model container.
//!
//! ```text
//! "SQNT" | version u16 | record count u32
//! per record:
//!   name_len u16 | name (UTF-8)
//!   rank u8 | dims u32 x rank
//!   flags u8        bit0: full precision, bit1: trailing alpha,
//!                   bits 4..8: activation bit width when bit1 is set
//!   k u8 | min f32 | max f32
//!   mask            ceil(n / 8) bytes, MSB first (absent for full precision)
//!   code count u32
//!   codes           full precision: count x f32
//!                   k == 32:        count x f32 (kept values)
//!                   otherwise:      ceil(count * k / 8) bytes, MSB first,
//!                                   each entry = sign bit + (k-1)-bit level
//!   [alpha f32]
//! ```
//!
//! Multi-byte fields are little-endian.

use std::io::Write;

use crate::error::{Error, Result};
use crate::kernels::{decode_nonzero, ClampMode, GridCode, QuantParams, SparsityMask};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SQNT";
pub const VERSION: u16 = 1;

const FLAG_FULL: u8 = 0b0000_0001;
const FLAG_ALPHA: u8 = 0b0000_0010;
const FLAG_RESERVED: u8 = 0b0000_1100;

/// Clipping level of the quantized activations feeding a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActQuant {
    pub alpha: f32,
    pub k_act: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Codes {
    Grid(Vec<GridCode>),
    /// Unquantized kept values, used when `k == 32`.
    Raw(Vec<f32>),
}

impl Codes {
    pub fn len(&self) -> usize {
        match self {
            Codes::Grid(c) => c.len(),
            Codes::Raw(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mask, grid and codes of one sparsified (and usually quantized) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseQuantRecord {
    pub k: u32,
    pub min: f32,
    pub max: f32,
    pub mask: SparsityMask,
    pub codes: Codes,
}

impl SparseQuantRecord {
    pub fn quant_params(&self) -> Result<Option<QuantParams>> {
        if self.k == 32 {
            return Ok(None);
        }
        QuantParams::new(self.k, self.min, self.max, ClampMode::None)
            .map(Some)
            .map_err(|e| Error::Format(format!("bad quantization range: {e}")))
    }

    pub fn mask_bytes(&self) -> usize {
        self.mask.len().div_ceil(8)
    }

    pub fn code_bytes(&self) -> usize {
        match &self.codes {
            Codes::Grid(c) => (c.len() * self.k as usize).div_ceil(8),
            Codes::Raw(c) => c.len() * 4,
        }
    }

    pub fn decode(&self, shape: &[usize]) -> Result<Tensor> {
        match (&self.codes, self.quant_params()?) {
            (Codes::Grid(codes), Some(qp)) => decode_nonzero(shape, &self.mask, codes, &qp),
            (Codes::Raw(values), None) => {
                if values.len() != self.mask.count_kept() {
                    return Err(Error::Corruption(format!(
                        "{} values for {} kept weights",
                        values.len(),
                        self.mask.count_kept()
                    )));
                }
                let mut it = values.iter();
                let data = self
                    .mask
                    .bits()
                    .iter()
                    .map(|&keep| if keep { *it.next().unwrap() } else { 0.0 })
                    .collect();
                Tensor::new(shape.to_vec(), data)
            }
            _ => Err(Error::Format(format!(
                "codes do not match bit width {}",
                self.k
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordBody {
    Full(Vec<f32>),
    Sparse(SparseQuantRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub body: RecordBody,
    pub act: Option<ActQuant>,
}

impl Record {
    pub fn full(name: impl Into<String>, tensor: &Tensor) -> Self {
        Record {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            body: RecordBody::Full(tensor.data().to_vec()),
            act: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_full_precision(&self) -> bool {
        matches!(self.body, RecordBody::Full(_))
    }

    /// Elements that are stored (kept), i.e. nonzero by construction.
    pub fn kept(&self) -> usize {
        match &self.body {
            RecordBody::Full(_) => self.numel(),
            RecordBody::Sparse(s) => s.mask.count_kept(),
        }
    }

    pub fn bits(&self) -> u32 {
        match &self.body {
            RecordBody::Full(_) => 32,
            RecordBody::Sparse(s) => s.k,
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        match &self.body {
            RecordBody::Full(data) => Tensor::new(self.shape.clone(), data.clone()),
            RecordBody::Sparse(s) => s.decode(&self.shape),
        }
    }
}

/// An ordered list of tensor records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PackedModel {
    pub records: Vec<Record>,
}

impl PackedModel {
    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_packed(&mut out, self)?;
        Ok(out)
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    used: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            used: 8,
        }
    }

    fn push(&mut self, value: u32, width: u32) {
        for shift in (0..width).rev() {
            if self.used == 8 {
                self.bytes.push(0);
                self.used = 0;
            }
            let bit = ((value >> shift) & 1) as u8;
            *self.bytes.last_mut().unwrap() |= bit << (7 - self.used);
            self.used += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn read(&mut self, width: u32) -> u32 {
        let mut v = 0u32;
        for _ in 0..width {
            let byte = self.bytes[self.pos / 8];
            let bit = (byte >> (7 - (self.pos % 8))) & 1;
            v = (v << 1) | bit as u32;
            self.pos += 1;
        }
        v
    }

    /// Whether every bit after the current position is zero.
    fn rest_is_zero(&self) -> bool {
        (self.pos..self.bytes.len() * 8).all(|p| (self.bytes[p / 8] >> (7 - (p % 8))) & 1 == 0)
    }
}

fn pack_mask(mask: &SparsityMask) -> Vec<u8> {
    let mut w = BitWriter::new();
    for &b in mask.bits() {
        w.push(b as u32, 1);
    }
    w.bytes
}

fn pack_codes(codes: &[GridCode], k: u32) -> Vec<u8> {
    let mut w = BitWriter::new();
    for c in codes {
        w.push(c.negative as u32, 1);
        w.push(c.level, k - 1);
    }
    w.bytes
}

fn f32s_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serializes `model` into `out`.
pub fn write_packed<W: Write>(out: &mut W, model: &PackedModel) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(
        &u32::try_from(model.records.len())
            .map_err(too_big)?
            .to_le_bytes(),
    );
    for r in &model.records {
        encode_record(&mut buf, r)?;
    }
    out.write_all(&buf)?;
    Ok(())
}

fn too_big<E>(_: E) -> Error {
    Error::Format("value does not fit the container field".into())
}

fn encode_record(buf: &mut Vec<u8>, r: &Record) -> Result<()> {
    let name = r.name.as_bytes();
    buf.extend_from_slice(&u16::try_from(name.len()).map_err(too_big)?.to_le_bytes());
    buf.extend_from_slice(name);
    buf.push(u8::try_from(r.shape.len()).map_err(too_big)?);
    for &d in &r.shape {
        buf.extend_from_slice(&u32::try_from(d).map_err(too_big)?.to_le_bytes());
    }
    let mut flags = 0u8;
    if r.is_full_precision() {
        flags |= FLAG_FULL;
    }
    if let Some(a) = r.act {
        if !(1..16).contains(&a.k_act) {
            return Err(Error::Format(format!(
                "activation width {} does not fit the flags nibble",
                a.k_act
            )));
        }
        flags |= FLAG_ALPHA | ((a.k_act as u8) << 4);
    }
    buf.push(flags);
    match &r.body {
        RecordBody::Full(data) => {
            if data.len() != r.numel() {
                return Err(Error::Dimension(format!(
                    "record `{}` holds {} values for shape {:?}",
                    r.name,
                    data.len(),
                    r.shape
                )));
            }
            buf.push(32);
            buf.extend_from_slice(&0f32.to_le_bytes());
            buf.extend_from_slice(&0f32.to_le_bytes());
            buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
            buf.extend_from_slice(&f32s_le(data));
        }
        RecordBody::Sparse(s) => {
            if s.mask.len() != r.numel() {
                return Err(Error::Dimension(format!(
                    "record `{}` mask has {} bits for shape {:?}",
                    r.name,
                    s.mask.len(),
                    r.shape
                )));
            }
            if s.codes.len() != s.mask.count_kept() {
                return Err(Error::Corruption(format!(
                    "record `{}` has {} codes for {} kept weights",
                    r.name,
                    s.codes.len(),
                    s.mask.count_kept()
                )));
            }
            buf.push(u8::try_from(s.k).map_err(too_big)?);
            buf.extend_from_slice(&s.min.to_le_bytes());
            buf.extend_from_slice(&s.max.to_le_bytes());
            buf.extend_from_slice(&pack_mask(&s.mask));
            buf.extend_from_slice(&(s.codes.len() as u32).to_le_bytes());
            match &s.codes {
                Codes::Grid(codes) => {
                    if s.k == 32 {
                        return Err(Error::Format("grid codes need k < 32".into()));
                    }
                    buf.extend_from_slice(&pack_codes(codes, s.k));
                }
                Codes::Raw(values) => {
                    if s.k != 32 {
                        return Err(Error::Format("raw values need k == 32".into()));
                    }
                    buf.extend_from_slice(&f32s_le(values));
                }
            }
        }
    }
    if let Some(a) = r.act {
        buf.extend_from_slice(&a.alpha.to_le_bytes());
    }
    Ok(())
}

pub fn save_packed(model: &PackedModel) -> Result<Vec<u8>> {
    model.to_bytes()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated stream while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| too_big::<()>(()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses a container produced by [`save_packed`].
pub fn load_packed(bytes: &[u8]) -> Result<PackedModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected \"SQNT\"".into()));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        records.push(decode_record(&mut cur)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last record",
            bytes.len() - cur.pos
        )));
    }
    Ok(PackedModel { records })
}

fn decode_record(cur: &mut Cursor<'_>) -> Result<Record> {
    let name_len = cur.u16("name length")? as usize;
    let name = std::str::from_utf8(cur.take(name_len, "name")?)
        .map_err(|_| Error::Format("record name is not UTF-8".into()))?
        .to_string();
    let rank = cur.u8("rank")? as usize;
    if rank == 0 {
        return Err(Error::Format(format!("record `{name}` has rank 0")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = cur.u32("dimension")? as usize;
        if d == 0 {
            return Err(Error::Format(format!(
                "record `{name}` has a zero dimension"
            )));
        }
        shape.push(d);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("record `{name}` is too large")))?;
    let flags = cur.u8("flags")?;
    if flags & FLAG_RESERVED != 0 {
        return Err(Error::Format(format!(
            "record `{name}` sets reserved flag bits"
        )));
    }
    let k = cur.u8("bit width")? as u32;
    let min = cur.f32("min")?;
    let max = cur.f32("max")?;

    let body = if flags & FLAG_FULL != 0 {
        if k != 32 {
            return Err(Error::Format(format!(
                "full-precision record `{name}` declares k = {k}"
            )));
        }
        let count = cur.u32("code count")? as usize;
        if count != numel {
            return Err(Error::Corruption(format!(
                "full-precision record `{name}` holds {count} values for {numel} elements"
            )));
        }
        RecordBody::Full(cur.f32s(count, "values")?)
    } else {
        if !(k == 32 || (2..=16).contains(&k)) {
            return Err(Error::Format(format!("record `{name}` has bit width {k}")));
        }
        let mask_bytes = cur.take(numel.div_ceil(8), "mask")?;
        let mut reader = BitReader {
            bytes: mask_bytes,
            pos: 0,
        };
        let bits: Vec<bool> = (0..numel).map(|_| reader.read(1) == 1).collect();
        if !reader.rest_is_zero() {
            return Err(Error::Corruption(format!(
                "record `{name}` has nonzero mask padding"
            )));
        }
        let mask = SparsityMask::from_bits(bits);
        let count = cur.u32("code count")? as usize;
        if count != mask.count_kept() {
            return Err(Error::Corruption(format!(
                "record `{name}`: mask keeps {} weights but {count} codes are stored",
                mask.count_kept()
            )));
        }
        let codes = if k == 32 {
            Codes::Raw(cur.f32s(count, "values")?)
        } else {
            QuantParams::new(k, min, max, ClampMode::None)
                .map_err(|e| Error::Format(format!("record `{name}`: {e}")))?;
            let code_bytes = cur.take((count * k as usize).div_ceil(8), "codes")?;
            let mut reader = BitReader {
                bytes: code_bytes,
                pos: 0,
            };
            let codes = (0..count)
                .map(|_| GridCode {
                    negative: reader.read(1) == 1,
                    level: reader.read(k - 1),
                })
                .collect();
            if !reader.rest_is_zero() {
                return Err(Error::Corruption(format!(
                    "record `{name}` has nonzero code padding"
                )));
            }
            Codes::Grid(codes)
        };
        RecordBody::Sparse(SparseQuantRecord {
            k,
            min,
            max,
            mask,
            codes,
        })
    };
    let act = if flags & FLAG_ALPHA != 0 {
        let k_act = (flags >> 4) as u32;
        if k_act == 0 {
            return Err(Error::Format(format!(
                "record `{name}` has an alpha but no activation width"
            )));
        }
        Some(ActQuant {
            alpha: cur.f32("alpha")?,
            k_act,
        })
    } else {
        None
    };
    Ok(Record {
        name,
        shape,
        body,
        act,
    })
}
