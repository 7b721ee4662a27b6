//! Byte-level file formats.
//!
//! Everything is little-endian. Two container formats share one layout:
//!
//! - `DSOW` weight images carry the quantized block parameter arrays in
//!   graph declaration order. Each record holds the array name, its
//!   dimensions, the fixed-point format, and the raw words as 32-bit
//!   two's-complement values. A CRC-32 trailer over all preceding bytes
//!   makes truncation and corruption detectable.
//! - `DSOF` float weight files carry every named parameter and buffer of a
//!   float model as 64-bit IEEE values, same framing, same trailer.
//!
//! Tensor files are plain text: a first line with the dimensions, then the
//! row-major values separated by whitespace.

use crate::error::{Error, Result};
use crate::fixed::{FixedPointFormat, QTensor};
use crate::model::Model;
use crate::tensor::Tensor;

pub const WEIGHT_IMAGE_MAGIC: [u8; 4] = *b"DSOW";
pub const FLOAT_WEIGHTS_MAGIC: [u8; 4] = *b"DSOF";
pub const FORMAT_VERSION: u32 = 1;

/// One array record of a weight image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub fmt: FixedPointFormat,
    pub words: Vec<i32>,
}

impl WeightRecord {
    pub fn from_qtensor(name: &str, t: &QTensor) -> WeightRecord {
        WeightRecord {
            name: name.to_string(),
            dims: t.shape().iter().map(|&d| d as u32).collect(),
            fmt: t.fmt(),
            words: t.words().to_vec(),
        }
    }

    pub fn to_qtensor(&self) -> Result<QTensor> {
        QTensor::from_words(
            self.dims.iter().map(|&d| d as usize).collect(),
            self.words.clone(),
            self.fmt,
        )
    }
}

/// One array record of a float weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f64>,
}

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4]) -> Writer {
        let mut buf = Vec::new();
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn finish(mut self) -> Vec<u8> {
        let checksum = crc32(&self.buf);
        self.buf.extend_from_slice(&checksum.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                field,
                reason: format!(
                    "need {} bytes, only {} remain",
                    n,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn i32(&mut self, field: &'static str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn str(&mut self, field: &'static str) -> Result<String> {
        let len = self.u32(field)? as usize;
        if len > 4096 {
            return Err(Error::Parse {
                offset: self.pos - 4,
                field,
                reason: format!("name length {} is implausible", len),
            });
        }
        let bytes = self.take(len, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Parse {
            offset: self.pos - len,
            field,
            reason: "invalid utf-8".to_string(),
        })
    }
}

/// Validate the magic/version header and the CRC-32 trailer, returning the
/// payload region between them.
fn check_envelope<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Reader<'a>> {
    if bytes.len() < 12 {
        return Err(Error::Parse {
            offset: 0,
            field: "header",
            reason: format!("{} bytes is shorter than any valid file", bytes.len()),
        });
    }
    if &bytes[..4] != magic {
        return Err(Error::Parse {
            offset: 0,
            field: "magic",
            reason: format!("expected {:?}", std::str::from_utf8(magic).unwrap_or("?")),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32(body);
    if stored != actual {
        return Err(Error::Parse {
            offset: bytes.len() - 4,
            field: "checksum",
            reason: format!("stored {:08x}, computed {:08x}", stored, actual),
        });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Parse {
            offset: 4,
            field: "version",
            reason: format!("unsupported version {}", version),
        });
    }
    Ok(r)
}

/// Serialize weight records into a `DSOW` image.
pub fn write_weight_image(records: &[WeightRecord]) -> Vec<u8> {
    let mut w = Writer::new(WEIGHT_IMAGE_MAGIC);
    w.u32(records.len() as u32);
    for r in records {
        w.str(&r.name);
        w.u32(r.dims.len() as u32);
        for &d in &r.dims {
            w.u32(d);
        }
        w.u32(r.fmt.total_bits() as u32);
        w.u32(r.fmt.frac_bits() as u32);
        for &word in &r.words {
            w.i32(word);
        }
    }
    w.finish()
}

/// Parse a `DSOW` image. Errors carry the byte offset and field name.
pub fn parse_weight_image(bytes: &[u8]) -> Result<Vec<WeightRecord>> {
    let mut r = check_envelope(bytes, &WEIGHT_IMAGE_MAGIC)?;
    let count = r.u32("array_count")? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str("name")?;
        let ndim = r.u32("ndim")? as usize;
        if ndim == 0 || ndim > 4 {
            return Err(Error::Parse {
                offset: r.pos - 4,
                field: "ndim",
                reason: format!("rank {} out of the supported 1..=4", ndim),
            });
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")?);
        }
        let total_bits = r.u32("total_bits")?;
        let frac_bits = r.u32("frac_bits")?;
        let fmt = FixedPointFormat::new(total_bits as u8, frac_bits as u8).map_err(|e| {
            Error::Parse {
                offset: r.pos - 8,
                field: "format",
                reason: e.to_string(),
            }
        })?;
        let len: usize = dims.iter().map(|&d| d as usize).product();
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            words.push(r.i32("words")?);
        }
        records.push(WeightRecord {
            name,
            dims,
            fmt,
            words,
        });
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            field: "trailer",
            reason: format!("{} unexpected trailing bytes", r.bytes.len() - r.pos),
        });
    }
    Ok(records)
}

/// Serialize a float model's parameters and buffers into a `DSOF` file.
pub fn write_model_weights(model: &Model) -> Vec<u8> {
    let mut w = Writer::new(FLOAT_WEIGHTS_MAGIC);
    let named: Vec<(String, &Tensor)> = model
        .named_params()
        .into_iter()
        .chain(model.named_buffers())
        .collect();
    w.u32(named.len() as u32);
    for (name, t) in named {
        w.str(&name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    w.finish()
}

/// Parse a `DSOF` file into records.
pub fn parse_model_weights(bytes: &[u8]) -> Result<Vec<FloatRecord>> {
    let mut r = check_envelope(bytes, &FLOAT_WEIGHTS_MAGIC)?;
    let count = r.u32("array_count")? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str("name")?;
        let ndim = r.u32("ndim")? as usize;
        if ndim == 0 || ndim > 4 {
            return Err(Error::Parse {
                offset: r.pos - 4,
                field: "ndim",
                reason: format!("rank {} out of the supported 1..=4", ndim),
            });
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")?);
        }
        let len: usize = dims.iter().map(|&d| d as usize).product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(r.f64("values")?);
        }
        records.push(FloatRecord { name, dims, values });
    }
    Ok(records)
}

/// Load a `DSOF` file's contents into a model with matching graph structure.
pub fn load_model_weights(model: &mut Model, bytes: &[u8]) -> Result<()> {
    let records = parse_model_weights(bytes)?;
    let names: Vec<String> = model
        .param_names()
        .into_iter()
        .chain(model.named_buffers().into_iter().map(|(n, _)| n))
        .collect();
    if names.len() != records.len() {
        return Err(Error::shape(
            "load_model_weights",
            format!("{} arrays", names.len()),
            format!("{} arrays", records.len()),
        ));
    }
    let n_params = model.params().len();
    // params first, then buffers, mirroring the writer
    for (i, record) in records.iter().enumerate() {
        if record.name != names[i] {
            return Err(Error::shape(
                "load_model_weights",
                format!("array `{}`", names[i]),
                format!("array `{}`", record.name),
            ));
        }
    }
    {
        let slots = model.params_mut();
        for (slot, record) in slots.into_iter().zip(records.iter().take(n_params)) {
            fill_tensor(slot, record)?;
        }
    }
    {
        let slots = model.buffers_mut();
        for (slot, record) in slots.into_iter().zip(records.iter().skip(n_params)) {
            fill_tensor(slot, record)?;
        }
    }
    Ok(())
}

fn fill_tensor(slot: &mut Tensor, record: &FloatRecord) -> Result<()> {
    let dims: Vec<usize> = record.dims.iter().map(|&d| d as usize).collect();
    if slot.shape() != dims.as_slice() {
        return Err(Error::shape(
            format!("load_model_weights `{}`", record.name),
            format!("{:?}", slot.shape()),
            format!("{:?}", dims),
        ));
    }
    *slot = Tensor::from_vec(dims, record.values.clone())?;
    Ok(())
}

/// Write a tensor as text: a dims line, then row-major values.
pub fn write_tensor_text(t: &Tensor) -> String {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let mut out = dims.join(" ");
    out.push('\n');
    for chunk in t.data().chunks(16) {
        let row: Vec<String> = chunk.iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Parse the text tensor format.
pub fn parse_tensor_text(s: &str) -> Result<Tensor> {
    let mut lines = s.lines();
    let dims_line = lines.next().ok_or_else(|| Error::Parse {
        offset: 0,
        field: "dims",
        reason: "empty tensor file".to_string(),
    })?;
    let shape: Vec<usize> = dims_line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<usize>().map_err(|_| Error::Parse {
                offset: 0,
                field: "dims",
                reason: format!("bad dimension `{}`", tok),
            })
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::new();
    for line in lines {
        for tok in line.split_whitespace() {
            values.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                offset: 0,
                field: "values",
                reason: format!("bad value `{}`", tok),
            })?);
        }
    }
    Tensor::from_vec(shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed::Q8_16;
    use crate::model::{Model, ModelSpec, Variant};

    fn sample_records() -> Vec<WeightRecord> {
        vec![
            WeightRecord {
                name: "a.weight".to_string(),
                dims: vec![2, 3],
                fmt: Q8_16,
                words: vec![1, -2, 3, -4, 5, -6],
            },
            WeightRecord {
                name: "a.bias".to_string(),
                dims: vec![2],
                fmt: Q8_16,
                words: vec![7, 8],
            },
        ]
    }

    #[test]
    fn weight_image_round_trips() {
        let records = sample_records();
        let bytes = write_weight_image(&records);
        let parsed = parse_weight_image(&bytes).unwrap();
        assert_eq!(parsed, records);
    }

    #[test]
    fn empty_image_is_parseable() {
        let bytes = write_weight_image(&[]);
        assert_eq!(parse_weight_image(&bytes).unwrap(), vec![]);
    }

    #[test]
    fn truncated_image_fails_with_offset() {
        let bytes = write_weight_image(&sample_records());
        let err = parse_weight_image(&bytes[..bytes.len() - 9]).unwrap_err();
        match err {
            Error::Parse { field, .. } => assert_eq!(field, "checksum"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut bytes = write_weight_image(&sample_records());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = parse_weight_image(&bytes).unwrap_err();
        assert!(matches!(err, Error::Parse { field: "checksum", .. }));
    }

    #[test]
    fn serialized_output_is_deterministic() {
        let a = write_weight_image(&sample_records());
        let b = write_weight_image(&sample_records());
        assert_eq!(a, b);
    }

    #[test]
    fn float_weights_round_trip_through_model() {
        let mut spec = ModelSpec::new(Variant::DsOdeNet, 2);
        spec.base_channels = 4;
        spec.c_iters = 1;
        let model = Model::init(&spec, 9).unwrap();
        let bytes = write_model_weights(&model);
        let mut restored = Model::zeros(&spec).unwrap();
        load_model_weights(&mut restored, &bytes).unwrap();
        assert_eq!(restored, model);
    }

    #[test]
    fn float_weights_reject_wrong_graph() {
        let mut spec = ModelSpec::new(Variant::DsOdeNet, 2);
        spec.base_channels = 4;
        spec.c_iters = 1;
        let model = Model::init(&spec, 9).unwrap();
        let bytes = write_model_weights(&model);
        let other = ModelSpec {
            base_channels: 8,
            ..spec.clone()
        };
        let mut target = Model::zeros(&other).unwrap();
        assert!(load_model_weights(&mut target, &bytes).is_err());
    }

    #[test]
    fn tensor_text_round_trips() {
        let t = Tensor::from_vec(vec![2, 2, 2], vec![0.5, -1.25, 3.0, 4.5, 5.0, -6.75, 7.0, 8.125]).unwrap();
        let text = write_tensor_text(&t);
        let parsed = parse_tensor_text(&text).unwrap();
        assert_eq!(parsed, t);
    }

    #[test]
    fn tensor_text_rejects_count_mismatch() {
        assert!(parse_tensor_text("2 2\n1.0 2.0 3.0").is_err());
    }

    #[test]
    fn crc32_known_value() {
        // standard test vector: CRC-32 of "123456789"
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }
}
