//! `.muxn` / `.muxf` containers.
//!
//! Both start with the magic `MUXN`, a `u16` version and a section-kind
//! byte (`0x01` compiled, `0x02` float). All integers are little-endian two's
//! complement; floats are IEEE-754 little-endian. Compiled line indices are
//! packed at `ceil(n*m/8)` bytes each. The full layout is in
//! `docs/format.md`.

use thiserror::Error;

use crate::compiler::{CompiledLayer, CompiledModel, ModelHeader, Requant, FORMAT_VERSION};
use crate::model::{Activation, BatchNorm, FloatLayer, FloatModel, LayerKind, LayerSpec, MAX_CLASSES};
use crate::mpu::ActivationSign;
use crate::pipeline::SegmentConfig;

pub const MAGIC: &[u8; 4] = b"MUXN";
pub const KIND_COMPILED: u8 = 0x01;
pub const KIND_FLOAT: u8 = 0x02;
const LAYER_TAG: u8 = 0x10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArtifactError {
    #[error("bad artifact: {0}")]
    BadArtifact(String),
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),
}

fn bad<T>(msg: impl Into<String>) -> Result<T, ArtifactError> {
    Err(ArtifactError::BadArtifact(msg.into()))
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.bytes(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

macro_rules! read_le {
    ($($name:ident: $t:ty),*) => {$(
        fn $name(&mut self) -> Result<$t, ArtifactError> {
            let b = self.take(std::mem::size_of::<$t>())?;
            Ok(<$t>::from_le_bytes(b.try_into().expect("sized slice")))
        }
    )*};
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8], ArtifactError> {
        if self.buf.len() - self.pos < len {
            return Err(ArtifactError::CorruptArtifact(format!(
                "truncated at byte {} (needed {len} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    read_le!(u8: u8, u16: u16, u32: u32, i32: i32, i64: i64, f32: f32, f64: f64);

    fn finish(&self) -> Result<(), ArtifactError> {
        if self.pos != self.buf.len() {
            return bad(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn read_preamble(r: &mut Reader<'_>, kind: u8) -> Result<(), ArtifactError> {
    let magic = r.take(4).map_err(|_| ArtifactError::BadArtifact("missing magic".into()))?;
    if magic != MAGIC {
        return bad("magic is not MUXN");
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return bad(format!("unsupported version {version}"));
    }
    let got = r.u8()?;
    if got != kind {
        return bad(format!("section kind 0x{got:02x}, expected 0x{kind:02x}"));
    }
    Ok(())
}

fn sign_byte(s: ActivationSign) -> u8 {
    match s {
        ActivationSign::Unsigned => 0,
        ActivationSign::TwosComplement => 1,
    }
}

fn read_sign(v: u8) -> Result<ActivationSign, ArtifactError> {
    match v {
        0 => Ok(ActivationSign::Unsigned),
        1 => Ok(ActivationSign::TwosComplement),
        _ => bad(format!("activation sign {v}")),
    }
}

fn act_byte(a: Activation) -> u8 {
    match a {
        Activation::None => 0,
        Activation::Relu => 1,
    }
}

fn read_act(v: u8) -> Result<Activation, ArtifactError> {
    match v {
        0 => Ok(Activation::None),
        1 => Ok(Activation::Relu),
        _ => bad(format!("activation {v}")),
    }
}

fn write_kind(w: &mut Writer, kind: LayerKind) {
    let (tag, k, s) = match kind {
        LayerKind::Conv1d { kernel, stride } => (0, kernel, stride),
        LayerKind::Linear => (1, 1, 1),
    };
    w.u8(tag);
    w.u16(k as u16);
    w.u16(s as u16);
}

fn read_kind(r: &mut Reader<'_>) -> Result<LayerKind, ArtifactError> {
    let tag = r.u8()?;
    let kernel = r.u16()? as u32;
    let stride = r.u16()? as u32;
    match tag {
        0 if kernel >= 1 && stride >= 1 => Ok(LayerKind::Conv1d { kernel, stride }),
        1 => Ok(LayerKind::Linear),
        _ => bad(format!("layer kind {tag} (kernel {kernel}, stride {stride})")),
    }
}

fn write_segment(w: &mut Writer, s: &SegmentConfig) {
    w.f64(s.segment_seconds);
    w.u16(s.votes_per_epoch as u16);
    w.f64(s.sample_rate_hz);
}

fn read_segment(r: &mut Reader<'_>) -> Result<SegmentConfig, ArtifactError> {
    Ok(SegmentConfig {
        segment_seconds: r.f64()?,
        votes_per_epoch: r.u16()? as u32,
        sample_rate_hz: r.f64()?,
    })
}

/// Bytes per packed line index.
pub fn index_bytes(n: u32, m: u32) -> usize {
    (n * m).div_ceil(8) as usize
}

/// Encodes a compiled model.
pub fn serialize(model: &CompiledModel) -> Vec<u8> {
    let h = &model.header;
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(KIND_COMPILED);
    w.u8(h.n as u8);
    w.u8(h.activation_bits as u8);
    w.u8(h.class_count as u8);
    w.u16(h.input_channels as u16);
    w.u32(h.input_len);
    w.f64(h.input_scale);
    w.i32(h.input_zero_point as i32);
    write_segment(&mut w, &h.segment);
    w.u16(model.layers.len() as u16);
    for l in &model.layers {
        w.u8(LAYER_TAG);
        write_kind(&mut w, l.kind);
        w.u8(act_byte(l.activation));
        w.u8(l.mode_m as u8);
        w.u8(sign_byte(l.input_sign));
        w.u16(l.in_channels as u16);
        w.u16(l.out_channels as u16);
        w.u32(l.row_len);
        w.u32(l.chunks_per_row);
        w.f64(l.input_scale);
        l.weight_scales.iter().for_each(|&s| w.f64(s));
        l.bias.iter().for_each(|&b| w.i64(b));
        match &l.requant {
            Some(rq) => {
                w.u8(1);
                for r in rq {
                    w.i32(r.multiplier);
                    w.u8(r.shift);
                }
            }
            None => w.u8(0),
        }
        let width = index_bytes(h.n, l.mode_m);
        for &i in &l.indices {
            w.bytes(&i.to_le_bytes()[..width]);
        }
    }
    w.0
}

/// Decodes and validates a compiled model.
pub fn deserialize(bytes: &[u8]) -> Result<CompiledModel, ArtifactError> {
    let mut r = Reader::new(bytes);
    read_preamble(&mut r, KIND_COMPILED)?;
    let n = r.u8()? as u32;
    let activation_bits = r.u8()? as u32;
    let class_count = r.u8()? as u32;
    if !(1..=8).contains(&n) {
        return bad(format!("n={n}"));
    }
    if !(1..=16).contains(&activation_bits) {
        return bad(format!("activation_bits={activation_bits}"));
    }
    if class_count == 0 || class_count > MAX_CLASSES {
        return bad(format!("class_count {class_count} outside 1..=10"));
    }
    let header = ModelHeader {
        version: FORMAT_VERSION,
        n,
        activation_bits,
        class_count,
        input_channels: r.u16()? as u32,
        input_len: r.u32()?,
        input_scale: r.f64()?,
        input_zero_point: r.i32()? as i64,
        segment: read_segment(&mut r)?,
    };
    let count = r.u16()? as usize;
    if count == 0 {
        return bad("no layers");
    }
    let mut layers = Vec::with_capacity(count);
    let mut shape = (header.input_channels, header.input_len);
    for i in 0..count {
        if r.u8()? != LAYER_TAG {
            return bad(format!("layer {i}: missing section tag"));
        }
        let kind = read_kind(&mut r)?;
        let activation = read_act(r.u8()?)?;
        let mode_m = r.u8()? as u32;
        let input_sign = read_sign(r.u8()?)?;
        let in_channels = r.u16()? as u32;
        let out_channels = r.u16()? as u32;
        let row_len = r.u32()?;
        let chunks_per_row = r.u32()?;
        if !(2..=16).contains(&mode_m) {
            return bad(format!("layer {i}: mode m={mode_m}"));
        }
        let spec = LayerSpec {
            kind,
            in_channels,
            out_channels,
            activation,
            mode_m,
            n,
        };
        shape = spec
            .output_shape(shape)
            .or_else(|e| bad(format!("layer {i}: {e}")))?;
        if row_len as usize != spec.row_len() || chunks_per_row != row_len.div_ceil(n) {
            return bad(format!("layer {i}: inconsistent row geometry"));
        }
        let out = out_channels as usize;
        // Bound allocations by what the buffer can actually hold.
        let width = index_bytes(n, mode_m);
        let needed = out * (8 + 8) + out * chunks_per_row as usize * width;
        if needed > bytes.len() {
            return Err(ArtifactError::CorruptArtifact(format!(
                "layer {i} declares more data than the file holds"
            )));
        }
        let input_scale = r.f64()?;
        let weight_scales = (0..out).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let bias = (0..out).map(|_| r.i64()).collect::<Result<Vec<_>, _>>()?;
        let requant = match r.u8()? {
            0 => None,
            1 => Some(
                (0..out)
                    .map(|_| {
                        Ok(Requant {
                            multiplier: r.i32()?,
                            shift: r.u8()?,
                        })
                    })
                    .collect::<Result<Vec<_>, ArtifactError>>()?,
            ),
            v => return bad(format!("layer {i}: requant flag {v}")),
        };
        if requant.is_none() != (i + 1 == count) {
            return bad(format!("layer {i}: requantization only omitted on the last layer"));
        }
        if weight_scales.iter().chain([&input_scale]).any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("layer {i}: non-positive scale"));
        }
        let limit = 1u64 << (n * mode_m);
        let mut indices = Vec::with_capacity(out * chunks_per_row as usize);
        for _ in 0..out * chunks_per_row as usize {
            let mut b = [0u8; 8];
            b[..width].copy_from_slice(r.take(width)?);
            let idx = u64::from_le_bytes(b);
            if idx >= limit {
                return bad(format!("layer {i}: line index {idx} >= 2^{}", n * mode_m));
            }
            indices.push(idx);
        }
        layers.push(CompiledLayer {
            kind,
            in_channels,
            out_channels,
            activation,
            mode_m,
            input_sign,
            row_len,
            chunks_per_row,
            indices,
            bias,
            weight_scales,
            input_scale,
            requant,
        });
    }
    r.finish()?;
    if shape.0 != class_count {
        return bad(format!(
            "last layer has {} outputs but class_count is {class_count}",
            shape.0
        ));
    }
    Ok(CompiledModel { header, layers })
}

/// Encodes a float model (the compiler's input format).
pub fn serialize_float(model: &FloatModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(KIND_FLOAT);
    w.u16(model.input_channels as u16);
    w.u32(model.input_len);
    w.f32(model.input_scale);
    w.u8(sign_byte(model.input_sign));
    w.u16(model.layers.len() as u16);
    for l in &model.layers {
        let s = &l.spec;
        w.u8(LAYER_TAG);
        write_kind(&mut w, s.kind);
        w.u8(act_byte(s.activation));
        w.u8(s.mode_m as u8);
        w.u8(s.n as u8);
        w.u16(s.in_channels as u16);
        w.u16(s.out_channels as u16);
        match l.output_range {
            Some(v) => {
                w.u8(1);
                w.f32(v);
            }
            None => {
                w.u8(0);
                w.f32(0.0);
            }
        }
        l.weights.iter().for_each(|&v| w.f32(v));
        l.bias.iter().for_each(|&v| w.f32(v));
        match &l.bn {
            Some(bn) => {
                w.u8(1);
                for p in [&bn.gamma, &bn.beta, &bn.mean, &bn.var] {
                    p.iter().for_each(|&v| w.f32(v));
                }
                w.f32(bn.eps);
            }
            None => w.u8(0),
        }
    }
    w.0
}

/// Decodes a float model and checks its shapes.
pub fn deserialize_float(bytes: &[u8]) -> Result<FloatModel, ArtifactError> {
    let mut r = Reader::new(bytes);
    read_preamble(&mut r, KIND_FLOAT)?;
    let input_channels = r.u16()? as u32;
    let input_len = r.u32()?;
    let input_scale = r.f32()?;
    let input_sign = read_sign(r.u8()?)?;
    let count = r.u16()? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for i in 0..count {
        if r.u8()? != LAYER_TAG {
            return bad(format!("layer {i}: missing section tag"));
        }
        let kind = read_kind(&mut r)?;
        let activation = read_act(r.u8()?)?;
        let mode_m = r.u8()? as u32;
        let n = r.u8()? as u32;
        let spec = LayerSpec {
            kind,
            in_channels: r.u16()? as u32,
            out_channels: r.u16()? as u32,
            activation,
            mode_m,
            n,
        };
        let has_range = r.u8()?;
        let range = r.f32()?;
        let output_range = match has_range {
            0 => None,
            1 => Some(range),
            v => return bad(format!("layer {i}: range flag {v}")),
        };
        let out = spec.out_channels as usize;
        let nw = out * spec.row_len();
        if (nw + out) * 4 > bytes.len() {
            return Err(ArtifactError::CorruptArtifact(format!(
                "layer {i} declares more data than the file holds"
            )));
        }
        let mut floats = |count: usize| (0..count).map(|_| r.f32()).collect::<Result<Vec<_>, _>>();
        let weights = floats(nw)?;
        let bias = floats(out)?;
        let bn = match r.u8()? {
            0 => None,
            1 => {
                let mut p = || (0..out).map(|_| r.f32()).collect::<Result<Vec<_>, _>>();
                let (gamma, beta, mean, var) = (p()?, p()?, p()?, p()?);
                Some(BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps: r.f32()?,
                })
            }
            v => return bad(format!("layer {i}: batch-norm flag {v}")),
        };
        layers.push(FloatLayer {
            spec,
            weights,
            bias,
            bn,
            output_range,
        });
    }
    r.finish()?;
    let model = FloatModel {
        input_channels,
        input_len,
        input_scale,
        input_sign,
        layers,
    };
    model
        .validate()
        .or_else(|e| bad(format!("invalid float model: {e}")))?;
    Ok(model)
}
