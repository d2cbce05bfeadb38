//! Versioned single-file container for networks, sensing matrices and
//! training checkpoints. The byte layout is documented in `docs/FORMAT.md`;
//! every multi-byte value is little-endian.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::graph::{Conv2d, FullyConnected, Layer, NetKind, Network};
use crate::model::{SensingConfig, SensingKind, SensingMatrix};
use crate::tensor::{Scalar, Tensor, SCALAR_BYTES};

pub const MAGIC: [u8; 4] = *b"DPCL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadKind {
    Model = 1,
    SensingMatrix = 2,
    Checkpoint = 3,
}

impl PayloadKind {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(PayloadKind::Model),
            2 => Ok(PayloadKind::SensingMatrix),
            3 => Ok(PayloadKind::Checkpoint),
            other => Err(Error::Format(format!("unknown payload kind {other}"))),
        }
    }
}

const TAG_FC: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_POOL: u8 = 4;
const TAG_RESHAPE: u8 = 5;
const TAG_SOFTMAX: u8 = 6;

const FLAG_BIAS: u8 = 1;
const FLAG_FROZEN: u8 = 2;

/// Little-endian body builder.
#[derive(Default)]
pub struct BodyWriter {
    buf: Vec<u8>,
}

impl BodyWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.buf.write_u32::<LE>(v).expect("vec write");
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.write_u64::<LE>(v).expect("vec write");
    }

    pub fn u128(&mut self, v: u128) {
        self.buf.write_u128::<LE>(v).expect("vec write");
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.write_f64::<LE>(v).expect("vec write");
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn scalars(&mut self, xs: &[Scalar]) {
        self.buf.reserve(xs.len() * SCALAR_BYTES as usize);
        for x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Little-endian body reader; running out of bytes is a length error.
pub struct BodyReader<'a> {
    cur: Cursor<&'a [u8]>,
}

fn eof(_: std::io::Error) -> Error {
    Error::Length("container body truncated".into())
}

impl<'a> BodyReader<'a> {
    pub fn new(body: &'a [u8]) -> Self {
        BodyReader { cur: Cursor::new(body) }
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(eof)
    }

    pub fn u32(&mut self) -> Result<usize> {
        Ok(self.cur.read_u32::<LE>().map_err(eof)? as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LE>().map_err(eof)
    }

    pub fn u128(&mut self) -> Result<u128> {
        self.cur.read_u128::<LE>().map_err(eof)
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LE>().map_err(eof)
    }

    pub fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.cur.read_exact(&mut b).map_err(eof)?;
        Ok(b)
    }

    pub fn slice(&mut self, len: usize) -> Result<&'a [u8]> {
        let start = self.cur.position() as usize;
        let all: &'a [u8] = self.cur.get_ref();
        let end = start.checked_add(len).filter(|&e| e <= all.len()).ok_or_else(|| eof(std::io::ErrorKind::UnexpectedEof.into()))?;
        self.cur.set_position(end as u64);
        Ok(&all[start..end])
    }

    pub fn scalars(&mut self, n: usize) -> Result<Vec<Scalar>> {
        const W: usize = SCALAR_BYTES as usize;
        let raw = self.slice(n.checked_mul(W).ok_or_else(|| Error::Format("parameter count overflow".into()))?)?;
        Ok(raw
            .chunks_exact(W)
            .map(|c| Scalar::from_le_bytes(c.try_into().expect("chunk width")))
            .collect())
    }

    pub fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), self.scalars(n)?)
    }

    pub fn finish(self) -> Result<()> {
        let left = self.cur.get_ref().len() - self.cur.position() as usize;
        if left != 0 {
            return Err(Error::Format(format!("{left} trailing bytes in container body")));
        }
        Ok(())
    }
}

/// Prepends the header (magic, version, kind, scalar width, length, CRC-32).
pub fn wrap(kind: PayloadKind, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.write_u16::<LE>(VERSION).expect("vec write");
    out.push(kind as u8);
    out.push(SCALAR_BYTES);
    out.write_u32::<LE>(u32::try_from(body.len()).expect("container under 4 GiB")).expect("vec write");
    out.write_u32::<LE>(crc32fast::hash(body)).expect("vec write");
    out.extend_from_slice(body);
    out
}

/// Validates the header and returns the payload kind and body.
pub fn unwrap(bytes: &[u8]) -> Result<(PayloadKind, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("file shorter than container header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic; not a deepcl container".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("container version {version}, this build reads {VERSION}")));
    }
    let kind = PayloadKind::from_u8(bytes[6])?;
    if bytes[7] != SCALAR_BYTES {
        return Err(Error::Format(format!(
            "container stores {}-byte scalars, this build uses {SCALAR_BYTES}",
            bytes[7]
        )));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let crc = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    let body = &bytes[HEADER_LEN..];
    if body.len() != len {
        return Err(Error::Length(format!("header declares {len} body bytes, found {}", body.len())));
    }
    if crc32fast::hash(body) != crc {
        return Err(Error::Format("checksum mismatch; container is corrupt".into()));
    }
    Ok((kind, body))
}

fn expect_kind(found: PayloadKind, wanted: PayloadKind) -> Result<()> {
    if found != wanted {
        return Err(Error::Format(format!("expected a {wanted:?} container, found {found:?}")));
    }
    Ok(())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_config(w: &mut BodyWriter, kind: NetKind) {
    let (tag, cfg) = match kind {
        NetKind::Custom => (0, None),
        NetKind::Proposed(c) => (1, Some(c)),
        NetKind::Baseline(c) => (2, Some(c)),
        NetKind::Inference(c) => (3, Some(c)),
    };
    w.u8(tag);
    let c = cfg.unwrap_or(SensingConfig { n: 0, rate: 0.0, m: 0 });
    w.u32(c.n);
    w.u32(c.m);
    w.f64(c.rate);
}

fn read_config(r: &mut BodyReader) -> Result<NetKind> {
    let tag = r.u8()?;
    let cfg = SensingConfig {
        n: r.u32()?,
        m: r.u32()?,
        rate: r.f64()?,
    };
    Ok(match tag {
        0 => NetKind::Custom,
        1 => NetKind::Proposed(cfg),
        2 => NetKind::Baseline(cfg),
        3 => NetKind::Inference(cfg),
        other => return Err(Error::Format(format!("unknown network kind {other}"))),
    })
}

/// Appends the network section (kind, topology, parameters) to `w`.
pub fn encode_network(w: &mut BodyWriter, net: &Network) {
    write_config(w, net.kind());
    w.u32(net.input_shape().len());
    for &d in net.input_shape() {
        w.u32(d);
    }
    w.u32(net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::FullyConnected(fc) => {
                w.u8(TAG_FC);
                w.u8(if fc.bias.is_some() { FLAG_BIAS } else { 0 } | if fc.frozen { FLAG_FROZEN } else { 0 });
                w.u32(fc.inputs());
                w.u32(fc.outputs());
            }
            Layer::Conv2d(conv) => {
                w.u8(TAG_CONV);
                w.u8(if conv.bias.is_some() { FLAG_BIAS } else { 0 });
                let (kh, kw) = conv.kernel();
                w.u32(conv.in_channels());
                w.u32(conv.out_channels());
                w.u32(kh);
                w.u32(kw);
            }
            Layer::Relu(_) => {
                w.u8(TAG_RELU);
                w.u8(0);
            }
            Layer::MaxPool2x2(_) => {
                w.u8(TAG_POOL);
                w.u8(0);
            }
            Layer::Reshape(r) => {
                w.u8(TAG_RESHAPE);
                w.u8(0);
                w.u32(r.target.len());
                for &d in &r.target {
                    w.u32(d);
                }
            }
            Layer::Softmax(_) => {
                w.u8(TAG_SOFTMAX);
                w.u8(0);
            }
        }
    }
    for (_, p) in net.params() {
        w.scalars(p.value.data());
    }
}

/// Reads a network section written by [`encode_network`].
pub fn decode_network(r: &mut BodyReader) -> Result<Network> {
    let kind = read_config(r)?;
    let rank = r.u32()?;
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = r.u8()?;
        let flags = r.u8()?;
        let bias = flags & FLAG_BIAS != 0;
        layers.push(match tag {
            TAG_FC => {
                let (i, o) = (r.u32()?, r.u32()?);
                let mut fc = FullyConnected::zeroed(i, o, bias);
                fc.frozen = flags & FLAG_FROZEN != 0;
                Layer::FullyConnected(fc)
            }
            TAG_CONV => {
                let (ci, co, kh, kw) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                Layer::Conv2d(Conv2d::new(Tensor::zeros(&[co, ci, kh, kw]), bias.then(|| Tensor::zeros(&[co])))?)
            }
            TAG_RELU => Layer::relu(),
            TAG_POOL => Layer::maxpool(),
            TAG_RESHAPE => {
                let n = r.u32()?;
                let dims = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                Layer::reshape(&dims)
            }
            TAG_SOFTMAX => Layer::softmax(),
            other => return Err(Error::Format(format!("unknown layer tag {other}"))),
        });
    }
    let mut net = Network::with_kind(&input_shape, layers, kind)?;
    for (_, p) in net.params_mut() {
        let data = r.scalars(p.value.len())?;
        p.value.data_mut().copy_from_slice(&data);
    }
    Ok(net)
}

pub fn network_to_bytes(net: &Network) -> Vec<u8> {
    let mut w = BodyWriter::new();
    encode_network(&mut w, net);
    wrap(PayloadKind::Model, &w.into_inner())
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    let (kind, body) = unwrap(bytes)?;
    expect_kind(kind, PayloadKind::Model)?;
    let mut r = BodyReader::new(body);
    let net = decode_network(&mut r)?;
    r.finish()?;
    Ok(net)
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &network_to_bytes(net))
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    network_from_bytes(&fs::read(path)?)
}

pub fn sensing_to_bytes(sm: &SensingMatrix) -> Vec<u8> {
    let mut w = BodyWriter::new();
    w.u8(match sm.kind {
        SensingKind::Learned => 0,
        SensingKind::RandomGaussian => 1,
    });
    w.u8(sm.bias.is_some() as u8);
    w.u32(sm.m());
    w.u32(sm.n());
    w.scalars(sm.weights.data());
    if let Some(b) = &sm.bias {
        w.scalars(b.data());
    }
    wrap(PayloadKind::SensingMatrix, &w.into_inner())
}

pub fn sensing_from_bytes(bytes: &[u8]) -> Result<SensingMatrix> {
    let (kind, body) = unwrap(bytes)?;
    expect_kind(kind, PayloadKind::SensingMatrix)?;
    let mut r = BodyReader::new(body);
    let kind = match r.u8()? {
        0 => SensingKind::Learned,
        1 => SensingKind::RandomGaussian,
        other => return Err(Error::Format(format!("unknown sensing kind {other}"))),
    };
    let has_bias = r.u8()? != 0;
    let (m, n) = (r.u32()?, r.u32()?);
    let weights = r.tensor(&[m, n])?;
    let bias = if has_bias { Some(r.tensor(&[m])?) } else { None };
    r.finish()?;
    SensingMatrix::new(weights, bias, kind)
}

pub fn save_sensing(sm: &SensingMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &sensing_to_bytes(sm))
}

pub fn load_sensing(path: impl AsRef<Path>) -> Result<SensingMatrix> {
    sensing_from_bytes(&fs::read(path)?)
}

/// Kind of container stored at `path`, read from its header only.
pub fn peek_kind(path: impl AsRef<Path>) -> Result<PayloadKind> {
    let bytes = fs::read(path)?;
    Ok(unwrap(&bytes)?.0)
}
