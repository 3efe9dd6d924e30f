//! Binary container for networks.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "ICRNET\0\0" | u32 version | u64 d_embed | u64 readout start | u64 readout end
//! u64 metadata length | metadata bytes (UTF-8)
//! u64 block count, then per block:
//!   u8 activation | u8 scale tag | f64 scale value | u64 head count
//!   per head: u8 has_k | q | k (if present) | v          (d_embed² f64 each, row-major)
//!   u8 has_ffn | u64 layer count | per layer: u64 rows | u64 cols | weight | bias
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{
    Activation, ActivationKind, AttentionHeadWeights, FfnLayer, FfnWeights, ScoreScale,
    TransformerBlock, TransformerNetwork,
};
use crate::linalg::Matrix;

pub const NETWORK_MAGIC: &[u8; 8] = b"ICRNET\0\0";
pub const NETWORK_VERSION: u32 = 1;

/// Upper bound on any length field, guarding against corrupted headers.
const MAX_LEN: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes, not a {0} file")]
    BadMagic(&'static str),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("corrupt container: {0}")]
    Corrupt(String),
}

pub(crate) struct Writer<W: Write> {
    pub inner: W,
}

impl<W: Write> Writer<W> {
    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.inner.write_all(&[v])
    }
    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    pub fn f64(&mut self, v: f64) -> io::Result<()> {
        self.inner.write_all(&v.to_bits().to_le_bytes())
    }
    pub fn f64s(&mut self, vs: &[f64]) -> io::Result<()> {
        vs.iter().try_for_each(|&v| self.f64(v))
    }
    pub fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.u64(b.len() as u64)?;
        self.inner.write_all(b)
    }
}

pub(crate) struct Reader<R: Read> {
    pub inner: R,
}

impl<R: Read> Reader<R> {
    pub fn u8(&mut self) -> Result<u8, CodecError> {
        let mut b = [0u8; 1];
        self.inner.read_exact(&mut b)?;
        Ok(b[0])
    }
    pub fn u32(&mut self) -> Result<u32, CodecError> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    pub fn u64(&mut self) -> Result<u64, CodecError> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    pub fn len(&mut self) -> Result<usize, CodecError> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(CodecError::Corrupt(format!("length field {v} too large")));
        }
        Ok(v as usize)
    }
    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_bits(self.u64()?))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CodecError> {
        (0..n).map(|_| self.f64()).collect()
    }
    pub fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.len()?;
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }
    pub fn magic(&mut self, expect: &[u8; 8], what: &'static str) -> Result<(), CodecError> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        if &b != expect {
            return Err(CodecError::BadMagic(what));
        }
        Ok(())
    }
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Linear => 1,
        Activation::Softmax => 2,
    }
}

fn scale_tag(s: ScoreScale) -> (u8, f64) {
    match s {
        ScoreScale::One => (0, 1.0),
        ScoreScale::InvSqrtEmbed => (1, 0.0),
        ScoreScale::InvContext => (2, 0.0),
        ScoreScale::Fixed(c) => (3, c),
    }
}

fn write_matrix<W: Write>(w: &mut Writer<W>, m: &Matrix) -> io::Result<()> {
    w.f64s(m.as_slice())
}

fn read_matrix<R: Read>(r: &mut Reader<R>, rows: usize, cols: usize) -> Result<Matrix, CodecError> {
    let data = r.f64s(rows * cols)?;
    Matrix::from_vec(rows, cols, data).map_err(|e| CodecError::Corrupt(e.to_string()))
}

pub fn write_network<W: Write>(net: &TransformerNetwork, out: W) -> Result<(), CodecError> {
    let mut w = Writer { inner: out };
    w.inner.write_all(NETWORK_MAGIC)?;
    w.u32(NETWORK_VERSION)?;
    write_network_body(&mut w, net)?;
    Ok(())
}

pub(crate) fn write_network_body<W: Write>(
    w: &mut Writer<W>,
    net: &TransformerNetwork,
) -> io::Result<()> {
    w.u64(net.d_embed as u64)?;
    w.u64(net.readout_rows.start as u64)?;
    w.u64(net.readout_rows.end as u64)?;
    w.bytes(net.metadata.as_bytes())?;
    w.u64(net.blocks.len() as u64)?;
    for block in &net.blocks {
        w.u8(activation_tag(block.activation.activation))?;
        let (tag, val) = scale_tag(block.activation.scale);
        w.u8(tag)?;
        w.f64(val)?;
        w.u64(block.heads.len() as u64)?;
        for head in &block.heads {
            w.u8(head.k.is_some() as u8)?;
            write_matrix(w, &head.q)?;
            if let Some(k) = &head.k {
                write_matrix(w, k)?;
            }
            write_matrix(w, &head.v)?;
        }
        match &block.ffn {
            None => w.u8(0)?,
            Some(ffn) => {
                w.u8(1)?;
                w.u64(ffn.layers.len() as u64)?;
                for l in &ffn.layers {
                    w.u64(l.weight.rows() as u64)?;
                    w.u64(l.weight.cols() as u64)?;
                    write_matrix(w, &l.weight)?;
                    w.f64s(&l.bias)?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_network<R: Read>(input: R) -> Result<TransformerNetwork, CodecError> {
    let mut r = Reader { inner: input };
    r.magic(NETWORK_MAGIC, "network")?;
    let version = r.u32()?;
    if version != NETWORK_VERSION {
        return Err(CodecError::Version(version));
    }
    read_network_body(&mut r)
}

pub(crate) fn read_network_body<R: Read>(
    r: &mut Reader<R>,
) -> Result<TransformerNetwork, CodecError> {
    let d = r.len()?;
    if d == 0 || d > 1 << 14 {
        return Err(CodecError::Corrupt(format!("d_embed {d}")));
    }
    let start = r.len()?;
    let end = r.len()?;
    let metadata = String::from_utf8(r.bytes()?)
        .map_err(|_| CodecError::Corrupt("metadata is not UTF-8".into()))?;
    let nblocks = r.len()?;
    let mut blocks = Vec::with_capacity(nblocks.min(1024));
    for _ in 0..nblocks {
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Linear,
            2 => Activation::Softmax,
            t => return Err(CodecError::Corrupt(format!("activation tag {t}"))),
        };
        let tag = r.u8()?;
        let val = r.f64()?;
        let scale = match tag {
            0 => ScoreScale::One,
            1 => ScoreScale::InvSqrtEmbed,
            2 => ScoreScale::InvContext,
            3 => ScoreScale::Fixed(val),
            t => return Err(CodecError::Corrupt(format!("scale tag {t}"))),
        };
        let nheads = r.len()?;
        let mut heads = Vec::with_capacity(nheads.min(4096));
        for _ in 0..nheads {
            let has_k = match r.u8()? {
                0 => false,
                1 => true,
                t => return Err(CodecError::Corrupt(format!("key flag {t}"))),
            };
            let q = read_matrix(r, d, d)?;
            let k = if has_k { Some(read_matrix(r, d, d)?) } else { None };
            let v = read_matrix(r, d, d)?;
            heads.push(AttentionHeadWeights { q, k, v });
        }
        let ffn = match r.u8()? {
            0 => None,
            1 => {
                let nl = r.len()?;
                let mut layers = Vec::with_capacity(nl.min(64));
                for _ in 0..nl {
                    let rows = r.len()?;
                    let cols = r.len()?;
                    if rows.saturating_mul(cols) > 1 << 28 {
                        return Err(CodecError::Corrupt("FFN layer too large".into()));
                    }
                    let weight = read_matrix(r, rows, cols)?;
                    let bias = r.f64s(rows)?;
                    layers.push(FfnLayer { weight, bias });
                }
                Some(FfnWeights { layers })
            }
            t => return Err(CodecError::Corrupt(format!("FFN flag {t}"))),
        };
        blocks.push(TransformerBlock {
            heads,
            activation: ActivationKind { activation, scale },
            ffn,
        });
    }
    let net = TransformerNetwork {
        blocks,
        d_embed: d,
        readout_rows: start..end,
        metadata,
    };
    net.validate()
        .map_err(|e| CodecError::Corrupt(e.to_string()))?;
    Ok(net)
}

pub fn network_to_bytes(net: &TransformerNetwork) -> Vec<u8> {
    let mut buf = Vec::new();
    write_network(net, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<TransformerNetwork, CodecError> {
    let mut cursor = bytes;
    let net = read_network(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(CodecError::Corrupt(format!("{} trailing bytes", cursor.len())));
    }
    Ok(net)
}

pub fn save_network(net: &TransformerNetwork, path: &std::path::Path) -> Result<(), CodecError> {
    std::fs::write(path, network_to_bytes(net))?;
    Ok(())
}

pub fn load_network(path: &std::path::Path) -> Result<TransformerNetwork, CodecError> {
    network_from_bytes(&std::fs::read(path)?)
}
