//! Binary checkpoint, subspace-bank and memory-bank files.
//!
//! All three share an 8-byte magic, a `u32` version and little-endian
//! fields. Counts and sizes are `u32`, values are `f64`, matrices are
//! row-major. The layouts are listed in `docs/formats.md`.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::autograd::{LayerKind, LayerParams, LayerSpec, Network};
use crate::calibrate::{LayerSubspace, MemoryBank, SubspaceBank};
use crate::tensor::DenseMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LNCECKPT";
pub const BANK_MAGIC: &[u8; 8] = b"LNCEBANK";
pub const MEMORY_MAGIC: &[u8; 8] = b"LNCEMEMB";
pub const VERSION: u32 = 1;

/// Upper bound on any single count read from a file, to fail fast on garbage.
const MAX_COUNT: u32 = 1 << 28;

#[derive(Error, Debug)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("byte {offset}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        offset: u64,
        found: Vec<u8>,
        expected: &'static [u8],
    },
    #[error("byte {offset}: unsupported version {version}")]
    BadVersion { offset: u64, version: u32 },
    #[error("byte {offset}: file truncated while reading {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("byte {offset}: {msg}")]
    Invalid { offset: u64, msg: String },
}

type Result<T> = std::result::Result<T, FormatError>;

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self {
            cur: Cursor::new(bytes),
        }
    }

    fn offset(&self) -> u64 {
        self.cur.position()
    }

    fn invalid(&self, msg: impl Into<String>) -> FormatError {
        FormatError::Invalid {
            offset: self.offset(),
            msg: msg.into(),
        }
    }

    fn header(&mut self, magic: &'static [u8; 8]) -> Result<()> {
        let mut found = [0u8; 8];
        self.cur.read_exact(&mut found).map_err(|_| FormatError::Truncated {
            offset: 0,
            what: "magic",
        })?;
        if &found != magic {
            return Err(FormatError::BadMagic {
                offset: 0,
                found: found.to_vec(),
                expected: magic,
            });
        }
        let at = self.offset();
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(FormatError::BadVersion { offset: at, version });
        }
        Ok(())
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        let offset = self.offset();
        self.cur.read_u8().map_err(|_| FormatError::Truncated { offset, what })
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let offset = self.offset();
        self.cur.read_u32::<LE>().map_err(|_| FormatError::Truncated { offset, what })
    }

    fn count(&mut self, what: &'static str) -> Result<usize> {
        let offset = self.offset();
        let v = self.u32(what)?;
        if v > MAX_COUNT {
            return Err(FormatError::Invalid {
                offset,
                msg: format!("{what} {v} exceeds limit"),
            });
        }
        Ok(v as usize)
    }

    fn flag(&mut self, what: &'static str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.invalid(format!("{what} flag {v} is not 0 or 1"))),
        }
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        let offset = self.offset();
        self.cur.read_f64::<LE>().map_err(|_| FormatError::Truncated { offset, what })
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let offset = self.offset();
        let remaining = self.cur.get_ref().len() as u64 - offset;
        if (n as u64).saturating_mul(8) > remaining {
            return Err(FormatError::Truncated { offset, what });
        }
        let mut v = vec![0.0; n];
        self.cur
            .read_f64_into::<LE>(&mut v)
            .map_err(|_| FormatError::Truncated { offset, what })?;
        Ok(v)
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &'static str) -> Result<DenseMatrix> {
        let at = self.offset();
        let data = self.f64s(rows * cols, what)?;
        DenseMatrix::new(rows, cols, data).map_err(|e| FormatError::Invalid {
            offset: at,
            msg: e.to_string(),
        })
    }

    fn finish(&self) -> Result<()> {
        if self.offset() != self.cur.get_ref().len() as u64 {
            return Err(self.invalid("trailing bytes after payload"));
        }
        Ok(())
    }
}

fn header(out: &mut Vec<u8>, magic: &[u8; 8]) {
    out.extend_from_slice(magic);
    put_u32(out, VERSION as usize);
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    // Vec<u8> writes cannot fail
    out.write_u32::<LE>(u32::try_from(v).expect("count fits in u32")).unwrap();
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        out.write_f64::<LE>(v).unwrap();
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

const TAG_DENSE: u8 = 0;
const TAG_CONV: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_POOL: u8 = 3;
const TAG_FLATTEN: u8 = 4;

pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, CHECKPOINT_MAGIC);
    put_u32(&mut out, net.input_shape().len());
    net.input_shape().iter().for_each(|&d| put_u32(&mut out, d));
    put_u32(&mut out, net.layers().len());
    for spec in net.layers() {
        match spec.kind {
            LayerKind::Dense {
                in_features,
                out_features,
                bias,
            } => {
                out.extend_from_slice(&[TAG_DENSE, spec.trainable as u8]);
                put_u32(&mut out, in_features);
                put_u32(&mut out, out_features);
                out.push(bias as u8);
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => {
                out.extend_from_slice(&[TAG_CONV, spec.trainable as u8]);
                for v in [in_channels, out_channels, kernel, stride, padding] {
                    put_u32(&mut out, v);
                }
                out.push(bias as u8);
            }
            LayerKind::Relu => out.extend_from_slice(&[TAG_RELU, 0]),
            LayerKind::MaxPool2d { kernel, stride } => {
                out.extend_from_slice(&[TAG_POOL, 0]);
                put_u32(&mut out, kernel);
                put_u32(&mut out, stride);
            }
            LayerKind::Flatten => out.extend_from_slice(&[TAG_FLATTEN, 0]),
        }
    }
    for l in 0..net.layers().len() {
        if let Some(p) = net.params(l) {
            put_f64s(&mut out, p.weight.data());
            if let Some(b) = &p.bias {
                put_f64s(&mut out, b);
            }
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC)?;
    let order = r.count("input order")?;
    let input: Vec<usize> = (0..order).map(|_| r.count("input dim")).collect::<Result<_>>()?;
    let n = r.count("layer count")?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let at = r.offset();
        let tag = r.u8("layer tag")?;
        let trainable = r.flag("trainable")?;
        let kind = match tag {
            TAG_DENSE => LayerKind::Dense {
                in_features: r.count("in_features")?,
                out_features: r.count("out_features")?,
                bias: r.flag("bias")?,
            },
            TAG_CONV => LayerKind::Conv2d {
                in_channels: r.count("in_channels")?,
                out_channels: r.count("out_channels")?,
                kernel: r.count("kernel")?,
                stride: r.count("stride")?,
                padding: r.count("padding")?,
                bias: r.flag("bias")?,
            },
            TAG_RELU => LayerKind::Relu,
            TAG_POOL => LayerKind::MaxPool2d {
                kernel: r.count("kernel")?,
                stride: r.count("stride")?,
            },
            TAG_FLATTEN => LayerKind::Flatten,
            t => {
                return Err(FormatError::Invalid {
                    offset: at,
                    msg: format!("unknown layer tag {t}"),
                })
            }
        };
        layers.push(LayerSpec { kind, trainable });
    }
    let mut params = Vec::with_capacity(layers.len());
    for spec in &layers {
        let shape = match spec.kind {
            LayerKind::Dense {
                in_features,
                out_features,
                bias,
            } => Some((out_features, in_features, bias)),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => Some((out_channels, kernel * kernel * in_channels, bias)),
            _ => None,
        };
        params.push(match shape {
            None => None,
            Some((rows, cols, bias)) => {
                let weight = r.matrix(rows, cols, "weights")?;
                let bias = if bias { Some(r.f64s(rows, "bias")?) } else { None };
                Some(LayerParams { weight, bias })
            }
        });
    }
    r.finish()?;
    let end = r.offset();
    Network::from_parts(input, layers, params).map_err(|e| FormatError::Invalid {
        offset: end,
        msg: e.to_string(),
    })
}

pub fn encode_bank(bank: &SubspaceBank) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, BANK_MAGIC);
    put_u32(&mut out, bank.batch_size());
    put_f64s(&mut out, &[bank.eps()]);
    put_u32(&mut out, bank.len());
    for (l, sub) in bank.iter() {
        put_u32(&mut out, l);
        put_u32(&mut out, sub.dims().len());
        sub.dims().iter().for_each(|&d| put_u32(&mut out, d));
        sub.ranks().iter().for_each(|&r| put_u32(&mut out, r));
    }
    for (_, sub) in bank.iter() {
        for u in sub.factors() {
            put_f64s(&mut out, u.data());
        }
    }
    out
}

pub fn decode_bank(bytes: &[u8]) -> Result<SubspaceBank> {
    let mut r = Reader::new(bytes);
    r.header(BANK_MAGIC)?;
    let batch = r.count("batch size")?;
    let eps = r.f64("eps")?;
    let n = r.count("layer count")?;
    let mut entries = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let l = r.count("layer index")?;
        let order = r.count("order")?;
        if order == 0 || order > crate::tensor::MAX_ORDER {
            return Err(r.invalid(format!("order {order} unsupported")));
        }
        let dims: Vec<usize> = (0..order).map(|_| r.count("dim")).collect::<Result<_>>()?;
        let ranks: Vec<usize> = (0..order).map(|_| r.count("rank")).collect::<Result<_>>()?;
        entries.push((l, dims, ranks));
    }
    let mut bank = SubspaceBank::new(batch, eps);
    for (l, dims, ranks) in entries {
        let at = r.offset();
        let factors = dims
            .iter()
            .zip(&ranks)
            .map(|(&d, &k)| r.matrix(d, k, "factor"))
            .collect::<Result<Vec<_>>>()?;
        let sub = LayerSubspace::new(dims, factors).map_err(|e| FormatError::Invalid {
            offset: at,
            msg: format!("layer {l}: {e}"),
        })?;
        bank.insert(l, sub);
    }
    r.finish()?;
    Ok(bank)
}

pub fn encode_memory(mem: &MemoryBank) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, MEMORY_MAGIC);
    put_u32(&mut out, mem.tasks());
    let layers: Vec<_> = mem.iter().collect();
    put_u32(&mut out, layers.len());
    for (l, m) in &layers {
        put_u32(&mut out, *l);
        put_u32(&mut out, m.rows());
        put_u32(&mut out, m.cols());
    }
    for (_, m) in &layers {
        put_f64s(&mut out, m.data());
    }
    out
}

pub fn decode_memory(bytes: &[u8]) -> Result<MemoryBank> {
    let mut r = Reader::new(bytes);
    r.header(MEMORY_MAGIC)?;
    let tasks = r.count("task count")?;
    let n = r.count("layer count")?;
    let mut entries = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        entries.push((r.count("layer index")?, r.count("rows")?, r.count("columns")?));
    }
    let mut layers = BTreeMap::new();
    for (l, rows, cols) in entries {
        layers.insert(l, r.matrix(rows, cols, "memory")?);
    }
    r.finish()?;
    let end = r.offset();
    MemoryBank::from_parts(tasks, layers).map_err(|e| FormatError::Invalid {
        offset: end,
        msg: e.to_string(),
    })
}

pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    write_file(path, &encode_checkpoint(net))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    decode_checkpoint(&read_file(path)?)
}

pub fn save_bank(path: &Path, bank: &SubspaceBank) -> Result<()> {
    write_file(path, &encode_bank(bank))
}

pub fn load_bank(path: &Path) -> Result<SubspaceBank> {
    decode_bank(&read_file(path)?)
}

pub fn save_memory(path: &Path, mem: &MemoryBank) -> Result<()> {
    write_file(path, &encode_memory(mem))
}

pub fn load_memory(path: &Path) -> Result<MemoryBank> {
    decode_memory(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::calibrate_bank;
    use crate::tensor::DenseTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cnn() -> Network {
        let mut net = Network::new(
            vec![6, 6, 2],
            vec![
                LayerSpec::conv(2, 3, 3, 1, 1),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::flatten(),
                LayerSpec::dense(27, 4).without_bias(),
                LayerSpec::relu(),
                LayerSpec::dense(4, 2),
            ],
            3,
        )
        .unwrap();
        net.set_trainable_last(2);
        net
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = small_cnn();
        let back = decode_checkpoint(&encode_checkpoint(&net)).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.trainable_layers(), vec![4, 6]);
    }

    #[test]
    fn bank_and_memory_round_trip() {
        let net = small_cnn();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<_> = (0..2)
            .map(|_| DenseTensor::from_fn(vec![5, 6, 6, 2], |_| rng.random_range(-1.0..1.0)).unwrap())
            .collect();
        let bank = calibrate_bank(&net, xs, 2, 0.8, None).unwrap();
        assert_eq!(decode_bank(&encode_bank(&bank)).unwrap(), bank);
        let mut layers = BTreeMap::new();
        layers.insert(4, bank.layer(4).unwrap().factors()[1].clone());
        layers.insert(6, DenseMatrix::zeros(4, 0));
        let mem = MemoryBank::from_parts(2, layers).unwrap();
        assert_eq!(decode_memory(&encode_memory(&mem)).unwrap(), mem);
    }

    #[test]
    fn errors_carry_offsets() {
        let bytes = encode_checkpoint(&small_cnn());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(FormatError::BadMagic { offset: 0, .. })));
        assert!(matches!(decode_bank(&bytes), Err(FormatError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(FormatError::BadVersion { offset: 8, version: 9 })));
        match decode_checkpoint(&bytes[..bytes.len() - 3]) {
            Err(FormatError::Truncated { offset, what }) => {
                assert_eq!(what, "bias");
                assert!(offset > 12);
            }
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        let err = decode_checkpoint(&long).unwrap_err();
        assert!(err.to_string().starts_with(&format!("byte {}", bytes.len())), "{err}");
    }
}
