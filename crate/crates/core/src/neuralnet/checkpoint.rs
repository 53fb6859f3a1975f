//! Binary checkpoint format.
//!
//! ```text
//! "SNC1"                    magic
//! u32 version               currently 1
//! u32 len, bytes            metadata (UTF-8, flat `key = value` lines)
//! u32 count                 number of tensors
//! count x header:           u32 name_len, name bytes, u8 dtype (1 = f64),
//!                           u32 ndim, ndim x u64 dims
//! count x payload:          raw little-endian values, in header order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::network::Network;
use super::tensor::Tensor;
use crate::config::arch_from_kv;
use crate::config::{arch_to_kv, KeyValues};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SNC1";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Self {
        let metadata = arch_to_kv(net.config()).to_string();
        let mut tensors: Vec<(String, Tensor)> = net
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect();
        tensors.extend(net.buffers().into_iter().map(|(n, t)| (n, t.clone())));
        Self { metadata, tensors }
    }

    /// Rebuilds the network described by the metadata and loads every tensor.
    pub fn to_network(&self) -> Result<Network> {
        let kv = KeyValues::parse(&self.metadata)?;
        let mut net = Network::new(arch_from_kv(&kv)?)?;
        let mut missing = Vec::new();
        for (name, p) in net.params_mut() {
            match self.get(&name) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, network expects {:?}",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => missing.push(name),
            }
        }
        for (name, b) in net.buffers_mut() {
            match self.get(&name) {
                Some(t) if t.shape() == b.shape() => *b = t.clone(),
                _ => missing.push(name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing tensors: {}", missing.join(", "))));
        }
        Ok(net)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(&mut w, self.metadata.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&[DTYPE_F64])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let metadata = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let count = read_u32(&mut r)? as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut dtype = [0u8];
            r.read_exact(&mut dtype)?;
            if dtype[0] != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has unknown dtype {}", dtype[0])));
            }
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            headers.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in headers {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_network(net).save(path)
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    Checkpoint::load(path)?.to_network()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::network::{ArchConfig, FrontEnd};
    use crate::neuralnet::Mode;

    fn small() -> ArchConfig {
        ArchConfig {
            front_end: FrontEnd::Sinc,
            sample_rate: 8000.0,
            chunk_len: 64,
            filters: 4,
            filter_len: 17,
            mel_low_hz: 30.0,
            mel_high_hz: 4000.0,
            conv_channels: vec![2],
            conv_len: 5,
            pool: 3,
            rectify: false,
            dense: vec![8],
            classes: 3,
            leaky_slope: 0.2,
            dropout: 0.0,
            seed: 5,
        }
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let mut net = Network::new(small()).unwrap();
        let x = Tensor::new(vec![2, 64], (0..128).map(|i| (i as f64).cos()).collect()).unwrap();
        net.forward(&x, Mode::Train).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_network(&net).write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SNC1");
        let mut back = Checkpoint::read_from(&buf[..]).unwrap().to_network().unwrap();
        assert_eq!(
            net.forward(&x, Mode::Eval).unwrap(),
            back.forward(&x, Mode::Eval).unwrap()
        );
    }

    #[test]
    fn rejects_unknown_version() {
        let net = Network::new(small()).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_network(&net).write_to(&mut buf).unwrap();
        buf[4] = 9;
        assert!(matches!(Checkpoint::read_from(&buf[..]), Err(Error::Checkpoint(_))));
        buf[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&buf[..]), Err(Error::Checkpoint(_))));
    }
}
