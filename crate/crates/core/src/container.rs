//! Binary model container. Byte layout (all integers little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `b"JPNN"` |
//! | 4 | 2 | version, `u16` = 1 |
//! | 6 | 1 | head tag: 0 sigmoid/BCE, 1 softmax/CE, 2 identity/SE |
//! | 7 | 1 | reserved, 0 |
//! | 8 | 4 | layer count `L`, `u32` |
//! | 12 | 9·L | per layer: `n_in` `u32`, `n_out` `u32`, activation tag `u8` |
//! | 12 + 9·L | 8·P | `θ` as `f64`, `[vec_columns(W^[1]); b^[1]; …]` |
//!
//! Activation tags: 0 none (last layer only), 1 ReLU, 2 sigmoid, 3 identity.
//! `P` is implied by the dimensions; trailing bytes are rejected.

use std::fs;
use std::path::Path;

use crate::activations::ActivationKind;
use crate::error::{Error, Result};
use crate::losses::HeadKind;
use crate::network::{Network, NetworkShape};

pub const MAGIC: [u8; 4] = *b"JPNN";
pub const VERSION: u16 = 1;

fn head_tag(head: HeadKind) -> u8 {
    match head {
        HeadKind::SigmoidBce => 0,
        HeadKind::SoftmaxCe => 1,
        HeadKind::IdentitySe => 2,
    }
}

fn head_from_tag(tag: u8) -> Result<HeadKind> {
    Ok(match tag {
        0 => HeadKind::SigmoidBce,
        1 => HeadKind::SoftmaxCe,
        2 => HeadKind::IdentitySe,
        t => return Err(Error::Container(format!("unknown head tag {t}"))),
    })
}

fn activation_tag(kind: Option<ActivationKind>) -> u8 {
    match kind {
        None => 0,
        Some(ActivationKind::Relu) => 1,
        Some(ActivationKind::Sigmoid) => 2,
        Some(ActivationKind::Identity) => 3,
        Some(ActivationKind::Softmax) => unreachable!("rejected by DenseLayer::new"),
    }
}

fn activation_from_tag(tag: u8) -> Result<Option<ActivationKind>> {
    Ok(match tag {
        0 => None,
        1 => Some(ActivationKind::Relu),
        2 => Some(ActivationKind::Sigmoid),
        3 => Some(ActivationKind::Identity),
        t => return Err(Error::Container(format!("unknown activation tag {t}"))),
    })
}

pub fn encode(network: &Network) -> Vec<u8> {
    let layers = network.layers();
    let params = network.params();
    let mut out = Vec::with_capacity(12 + 9 * layers.len() + 8 * params.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(head_tag(network.head()));
    out.push(0);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for layer in layers {
        out.extend_from_slice(&(layer.n_in() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.n_out() as u32).to_le_bytes());
        out.push(activation_tag(layer.activation()));
    }
    for v in params.theta.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Container(format!(
                "truncated at byte {} reading {what}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let head = head_from_tag(r.take(1, "head tag")?[0])?;
    r.take(1, "reserved byte")?;
    let count = r.u32("layer count")? as usize;
    if count == 0 {
        return Err(Error::Container("zero layers".into()));
    }
    let mut dims = Vec::with_capacity(count + 1);
    let mut hidden = Vec::with_capacity(count - 1);
    for l in 0..count {
        let n_in = r.u32("n_in")? as usize;
        let n_out = r.u32("n_out")? as usize;
        let act = activation_from_tag(r.take(1, "activation tag")?[0])?;
        match dims.last() {
            None => dims.push(n_in),
            Some(&prev) if prev != n_in => {
                return Err(Error::Container(format!(
                    "layer {} input {n_in} does not chain to {prev}",
                    l + 1
                )));
            }
            _ => {}
        }
        dims.push(n_out);
        match (act, l + 1 == count) {
            (None, true) => {}
            (Some(kind), false) => hidden.push(kind),
            (_, true) => return Err(Error::Container("last layer must have activation tag 0".into())),
            (None, false) => return Err(Error::Container(format!("hidden layer {} has activation tag 0", l + 1))),
        }
    }
    let shape = NetworkShape::new(dims, hidden, head)?;
    let n = shape.param_count();
    let payload = r.take(n * 8, "parameters")?;
    if r.pos != bytes.len() {
        return Err(Error::Container(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let theta: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Container("non-finite parameter".into()));
    }
    Network::from_params(&shape, &theta)
}

pub fn save(network: &Network, path: &Path) -> Result<()> {
    fs::write(path, encode(network))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Network {
        let shape = NetworkShape::new(vec![3, 4, 2], vec![ActivationKind::Sigmoid], HeadKind::SoftmaxCe).unwrap();
        Network::seeded(&shape, 8)
    }

    #[test]
    fn round_trip() {
        let net = sample();
        let bytes = encode(&net);
        assert_eq!(bytes.len(), 12 + 9 * 2 + 8 * net.param_count());
        assert_eq!(decode(&bytes).unwrap(), net);
    }

    #[test]
    fn header_bytes() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..12], &[b'J', b'P', b'N', b'N', 1, 0, 1, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[12..21], &[3, 0, 0, 0, 4, 0, 0, 0, 2]);
        assert_eq!(&bytes[21..30], &[4, 0, 0, 0, 2, 0, 0, 0, 0]);
        let first = f64::from_le_bytes(bytes[30..38].try_into().unwrap());
        assert_eq!(first, sample().params().theta[0]);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
        let mut bad_head = bytes.clone();
        bad_head[6] = 9;
        assert!(decode(&bad_head).is_err());
        let mut bad_chain = bytes;
        bad_chain[21] = 5;
        assert!(decode(&bad_chain).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save(&sample(), &path).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
    }
}
