//! Versioned binary checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic      8 bytes  "MPRUNECK"
//! version    u32
//! patch      u32
//! maps       4 × u32          c1, c2, c3, fc4
//! init       u8               initialization scheme tag
//! iteration  u64
//! total      u64
//! seed       u64
//! base_lr    f64
//! lr         f64
//! window     f64 loss sum, u64 count since the last history row
//! layers     5 × (tensor, tensor)   weights and bias of c1 c2 c3 fc4 fc5
//! masks      4 × (u32 len, len bytes of 0/1)
//! velocity   u8 flag, then 5 × (tensor, tensor) when set
//! crc32      u32 over every preceding byte
//!
//! tensor     u32 rank, rank × u32 extents, extents-product × f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{LayerParams, Masks, Network, NetworkConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MPRUNECK";
pub const VERSION: u32 = 1;
/// Zero-mean Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero biases.
pub const INIT_GAUSSIAN_FAN_IN: u8 = 1;

/// Optimizer progress stored alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub iteration: u64,
    pub total_iterations: u64,
    pub seed: u64,
    pub base_lr: f64,
    /// Learning rate used by the most recent step.
    pub lr: f64,
    /// Training loss summed since the last history row, and the step count.
    pub loss_window: (f64, u64),
    /// Momentum buffers, one per layer, when training is resumable.
    pub velocity: Option<Vec<LayerParams>>,
}

impl TrainingState {
    pub fn untrained(seed: u64) -> Self {
        TrainingState {
            iteration: 0,
            total_iterations: 0,
            seed,
            base_lr: 0.0,
            lr: 0.0,
            loss_window: (0.0, 0),
            velocity: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub state: TrainingState,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let cfg = self.network.config();
        w.u32(cfg.patch_size as u32);
        for m in cfg.maps {
            w.u32(m as u32);
        }
        w.0.push(INIT_GAUSSIAN_FAN_IN);
        let s = &self.state;
        w.u64(s.iteration);
        w.u64(s.total_iterations);
        w.u64(s.seed);
        w.f64(s.base_lr);
        w.f64(s.lr);
        w.f64(s.loss_window.0);
        w.u64(s.loss_window.1);
        w.layers(self.network.layers());
        for m in &self.network.masks().0 {
            w.u32(m.len() as u32);
            w.0.extend(m.iter().map(|&k| k as u8));
        }
        match &s.velocity {
            Some(v) => {
                w.0.push(1);
                w.layers(v);
            }
            None => w.0.push(0),
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
        }
        let patch_size = r.u32()? as usize;
        let mut maps = [0usize; 4];
        for m in &mut maps {
            *m = r.u32()? as usize;
        }
        let init_at = r.pos;
        let init = r.take(1)?[0];
        if init != INIT_GAUSSIAN_FAN_IN {
            return Err(Error::format(init_at, format!("unknown init scheme {init}")));
        }
        let iteration = r.u64()?;
        let total_iterations = r.u64()?;
        let seed = r.u64()?;
        let base_lr = r.f64()?;
        let lr = r.f64()?;
        let loss_window = (r.f64()?, r.u64()?);
        let layers = r.layers()?;
        let mut masks: [Vec<bool>; 4] = Default::default();
        for m in &mut masks {
            let len = r.u32()? as usize;
            let at = r.pos;
            *m = r
                .take(len)?
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(Error::format(at, "mask byte not 0/1")),
                })
                .collect::<Result<_>>()?;
        }
        let flag_at = r.pos;
        let velocity = match r.take(1)?[0] {
            0 => None,
            1 => Some(r.layers()?),
            _ => return Err(Error::format(flag_at, "bad velocity flag")),
        };
        let body_end = r.pos;
        let crc = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after checksum"));
        }
        if crc32fast::hash(&bytes[..body_end]) != crc {
            return Err(Error::format(body_end, "checksum mismatch"));
        }
        let config = NetworkConfig { maps, patch_size };
        let network = Network::from_parts(config, layers, Masks(masks))
            .map_err(|e| Error::format(0, e.to_string()))?;
        Ok(Checkpoint {
            network,
            state: TrainingState {
                iteration,
                total_iterations,
                seed,
                base_lr,
                lr,
                loss_window,
                velocity,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }
}

/// Save a bare network (no training progress).
pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint {
        network: net.clone(),
        state: TrainingState::untrained(0),
    }
    .save(path)
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    Ok(Checkpoint::load(path)?.network)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn layers(&mut self, layers: &[LayerParams]) {
        for l in layers {
            self.tensor(&l.weights);
            self.tensor(&l.bias);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::format(at, format!("bad tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n <= (self.bytes.len() - self.pos) / 8).ok_or_else(|| {
            Error::format(at, format!("tensor {shape:?} does not fit in the remaining bytes"))
        })?;
        let data: Vec<f64> = self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))
    }
    fn layers(&mut self) -> Result<Vec<LayerParams>> {
        (0..5)
            .map(|_| {
                Ok(LayerParams {
                    weights: self.tensor()?,
                    bias: self.tensor()?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerId;

    fn sample() -> Checkpoint {
        let mut net = Network::build(NetworkConfig::new([4, 3, 2, 5]), 7).unwrap();
        net.discard(LayerId::C2, &[1]).unwrap();
        let velocity = net.layers().to_vec();
        Checkpoint {
            network: net,
            state: TrainingState {
                iteration: 12,
                total_iterations: 40,
                seed: 99,
                base_lr: 0.01,
                lr: 0.007,
                loss_window: (1.25, 3),
                velocity: Some(velocity),
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample().encode();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = sample().encode();
        let i = bytes.len() - 40;
        bytes[i] ^= 0x10;
        let err = Checkpoint::decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
