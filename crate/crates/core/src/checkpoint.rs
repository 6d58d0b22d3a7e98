//! Binary checkpoint format and the training-log CSV.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ISRM"  u32 version
//! u64 vertex count   u32 latent dim   u64 spec hash   u8 precision (4 | 8)
//! u32 metadata length, metadata JSON
//! u32 tensor count
//! per tensor: u32 rank, rank × u64 dims, u64 element count, elements (f32 | f64)
//! ```
//!
//! The first tensor is the shape normalizer's mean; the rest are the network
//! parameters in [`Parameterized`] order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io_util::{read_file, write_atomic};
use crate::model::{JointNetwork, LossBreakdown, NetworkSpec, ShapeNormalizer};
use crate::nn::{Parameterized, Tensor};
use crate::train::{EpochLog, Precision, TrainConfig, TrainedModel};

pub const MAGIC: [u8; 4] = *b"ISRM";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Metadata {
    spec: NetworkSpec,
    config: TrainConfig,
    source_hash: String,
    normalizer_scale: f64,
    initial_loss: LossBreakdown,
    history: Vec<EpochLog>,
}

/// First 8 bytes of the SHA-256 of the serialized `NetworkSpec`.
pub fn spec_hash(spec: &NetworkSpec) -> u64 {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let out = &self.data[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                "checkpoint",
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            )),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("checkpoint", "size overflow"))
    }
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor, precision: Precision) {
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    out.extend((t.len() as u64).to_le_bytes());
    for &v in t.data() {
        match precision {
            Precision::F32 => out.extend((v as f32).to_le_bytes()),
            Precision::F64 => out.extend(v.to_le_bytes()),
        }
    }
}

fn read_tensor(r: &mut Reader<'_>, precision: Precision) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::format("checkpoint", format!("tensor rank {rank}")));
    }
    let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let len = r.usize()?;
    if shape.iter().product::<usize>() != len {
        return Err(Error::format(
            "checkpoint",
            "tensor length disagrees with its shape",
        ));
    }
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let raw = r.take(
        len.checked_mul(width)
            .ok_or_else(|| Error::format("checkpoint", "size overflow"))?,
    )?;
    let data = match precision {
        Precision::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
            .collect(),
        Precision::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect(),
    };
    Tensor::from_vec(&shape, data)
}

impl TrainedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let precision = self.config.precision;
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(((self.spec.shape_dim / 3) as u64).to_le_bytes());
        out.extend((self.spec.latent_dim as u32).to_le_bytes());
        out.extend(spec_hash(&self.spec).to_le_bytes());
        out.push(match precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        });
        let meta = Metadata {
            spec: self.spec.clone(),
            config: self.config.clone(),
            source_hash: self.source_hash.clone(),
            normalizer_scale: self.normalizer.scale,
            initial_loss: self.initial_loss,
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(json);
        let mean = Tensor::from_vec(&[self.normalizer.mean.len()], self.normalizer.mean.clone())
            .expect("rank-1 tensor");
        let tensors = self.network.tensors();
        out.extend((tensors.len() as u32 + 1).to_le_bytes());
        write_tensor(&mut out, &mean, precision);
        for t in tensors {
            write_tensor(&mut out, t, precision);
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        let magic: [u8; 4] = match data.get(..4) {
            Some(m) => m.try_into().expect("4"),
            None => {
                let mut found = [0u8; 4];
                found[..data.len()].copy_from_slice(data);
                return Err(Error::BadMagic {
                    expected: MAGIC,
                    found,
                });
            }
        };
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        r.take(4)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                what: "checkpoint",
                found: version,
                supported: VERSION,
            });
        }
        let n = r.usize()?;
        let d = r.u32()? as usize;
        let hash = r.u64()?;
        let precision = match r.u8()? {
            4 => Precision::F32,
            8 => Precision::F64,
            other => {
                return Err(Error::format(
                    "checkpoint",
                    format!("precision byte {other}"),
                ))
            }
        };
        let meta_len = r.u32()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)?;
        if spec_hash(&meta.spec) != hash {
            return Err(Error::format(
                "checkpoint",
                "spec hash does not match stored spec",
            ));
        }
        if meta.spec.shape_dim != 3 * n || meta.spec.latent_dim != d {
            return Err(Error::format(
                "checkpoint",
                "dims block disagrees with stored spec",
            ));
        }
        if meta.config.precision != precision {
            return Err(Error::format(
                "checkpoint",
                "precision byte disagrees with config",
            ));
        }
        let count = r.u32()? as usize;
        let mut network = JointNetwork::new(&meta.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected = network.tensors().len() + 1;
        if count != expected {
            return Err(Error::format(
                "checkpoint",
                format!("{count} tensors, expected {expected}"),
            ));
        }
        let mean = read_tensor(&mut r, precision)?;
        if mean.shape() != [meta.spec.shape_dim] {
            return Err(Error::format(
                "checkpoint",
                "normalizer mean has wrong shape",
            ));
        }
        for (i, slot) in network.tensors_mut().into_iter().enumerate() {
            let t = read_tensor(&mut r, precision)?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        i + 1,
                        t.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = t;
        }
        if r.pos != data.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        let normalizer = ShapeNormalizer {
            mean: mean.data().to_vec(),
            scale: meta.normalizer_scale,
        };
        TrainedModel::new(
            meta.spec,
            meta.config,
            network,
            normalizer,
            meta.source_hash,
            meta.initial_loss,
            meta.history,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// `epoch,j1,j2,total` rows.
pub fn write_loss_csv(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in history {
        w.serialize(row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("CSV", e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let bytes = read_file(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
