//! DRCK checkpoints.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! "DRCK" | version | header length | header JSON | record count
//! then per record: name length | UTF-8 name | DRT4 tensor
//! ```
//!
//! Every store entry is written once, so a shared module costs one set of
//! records however many times it is applied. Entries expand to
//! `<entry>.weight`, `.bias`, `.gamma`, `.beta`, `.running_mean` and
//! `.running_var`; per-application BN statistics use `<entry>@<n>.running_*`.

use std::fs;
use std::path::Path;

use crowdcount_core::model::{Model, ModelSpec, Param, RunningStats};
use crowdcount_core::tensor::codec;
use crowdcount_core::{Shape4, Tensor4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DRCK";
pub const VERSION: u32 = 1;

/// Construction choices a reader needs to rebuild the network exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decisions {
    pub channels: usize,
    pub kernel_size: usize,
    pub pooling: String,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub running_stats: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub decisions: Decisions,
    /// Training iterations completed when the checkpoint was taken.
    pub iteration: usize,
}

const POOLING: &str = "2x2 max after the stem and after module 1";
const RUNNING_STATS: &str = "per application";

fn vector(values: &[f32]) -> Tensor4<f32> {
    Tensor4::from_vec(Shape4::new(values.len(), 1, 1, 1), values.to_vec()).expect("length matches")
}

fn records(model: &Model<f32>) -> Vec<(String, Tensor4<f32>)> {
    let mut out = Vec::new();
    for (name, param) in model.store().iter() {
        match param {
            Param::Conv(c) => {
                out.push((format!("{name}.weight"), c.weight.clone()));
                if let Some(b) = &c.bias {
                    out.push((format!("{name}.bias"), b.clone()));
                }
            }
            Param::BatchNorm(b) => {
                out.push((format!("{name}.gamma"), b.gamma.clone()));
                out.push((format!("{name}.beta"), b.beta.clone()));
                out.push((format!("{name}.running_mean"), vector(&b.running_mean)));
                out.push((format!("{name}.running_var"), vector(&b.running_var)));
            }
        }
    }
    for (name, stats) in model.application_stats() {
        out.push((format!("{name}.running_mean"), vector(&stats.mean)));
        out.push((format!("{name}.running_var"), vector(&stats.var)));
    }
    for (_, t) in &mut out {
        t.clear_grad();
    }
    out
}

fn header_for(model: &Model<f32>, seed: u64, iteration: usize) -> CheckpointHeader {
    let (eps, momentum) = model
        .store()
        .iter()
        .find_map(|(_, p)| match p {
            Param::BatchNorm(b) => Some((f64::from(b.epsilon), f64::from(b.momentum))),
            Param::Conv(_) => None,
        })
        .expect("every architecture has batch norm");
    CheckpointHeader {
        spec: *model.spec(),
        decisions: Decisions {
            channels: model.spec().channels,
            kernel_size: 3,
            pooling: POOLING.to_string(),
            bn_epsilon: eps,
            bn_momentum: momentum,
            running_stats: RUNNING_STATS.to_string(),
            seed,
        },
        iteration,
    }
}

pub fn encode_checkpoint(model: &Model<f32>, seed: u64, iteration: usize) -> Vec<u8> {
    let header = serde_json::to_vec(&header_for(model, seed, iteration)).expect("header serializes");
    let records = records(model);
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in &records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        codec::encode_into(tensor, &mut out);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<usize> {
        let b = self.take(4)?;
        Some(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint held in memory. `path` is only used in error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model<f32>, CheckpointHeader)> {
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(&MAGIC[..]) {
        return Err(bad("not a DRCK checkpoint"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != VERSION as usize {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u32().ok_or_else(|| bad("truncated header"))?;
    let header_bytes = r.take(header_len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes).map_err(|e| Error::json(path, &e))?;

    let mut model = Model::<f32>::build(header.spec, header.decisions.seed)?;
    let mut expected: Vec<String> = records(&model).into_iter().map(|(n, _)| n).collect();
    let count = r.u32().ok_or_else(|| bad("missing record count"))?;
    for _ in 0..count {
        let len = r.u32().ok_or_else(|| bad("truncated record"))?;
        let name = r.take(len).ok_or_else(|| bad("truncated record"))?;
        let name = std::str::from_utf8(name)
            .map_err(|_| bad("record name is not UTF-8"))?
            .to_string();
        let (tensor, used) = codec::decode_prefix(&bytes[r.pos..]).map_err(|e| bad(&format!("{name}: {e}")))?;
        r.pos += used;
        let Some(i) = expected.iter().position(|n| *n == name) else {
            return Err(bad(&format!("unexpected or repeated record `{name}`")));
        };
        expected.swap_remove(i);
        assign(&mut model, &name, tensor).map_err(|m| bad(&format!("{name}: {m}")))?;
    }
    if let Some(missing) = expected.first() {
        return Err(bad(&format!("missing record `{missing}`")));
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after the last record"));
    }
    let (eps, momentum) = (header.decisions.bn_epsilon as f32, header.decisions.bn_momentum as f32);
    let names: Vec<String> = model.store().iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        if let Some(Param::BatchNorm(b)) = model.store_mut().by_name_mut(&name) {
            b.epsilon = eps;
            b.momentum = momentum;
        }
    }
    Ok((model, header))
}

fn assign(model: &mut Model<f32>, record: &str, tensor: Tensor4<f32>) -> Result<(), String> {
    let (entry, field) = record.rsplit_once('.').ok_or("record name has no field")?;
    if entry.contains('@') {
        let mut stats: RunningStats<f32> = model
            .application_stats()
            .into_iter()
            .find(|(n, _)| n == entry)
            .map(|(_, s)| s.clone())
            .ok_or("unknown application statistics")?;
        let slot = match field {
            "running_mean" => &mut stats.mean,
            "running_var" => &mut stats.var,
            _ => return Err(format!("unknown field `{field}`")),
        };
        copy_vector(slot, &tensor)?;
        return model.set_application_stats(entry, stats).map_err(|e| e.to_string());
    }
    let param = model.store_mut().by_name_mut(entry).ok_or("unknown entry")?;
    match (param, field) {
        (Param::Conv(c), "weight") => copy_tensor(&mut c.weight, tensor),
        (Param::Conv(c), "bias") => copy_tensor(c.bias.as_mut().ok_or("layer has no bias")?, tensor),
        (Param::BatchNorm(b), "gamma") => copy_tensor(&mut b.gamma, tensor),
        (Param::BatchNorm(b), "beta") => copy_tensor(&mut b.beta, tensor),
        (Param::BatchNorm(b), "running_mean") => copy_vector(&mut b.running_mean, &tensor),
        (Param::BatchNorm(b), "running_var") => copy_vector(&mut b.running_var, &tensor),
        _ => Err(format!("unknown field `{field}`")),
    }
}

fn copy_tensor(dst: &mut Tensor4<f32>, src: Tensor4<f32>) -> Result<(), String> {
    if dst.shape() != src.shape() {
        return Err(format!("shape {} does not match {}", src.shape(), dst.shape()));
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

fn copy_vector(dst: &mut [f32], src: &Tensor4<f32>) -> Result<(), String> {
    if src.shape() != Shape4::new(dst.len(), 1, 1, 1) {
        return Err(format!("expected {} values, got shape {}", dst.len(), src.shape()));
    }
    dst.copy_from_slice(src.data());
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, seed: u64, iteration: usize) -> Result<()> {
    fs::write(path, encode_checkpoint(model, seed, iteration)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crowdcount_core::model::Arch;
    use crowdcount_core::tensor::NormMode;

    fn trained_like(arch: Arch) -> Model<f32> {
        let mut m = Model::<f32>::build(ModelSpec::new(arch), 4).unwrap();
        let x = Tensor4::from_fn(Shape4::new(2, 3, 16, 16), |n, c, y, x| {
            ((n + 3 * c + 5 * y + 7 * x) % 11) as f32 / 11.0
        });
        m.forward(&x, NormMode::Train).unwrap();
        m
    }

    #[test]
    fn round_trip_preserves_outputs() {
        for arch in Arch::ALL {
            let m = trained_like(arch);
            let bytes = encode_checkpoint(&m, 4, 17);
            let (back, header) = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
            assert_eq!(header.iteration, 17);
            assert_eq!(header.spec, *m.spec());
            let x = Tensor4::from_fn(Shape4::new(1, 3, 16, 16), |_, c, y, x| {
                ((c * 7 + y * 3 + x) % 5) as f32 / 5.0
            });
            assert_eq!(m.infer(&x).unwrap().data(), back.infer(&x).unwrap().data(), "{arch}");
        }
    }

    #[test]
    fn shared_module_is_stored_once() {
        let dr = encode_checkpoint(&trained_like(Arch::DrResNet), 0, 0);
        let plain = encode_checkpoint(&trained_like(Arch::ResNet26), 0, 0);
        // resnet26 stores two extra modules of weights; dr_resnet only their BN statistics
        assert!(dr.len() < plain.len());
        let module3 = b"module3.".as_slice();
        assert!(!dr.windows(module3.len()).any(|w| w == module3));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode_checkpoint(&trained_like(Arch::ResNet14), 0, 0);
        let p = Path::new("mem");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, p).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic, p).is_err());
        // a resnet14 header cannot absorb dr_resnet records
        let dr = encode_checkpoint(&trained_like(Arch::DrResNet), 0, 0);
        let mut mixed = bytes[..12].to_vec();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        mixed.extend_from_slice(&bytes[12..12 + hlen]);
        let dr_hlen = u32::from_le_bytes(dr[8..12].try_into().unwrap()) as usize;
        mixed.extend_from_slice(&dr[12 + dr_hlen..]);
        assert!(decode_checkpoint(&mixed, p).is_err());
    }
}
