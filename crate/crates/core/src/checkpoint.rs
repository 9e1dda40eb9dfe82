//! Binary checkpoint format.
//!
//! ```text
//! "DSNT"                      4 bytes
//! format version              u32 LE
//! header length               u32 LE
//! header                      UTF-8 JSON (configs, iteration, seed, entry count, payload size)
//! entries, each:
//!   name length               u32 LE
//!   name                      UTF-8
//!   dtype code                u32 LE (1 = f32, 2 = f64)
//!   rank                      u32 LE
//!   dims                      rank x u32 LE
//!   data                      prod(dims) little-endian elements
//! ```
//!
//! Entry names: registry parameter names, `<state>.running_mean` /
//! `<state>.running_var` for populated normalization statistics, and
//! `optim.<param>.momentum` for SGD momentum buffers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{Network, NetworkConfig};
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::norm::NormState;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: [u8; 4] = *b"DSNT";
pub const FORMAT_VERSION: u32 = 1;

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";
const MOMENTUM_PREFIX: &str = "optim.";
const MOMENTUM_SUFFIX: &str = ".momentum";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// Little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn from_values<T: Scalar>(name: impl Into<String>, dims: Vec<usize>, values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size_of());
        for &v in values {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            dims,
            bytes,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Decoded elements, converted to `T` when the stored precision differs.
    pub fn values<T: Scalar>(&self) -> Vec<T> {
        let size = self.dtype.size_of();
        self.bytes
            .chunks_exact(size)
            .map(|b| match self.dtype {
                DType::F32 => T::lit(f32::read_le(b) as f64),
                DType::F64 => T::lit(f64::read_le(b)),
            })
            .collect()
    }
}

/// Everything in the header document except the framing counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network: NetworkConfig,
    pub train: Option<TrainConfig>,
    /// Completed training iterations.
    pub iteration: usize,
    /// Run seed; with `iteration` it fixes the sampler and augmentation streams.
    pub seed: u64,
    /// Standardization statistics of the training set.
    pub data_stats: Option<ChannelStats>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: CheckpointMeta,
    entries: usize,
    payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub entries: Vec<Entry>,
}

fn dims_of(info_dims: [usize; 4]) -> Vec<usize> {
    info_dims.to_vec()
}

fn momentum_name(param: &str) -> String {
    format!("{MOMENTUM_PREFIX}{param}{MOMENTUM_SUFFIX}")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} exceeds 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    /// Snapshot of parameters, populated normalization statistics and,
    /// when given, one momentum buffer per parameter.
    pub fn capture<T: Scalar>(
        net: &Network<T>,
        velocity: Option<&[Tensor<T>]>,
        train: Option<TrainConfig>,
        iteration: usize,
        data_stats: Option<ChannelStats>,
    ) -> Self {
        let mut entries = Vec::new();
        for (info, value) in net.params().iter().zip(net.values()) {
            entries.push(Entry::from_values(info.name.clone(), dims_of(info.dims), value.data()));
        }
        for (name, state) in net.norm_states() {
            if let Some(m) = &state.running_mean {
                entries.push(Entry::from_values(format!("{name}{RUNNING_MEAN}"), vec![m.len()], m));
            }
            if let Some(v) = &state.running_var {
                entries.push(Entry::from_values(format!("{name}{RUNNING_VAR}"), vec![v.len()], v));
            }
        }
        if let Some(vel) = velocity {
            for (info, v) in net.params().iter().zip(vel) {
                entries.push(Entry::from_values(momentum_name(&info.name), dims_of(info.dims), v.data()));
            }
        }
        let seed = train.as_ref().map_or(0, |t| t.seed);
        Self {
            meta: CheckpointMeta {
                network: net.config().clone(),
                train,
                iteration,
                seed,
                data_stats,
            },
            entries,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload_bytes: u64 = self.entries.iter().map(|e| e.bytes.len() as u64).sum();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            entries: self.entries.len(),
            payload_bytes,
        })?;
        let mut out = Vec::with_capacity(header.len() + payload_bytes as usize + 64 * self.entries.len() + 12);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        push_u32(&mut out, header.len(), "header length")?;
        out.extend_from_slice(&header);
        for e in &self.entries {
            if e.bytes.len() != e.numel() * e.dtype.size_of() {
                return Err(Error::Checkpoint(format!("entry `{}` has inconsistent byte length", e.name)));
            }
            push_u32(&mut out, e.name.len(), "name length")?;
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dtype as u32).to_le_bytes());
            push_u32(&mut out, e.dims.len(), "rank")?;
            for &d in &e.dims {
                push_u32(&mut out, d, "dimension")?;
            }
            out.extend_from_slice(&e.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"DSNT\"")));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let header_len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let mut entries = Vec::with_capacity(header.entries.min(1 << 16));
        let mut payload = 0u64;
        for _ in 0..header.entries {
            let name = r.string("entry name")?;
            let code = r.u32("dtype code")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}`: unknown dtype code {code}")))?;
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank)
                .map(|_| r.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}`: size overflow")))?;
            let data = r.take(len, "entry data")?.to_vec();
            payload += len as u64;
            entries.push(Entry {
                name,
                dtype,
                dims,
                bytes: data,
            });
        }
        if payload != header.payload_bytes {
            return Err(Error::Checkpoint(format!(
                "payload is {payload} bytes, header declares {}",
                header.payload_bytes
            )));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            meta: header.meta,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn expect<'a>(&'a self, name: &str, dims: &[usize]) -> Result<&'a Entry> {
        let e = self.entry(name).ok_or_else(|| Error::MissingEntry(name.to_string()))?;
        if e.dims != dims {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: dims.to_vec(),
                found: e.dims.clone(),
            });
        }
        Ok(e)
    }

    /// Copies parameters and statistics into `net`. Every entry is checked
    /// against the network before anything is written, so a failed load
    /// leaves `net` untouched.
    pub fn apply<T: Scalar>(&self, net: &mut Network<T>) -> Result<()> {
        let mut known = std::collections::HashSet::new();
        let mut values = Vec::with_capacity(net.params().len());
        for info in net.params() {
            let e = self.expect(&info.name, &info.dims)?;
            known.insert(e.name.as_str());
            values.push(Tensor::from_vec(info.dims, e.values())?);
        }
        let mut states = Vec::new();
        for (name, state) in net.norm_states() {
            let mut load = |suffix: &str, current: &Option<Vec<T>>| -> Result<Option<Vec<T>>> {
                let key = format!("{name}{suffix}");
                match (self.entry(&key), current) {
                    (Some(_), Some(cur)) => {
                        let e = self.expect(&key, &[cur.len()])?;
                        known.insert(e.name.as_str());
                        Ok(Some(e.values()))
                    }
                    (Some(e), None) => {
                        if e.dims.len() != 1 {
                            return Err(Error::ParamShape {
                                name: key,
                                expected: vec![e.numel()],
                                found: e.dims.clone(),
                            });
                        }
                        known.insert(e.name.as_str());
                        Ok(Some(e.values()))
                    }
                    (None, Some(_)) => Err(Error::MissingEntry(key)),
                    (None, None) => Ok(None),
                }
            };
            let mean = load(RUNNING_MEAN, &state.running_mean)?;
            let var = load(RUNNING_VAR, &state.running_var)?;
            states.push(NormState {
                running_mean: mean,
                running_var: var,
            });
        }
        for info in net.params() {
            let key = momentum_name(&info.name);
            if self.entry(&key).is_some() {
                known.insert(self.expect(&key, &info.dims)?.name.as_str());
            }
        }
        if let Some(extra) = self.entries.iter().find(|e| !known.contains(e.name.as_str())) {
            return Err(Error::Checkpoint(format!(
                "entry `{}` does not belong to this network",
                extra.name
            )));
        }
        for (slot, v) in net.values_mut().iter_mut().zip(values) {
            *slot = v;
        }
        for ((_, slot), s) in net.norm_states_mut().zip(states) {
            *slot = s;
        }
        Ok(())
    }

    /// Builds the stored network and loads its state.
    pub fn to_network<T: Scalar>(&self) -> Result<Network<T>> {
        let mut net = Network::build(&self.meta.network, self.meta.seed)?;
        self.apply(&mut net)?;
        Ok(net)
    }

    /// Momentum buffers in registry order, if the checkpoint holds them.
    pub fn momentum_buffers<T: Scalar>(&self, net: &Network<T>) -> Result<Option<Vec<Tensor<T>>>> {
        let present = net.params().iter().any(|p| self.entry(&momentum_name(&p.name)).is_some());
        if !present {
            return Ok(None);
        }
        net.params()
            .iter()
            .map(|p| {
                let e = self.expect(&momentum_name(&p.name), &p.dims)?;
                Tensor::from_vec(p.dims, e.values())
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Variant;

    fn tiny() -> NetworkConfig {
        NetworkConfig::tiny(Variant::DsNet, vec![1, 2], 4, 8, 3)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let net = Network::<f64>::build(&tiny(), 1).unwrap();
        let ck = Checkpoint::capture(&net, None, None, 0, None);
        let bytes = ck.to_bytes().unwrap();
        let again = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(again, ck);
        assert_eq!(again.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn framing_errors() {
        let net = Network::<f32>::build(&tiny(), 1).unwrap();
        let bytes = Checkpoint::capture(&net, None, None, 0, None).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
