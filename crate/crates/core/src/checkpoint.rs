//! The `PVIT1` checkpoint archive.
//!
//! Layout (all integers little-endian): the magic `PVIT1`, a `u32` format
//! version, a `u32` entry count, then per entry a `u32` name length, the
//! UTF-8 name, a `u8` dtype code, a `u8` rank, `rank` `u64` dims and the
//! payload.

use std::path::Path;

use ndarray::Array2;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prototypes::Provenance;
use crate::trainer::{Stage, TrainState};

pub const MAGIC: &[u8; 5] = b"PVIT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F64 = 0,
    U64 = 1,
    U8 = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub payload: Payload,
}

impl Entry {
    fn f64_matrix(name: &str, t: &Array2<f64>) -> Self {
        let dims = vec![t.nrows() as u64, t.ncols() as u64];
        Self { name: name.into(), dims, payload: Payload::F64(t.iter().copied().collect()) }
    }

    fn scalar_u64(name: &str, v: u64) -> Self {
        Self { name: name.into(), dims: vec![], payload: Payload::U64(vec![v]) }
    }
}

/// Everything needed to resume or inspect a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub state: TrainState,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("archive is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn encode_entries(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let dtype = match e.payload {
            Payload::F64(_) => Dtype::F64,
            Payload::U64(_) => Dtype::U64,
            Payload::U8(_) => Dtype::U8,
        };
        out.push(dtype as u8);
        out.push(e.dims.len() as u8);
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
    }
    out
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a PVIT1 archive".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint("dims overflow".into()))? as usize;
        let payload = match dtype {
            0 => Payload::F64(r.take(n.saturating_mul(8))?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
            1 => Payload::U64(r.take(n.saturating_mul(8))?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
            2 => Payload::U8(r.take(n)?.to_vec()),
            other => return Err(Error::Checkpoint(format!("{name}: unknown dtype {other}"))),
        };
        entries.push(Entry { name, dims, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
    }
    Ok(entries)
}

fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry> {
    entries.iter().find(|e| e.name == name).ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
}

fn as_u64<'a>(entries: &'a [Entry], name: &str) -> Result<&'a [u64]> {
    match &find(entries, name)?.payload {
        Payload::U64(v) => Ok(v),
        _ => Err(Error::Checkpoint(format!("{name} should hold u64 values"))),
    }
}

fn as_f64<'a>(entries: &'a [Entry], name: &str) -> Result<&'a [f64]> {
    match &find(entries, name)?.payload {
        Payload::F64(v) => Ok(v),
        _ => Err(Error::Checkpoint(format!("{name} should hold f64 values"))),
    }
}

fn as_u8<'a>(entries: &'a [Entry], name: &str) -> Result<&'a [u8]> {
    match &find(entries, name)?.payload {
        Payload::U8(v) => Ok(v),
        _ => Err(Error::Checkpoint(format!("{name} should hold u8 values"))),
    }
}

impl Checkpoint {
    pub fn new(config: RunConfig, model: Model, state: TrainState) -> Self {
        Self { config, model, state }
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let bank = &self.model.bank;
        let text = self.config.to_text().into_bytes();
        let mut entries = vec![Entry { name: "config".into(), dims: vec![text.len() as u64], payload: Payload::U8(text) }];
        for (name, _, t) in self.model.param_tensors() {
            entries.push(Entry::f64_matrix(&name, t));
        }
        entries.push(Entry {
            name: "proto.class_of".into(),
            dims: vec![bank.class_of.len() as u64],
            payload: Payload::U64(bank.class_of.iter().map(|&c| c as u64).collect()),
        });
        entries.push(Entry { name: "proto.tau".into(), dims: vec![], payload: Payload::F64(vec![bank.tau]) });
        entries.push(Entry { name: "proto.slots_frozen".into(), dims: vec![], payload: Payload::U8(vec![bank.slots_frozen as u8]) });
        let prov: Vec<u64> = bank
            .provenance
            .iter()
            .flat_map(|p| match p {
                Some(p) => [1, p.image_id as u64, p.token as u64],
                None => [0, 0, 0],
            })
            .collect();
        entries.push(Entry { name: "proto.provenance".into(), dims: vec![bank.provenance.len() as u64, 3], payload: Payload::U64(prov) });
        entries.push(Entry::scalar_u64("state.last_stage", self.state.stage_code()));
        entries.push(Entry::scalar_u64("state.steps", self.state.steps));
        entries
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_entries(&self.to_entries())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = decode_entries(bytes)?;
        let text = std::str::from_utf8(as_u8(&entries, "config")?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        let mut model = config.build_model()?;
        let names: Vec<String> = model.param_tensors().into_iter().map(|(n, _, _)| n).collect();
        for (name, (_, t)) in names.iter().zip(model.param_tensors_mut()) {
            let e = find(&entries, name)?;
            if e.dims != [t.nrows() as u64, t.ncols() as u64] {
                return Err(Error::Checkpoint(format!("{name}: stored dims {:?} do not match {:?}", e.dims, t.dim())));
            }
            let values = as_f64(&entries, name)?;
            t.iter_mut().zip(values).for_each(|(d, &s)| *d = s);
        }
        let bank = &mut model.bank;
        let class_of = as_u64(&entries, "proto.class_of")?;
        if class_of.len() != bank.len() {
            return Err(Error::Checkpoint("proto.class_of has the wrong length".into()));
        }
        bank.class_of = class_of.iter().map(|&c| c as usize).collect();
        bank.tau = *as_f64(&entries, "proto.tau")?.first().ok_or_else(|| Error::Checkpoint("empty proto.tau".into()))?;
        bank.slots_frozen = as_u8(&entries, "proto.slots_frozen")?.first() == Some(&1);
        let prov = as_u64(&entries, "proto.provenance")?;
        if prov.len() != bank.provenance.len() * 3 {
            return Err(Error::Checkpoint("proto.provenance has the wrong length".into()));
        }
        bank.provenance = prov
            .chunks_exact(3)
            .map(|c| (c[0] == 1).then_some(Provenance { image_id: c[1] as usize, token: c[2] as usize }))
            .collect();
        bank.validate()?;
        let code = *as_u64(&entries, "state.last_stage")?.first().unwrap_or(&0);
        let last_stage = if code == 0 {
            None
        } else {
            Some(Stage::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown stage code {code}")))?)
        };
        let steps = *as_u64(&entries, "state.steps")?.first().unwrap_or(&0);
        Ok(Self { config, model, state: TrainState { last_stage, steps } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
