//! `LMCK` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LMCK" | version u16 | section count u16
//! per section: tag [4] | offset u64 | length u64 | crc32 u32
//! crc32 u32 of everything above
//! section payloads, contiguous, in table order
//! ```
//!
//! Sections: `META` (JSON), `PARM` (tensor table), and optionally `ADMM` /
//! `ADMV` (Adam moments). A tensor table is a u32 count followed by entries of
//! `name_len u16 | name | kind u8 | rank u8 | dims u32×rank | f32 data`.

use std::fs;
use std::path::Path;

use levitmc_tensor::{Tensor, MAX_RANK};
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::plateau::PlateauState;
use super::trainer::{EpochMetrics, TrainConfig};
use crate::data::ClassIndex;
use crate::error::{io_err, Error, Result};
use crate::model::{Architecture, ModelGraph, ParamKind, ParamStore};

pub const MAGIC: [u8; 4] = *b"LMCK";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 8;
const ENTRY_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelGraph,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub class_index: Option<ClassIndex>,
    pub plateau: Option<PlateauState>,
    pub adam: Option<AdamState>,
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    arch_tag: String,
    architecture: Architecture,
    epoch: usize,
    history: Vec<EpochMetrics>,
    class_index: Option<ClassIndex>,
    plateau: Option<PlateauState>,
    adam_step: Option<u64>,
    train_config: Option<TrainConfig>,
}

fn corrupt(m: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(m.into())
}

fn write_table<'a>(out: &mut Vec<u8>, entries: impl Iterator<Item = (&'a str, ParamKind, &'a Tensor<f32>)>) {
    let at = out.len();
    out.extend_from_slice(&0u32.to_le_bytes());
    let mut count = 0u32;
    for (name, kind, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        count += 1;
    }
    out[at..at + 4].copy_from_slice(&count.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("truncated tensor table"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_table(buf: &[u8]) -> Result<Vec<(String, ParamKind, Tensor<f32>)>> {
    let mut r = Reader { buf, pos: 0 };
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let kind = match r.u8()? {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(corrupt(format!("unknown tensor kind {k}"))),
        };
        let rank = r.u8()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(corrupt(format!("tensor {name} has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(format!("tensor {name} is too large")))?;
        let data = r
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| corrupt(e.to_string()))?;
        out.push((name, kind, t));
    }
    if r.pos != buf.len() {
        return Err(corrupt("trailing bytes after tensor table"));
    }
    Ok(out)
}

impl Checkpoint {
    /// Checkpoint of an untrained model.
    pub fn initial(model: ModelGraph) -> Self {
        Self {
            model,
            epoch: 0,
            history: Vec::new(),
            class_index: None,
            plateau: None,
            adam: None,
            train_config: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            arch_tag: self.model.tag().to_string(),
            architecture: self.model.arch.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            class_index: self.class_index.clone(),
            plateau: self.plateau.clone(),
            adam_step: self.adam.as_ref().map(|a| a.step),
            train_config: self.train_config.clone(),
        };
        let mut sections: Vec<([u8; 4], Vec<u8>)> = vec![(*b"META", serde_json::to_vec(&meta)?)];
        let mut parm = Vec::new();
        write_table(
            &mut parm,
            self.model
                .params
                .entries()
                .iter()
                .map(|e| (e.name.as_str(), e.kind, &e.tensor)),
        );
        sections.push((*b"PARM", parm));
        if let Some(adam) = &self.adam {
            // parameter order keeps the encoding deterministic
            let order: Vec<&str> = self
                .model
                .params
                .entries()
                .iter()
                .map(|e| e.name.as_str())
                .filter(|n| adam.moments.contains_key(*n))
                .collect();
            if order.len() != adam.moments.len() {
                return Err(Error::Config("optimizer state names unknown parameters".into()));
            }
            for (tag, pick) in [(*b"ADMM", 0), (*b"ADMV", 1)] {
                let mut buf = Vec::new();
                write_table(
                    &mut buf,
                    order.iter().map(|&n| {
                        let (m, v) = &adam.moments[n];
                        (n, ParamKind::Trainable, if pick == 0 { m } else { v })
                    }),
                );
                sections.push((tag, buf));
            }
        }
        let table_end = HEADER_LEN + ENTRY_LEN * sections.len();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u16).to_le_bytes());
        let mut offset = (table_end + 4) as u64;
        for (tag, body) in &sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
            offset += body.len() as u64;
        }
        let header_crc = crc32fast::hash(&out);
        out.extend_from_slice(&header_crc.to_le_bytes());
        for (_, body) in &sections {
            out.extend_from_slice(body);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(corrupt("file shorter than the magic"));
        }
        if buf[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &buf[..4])));
        }
        if buf.len() < HEADER_LEN {
            return Err(corrupt("truncated header"));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = u16::from_le_bytes([buf[6], buf[7]]) as usize;
        let table_end = HEADER_LEN + ENTRY_LEN * count;
        if buf.len() < table_end + 4 {
            return Err(corrupt("truncated section table"));
        }
        let stored = u32::from_le_bytes(buf[table_end..table_end + 4].try_into().expect("4 bytes"));
        if crc32fast::hash(&buf[..table_end]) != stored {
            return Err(corrupt("header checksum mismatch"));
        }
        let mut expected_offset = (table_end + 4) as u64;
        let mut meta = None;
        let mut parm = None;
        let mut moments: [Option<Vec<_>>; 2] = [None, None];
        for i in 0..count {
            let e = &buf[HEADER_LEN + ENTRY_LEN * i..HEADER_LEN + ENTRY_LEN * (i + 1)];
            let tag: [u8; 4] = e[..4].try_into().expect("4 bytes");
            let offset = u64::from_le_bytes(e[4..12].try_into().expect("8 bytes"));
            let length = u64::from_le_bytes(e[12..20].try_into().expect("8 bytes"));
            let crc = u32::from_le_bytes(e[20..24].try_into().expect("4 bytes"));
            if offset != expected_offset {
                return Err(corrupt(format!("section {i} is not contiguous")));
            }
            let end = offset
                .checked_add(length)
                .filter(|&end| end <= buf.len() as u64)
                .ok_or_else(|| corrupt(format!("section {} is truncated", String::from_utf8_lossy(&tag))))?;
            let body = &buf[offset as usize..end as usize];
            if crc32fast::hash(body) != crc {
                return Err(corrupt(format!(
                    "checksum mismatch in section {}",
                    String::from_utf8_lossy(&tag)
                )));
            }
            expected_offset = end;
            match &tag {
                b"META" => {
                    meta = Some(
                        serde_json::from_slice::<Meta>(body)
                            .map_err(|e| Error::Format(format!("metadata: {e}")))?,
                    )
                }
                b"PARM" => parm = Some(read_table(body)?),
                b"ADMM" => moments[0] = Some(read_table(body)?),
                b"ADMV" => moments[1] = Some(read_table(body)?),
                _ => {}
            }
        }
        if expected_offset != buf.len() as u64 {
            return Err(corrupt("trailing bytes after the last section"));
        }
        let meta = meta.ok_or_else(|| Error::Format("missing META section".into()))?;
        let parm = parm.ok_or_else(|| Error::Format("missing PARM section".into()))?;
        if meta.arch_tag != meta.architecture.tag() {
            return Err(Error::Format(format!(
                "tag {} does not match architecture {}",
                meta.arch_tag,
                meta.architecture.tag()
            )));
        }
        let mut params = ParamStore::new();
        for (name, kind, t) in parm {
            params.insert(name, kind, t).map_err(|e| Error::Format(e.to_string()))?;
        }
        let adam = match (meta.adam_step, moments) {
            (None, [None, None]) => None,
            (Some(step), [Some(m), Some(v)]) => {
                if m.len() != v.len() {
                    return Err(Error::Format("moment tables differ in length".into()));
                }
                let mut state = AdamState { step, ..AdamState::default() };
                for ((name, _, mt), (vname, _, vt)) in m.into_iter().zip(v) {
                    let shape_ok = params.get(&name).is_some_and(|p| p.shape() == mt.shape());
                    if name != vname || !shape_ok || mt.shape() != vt.shape() {
                        return Err(Error::Format(format!("moment {name} does not match its parameter")));
                    }
                    state.moments.insert(name, (mt, vt));
                }
                Some(state)
            }
            _ => return Err(Error::Format("incomplete optimizer state".into())),
        };
        Ok(Self {
            model: ModelGraph {
                arch: meta.architecture,
                params,
            },
            epoch: meta.epoch,
            history: meta.history,
            class_index: meta.class_index,
            plateau: meta.plateau,
            adam,
            train_config: meta.train_config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}
