//! Named parameter container with a versioned binary wire format.
//!
//! Layout (little endian): magic `MSPS`, format version `u32`, dtype code
//! `u8` (1 = f32), entry count `u64`, then per entry: name length `u32`,
//! name bytes, rank `u32`, dims as `u64`s, raw values. Round-trips are
//! bit-exact (values travel as raw `f32` bits).

use std::collections::HashMap;
use std::io::{Read, Write};

use super::NnError;

pub const PARAMSTORE_MAGIC: [u8; 4] = *b"MSPS";
pub const PARAMSTORE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered map from parameter name to shaped `f32` array.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, dims: &[usize], data: Vec<f32>) -> Result<(), NnError> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(NnError::Shape(format!(
                "'{name}': dims {dims:?} do not describe {} values",
                data.len()
            )));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            dims: dims.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    /// Names present in `self` keyed to their index, for mismatch reporting.
    pub fn name_index(&self) -> HashMap<&str, usize> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.as_str(), i))
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), NnError> {
        w.write_all(&PARAMSTORE_MAGIC)?;
        w.write_all(&PARAMSTORE_VERSION.to_le_bytes())?;
        w.write_all(&[DTYPE_F32])?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
            for &d in &e.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &e.data {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("vec write cannot fail");
        out
    }

    pub fn read_from<Rd: Read>(r: &mut Rd) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if magic != PARAMSTORE_MAGIC {
            return Err(NnError::Integrity("bad parameter store magic".into()));
        }
        let version = read_u32(r)?;
        if version != PARAMSTORE_VERSION {
            return Err(NnError::UnsupportedVersion {
                found: version,
                expected: PARAMSTORE_VERSION,
            });
        }
        let mut dtype = [0u8; 1];
        read_exact(r, &mut dtype)?;
        if dtype[0] != DTYPE_F32 {
            return Err(NnError::Integrity(format!(
                "unsupported dtype code {}",
                dtype[0]
            )));
        }
        let count = read_u64(r)? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            if name_len > 1 << 16 {
                return Err(NnError::Integrity("implausible name length".into()));
            }
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NnError::Integrity("parameter name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(NnError::Integrity("implausible tensor rank".into()));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(r)? as usize);
            }
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                read_exact(r, &mut buf)?;
                data.push(f32::from_bits(u32::from_le_bytes(buf)));
            }
            store.insert(&name, &dims, data)?;
        }
        Ok(store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut cursor = bytes;
        let store = Self::read_from(&mut cursor)?;
        Ok(store)
    }
}

fn read_exact<Rd: Read>(r: &mut Rd, buf: &mut [u8]) -> Result<(), NnError> {
    r.read_exact(buf)
        .map_err(|_| NnError::Integrity("truncated parameter store".into()))
}

fn read_u32<Rd: Read>(r: &mut Rd) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<Rd: Read>(r: &mut Rd) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
