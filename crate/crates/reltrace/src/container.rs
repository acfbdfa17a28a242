//! Binary section container used by the weight and feature-dump formats.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RTRC" | version u32 | header_len u32 | header bytes
//! n_sections u32
//! per section: name_len u32 | UTF-8 name | rank u32 | extents u64[rank] | payload
//! ```
//!
//! Payload elements are 4 bytes each (f32 for weight tensors and feature
//! values, u32 for index maps, labels, and enums); the element count is the
//! product of the extents.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RTRC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    pub extents: Vec<u64>,
    /// Raw little-endian payload; 4 bytes per element.
    pub payload: Vec<u8>,
}

impl Section {
    pub fn from_f32(name: &str, extents: Vec<u64>, values: &[f32]) -> Self {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { name: name.to_string(), extents, payload }
    }

    pub fn from_u32(name: &str, extents: Vec<u64>, values: &[u32]) -> Self {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { name: name.to_string(), extents, payload }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    pub fn as_u32(&self) -> Vec<u32> {
        self.payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    pub fn element_count(&self) -> usize {
        self.extents.iter().product::<u64>() as usize
    }
}

#[derive(Debug, Clone)]
pub struct Container {
    pub header: Vec<u8>,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(header: Vec<u8>) -> Self {
        Self { header, sections: Vec::new() }
    }

    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Format(format!("missing section '{name}'")))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.header.len() as u32).to_le_bytes())?;
        w.write_all(&self.header)?;
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for s in &self.sections {
            let name = s.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(s.extents.len() as u32).to_le_bytes())?;
            for e in &s.extents {
                w.write_all(&e.to_le_bytes())?;
            }
            if s.payload.len() != s.element_count() * 4 {
                return Err(Error::Format(format!(
                    "section '{}' payload length {} disagrees with extents {:?}",
                    s.name,
                    s.payload.len(),
                    s.extents
                )));
            }
            w.write_all(&s.payload)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        read_exact(&mut r, &mut header)?;
        let n_sections = read_u32(&mut r)? as usize;
        let mut sections = Vec::with_capacity(n_sections);
        for _ in 0..n_sections {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut extents = Vec::with_capacity(rank);
            for _ in 0..rank {
                extents.push(read_u64(&mut r)?);
            }
            let count: u64 = extents.iter().product();
            let mut payload = vec![0u8; (count as usize) * 4];
            read_exact(&mut r, &mut payload)?;
            sections.push(Section { name, extents, payload });
        }
        Ok(Self { header, sections })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("truncated container".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
