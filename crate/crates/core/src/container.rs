//! Named-tensor binary container.
//!
//! Layout (all integers little-endian):
//!   magic "LEGO" | version u32 | registry count u32 |
//!   per registry entry: name len u16 + UTF-8 bytes |
//!   tensor count u32 |
//!   per tensor: name len u16 + UTF-8 | rank u8 | extents u64 each |
//!               raw f32 little-endian data
//!
//! Readers track their byte offset so corruption errors name the exact
//! position. save → load → save is byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LEGO";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct Container {
    /// Generator names in branch order; defines router column order.
    pub registry: Vec<String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(registry: Vec<String>) -> Self {
        Container {
            registry,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(Error::Registry(format!("duplicate tensor name '{name}'")));
        }
        self.tensors.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor<f32>> {
        let pos = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(pos).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.registry.len() as u32).to_le_bytes());
        for name in &self.registry {
            write_name(&mut out, name)?;
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            write_name(&mut out, name)?;
            let shape = tensor.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::Format {
                    offset: out.len() as u64,
                    msg: format!("tensor '{name}' rank {} exceeds u8", shape.len()),
                });
            }
            out.push(shape.len() as u8);
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported format version {version}, reader supports {VERSION}"),
            });
        }
        let reg_count = r.u32()?;
        let mut registry = Vec::with_capacity(reg_count as usize);
        for _ in 0..reg_count {
            registry.push(r.name()?);
        }
        let tensor_count = r.u32()?;
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(tensor_count as usize);
        for _ in 0..tensor_count {
            let name = r.name()?;
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(Error::Format {
                    offset: r.offset as u64,
                    msg: format!("duplicate tensor name '{name}'"),
                });
            }
            let rank = r.take(1)?[0] as usize;
            if rank == 0 {
                return Err(Error::Format {
                    offset: r.offset as u64,
                    msg: format!("tensor '{name}' has rank 0"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let e = r.u64()?;
                if e == 0 || numel.checked_mul(e).map(|n| n > (1 << 32)).unwrap_or(true) {
                    return Err(Error::Format {
                        offset: r.offset as u64,
                        msg: format!("tensor '{name}' has invalid extents"),
                    });
                }
                numel *= e;
                shape.push(e as usize);
            }
            let raw = r.take(numel as usize * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.offset != bytes.len() {
            return Err(Error::Format {
                offset: r.offset as u64,
                msg: format!("{} trailing bytes after last tensor", bytes.len() - r.offset),
            });
        }
        Ok(Container { registry, tensors })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Format {
            offset: out.len() as u64,
            msg: format!("name '{name}' exceeds u16 length"),
        });
    }
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset as u64,
                msg: format!(
                    "truncated: wanted {n} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn name(&mut self) -> Result<String> {
        let b = self.take(2)?;
        let len = u16::from_le_bytes([b[0], b[1]]) as usize;
        let start = self.offset;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: start as u64,
            msg: "name is not valid UTF-8".into(),
        })
    }
}
