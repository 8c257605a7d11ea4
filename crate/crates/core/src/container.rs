//! Self-describing binary container for model and policy files.
//!
//! Layout: magic `GPRC`, u32 LE version, then named fields. Each field is
//! (u16 name length, name bytes, u8 kind, payload). Kinds: 0 = f64 array
//! (u8 ndims, u64 dims, f64 LE data), 1 = u64, 2 = UTF-8 string. Writes are
//! deterministic: same content, same bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::array::Array;
use thiserror::Error;

pub const CONTAINER_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GPRC";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("field `{name}` has the wrong kind")]
    WrongKind { name: String },
    #[error("corrupt container: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone)]
enum Value {
    F64Array(Array),
    U64(u64),
    Str(String),
}

/// Field map written to or read from disk.
#[derive(Debug, Default, Clone)]
pub struct Container {
    fields: BTreeMap<String, Value>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn put_array(&mut self, name: &str, a: Array) {
        self.fields.insert(name.to_string(), Value::F64Array(a));
    }

    pub fn put_vec(&mut self, name: &str, v: &[f64]) {
        self.put_array(name, Array::vector(v));
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.fields.insert(name.to_string(), Value::U64(v));
    }

    pub fn put_str(&mut self, name: &str, v: &str) {
        self.fields.insert(name.to_string(), Value::Str(v.to_string()));
    }

    pub fn array(&self, name: &str) -> Result<&Array, ContainerError> {
        match self.fields.get(name) {
            Some(Value::F64Array(a)) => Ok(a),
            Some(_) => Err(ContainerError::WrongKind { name: name.into() }),
            None => Err(ContainerError::MissingField(name.into())),
        }
    }

    pub fn vec(&self, name: &str) -> Result<Vec<f64>, ContainerError> {
        Ok(self.array(name)?.data().to_vec())
    }

    pub fn u64(&self, name: &str) -> Result<u64, ContainerError> {
        match self.fields.get(name) {
            Some(Value::U64(v)) => Ok(*v),
            Some(_) => Err(ContainerError::WrongKind { name: name.into() }),
            None => Err(ContainerError::MissingField(name.into())),
        }
    }

    pub fn str(&self, name: &str) -> Result<&str, ContainerError> {
        match self.fields.get(name) {
            Some(Value::Str(v)) => Ok(v),
            Some(_) => Err(ContainerError::WrongKind { name: name.into() }),
            None => Err(ContainerError::MissingField(name.into())),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.fields.contains_key(name)
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        // BTreeMap ordering keeps files byte-deterministic.
        for (name, value) in &self.fields {
            out.write_all(&(name.len() as u16).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            match value {
                Value::F64Array(a) => {
                    out.write_all(&[0u8])?;
                    out.write_all(&[a.rank() as u8])?;
                    for &d in a.shape() {
                        out.write_all(&(d as u64).to_le_bytes())?;
                    }
                    for &v in a.data() {
                        out.write_all(&v.to_le_bytes())?;
                    }
                }
                Value::U64(v) => {
                    out.write_all(&[1u8])?;
                    out.write_all(&v.to_le_bytes())?;
                }
                Value::Str(s) => {
                    out.write_all(&[2u8])?;
                    out.write_all(&(s.len() as u32).to_le_bytes())?;
                    out.write_all(s.as_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let mut v4 = [0u8; 4];
        file.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != CONTAINER_VERSION {
            return Err(ContainerError::UnsupportedVersion {
                found: version,
                expected: CONTAINER_VERSION,
            });
        }
        let mut fields = BTreeMap::new();
        loop {
            let mut n2 = [0u8; 2];
            match file.read_exact(&mut n2) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u16::from_le_bytes(n2) as usize;
            let mut name = vec![0u8; name_len];
            file.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| ContainerError::Corrupt("field name not UTF-8".into()))?;
            let mut kind = [0u8; 1];
            file.read_exact(&mut kind)?;
            let value = match kind[0] {
                0 => {
                    let mut nd = [0u8; 1];
                    file.read_exact(&mut nd)?;
                    let mut shape = Vec::with_capacity(nd[0] as usize);
                    let mut d8 = [0u8; 8];
                    for _ in 0..nd[0] {
                        file.read_exact(&mut d8)?;
                        shape.push(u64::from_le_bytes(d8) as usize);
                    }
                    let count: usize = shape.iter().product();
                    let mut data = Vec::with_capacity(count);
                    for _ in 0..count {
                        file.read_exact(&mut d8)?;
                        data.push(f64::from_le_bytes(d8));
                    }
                    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
                        return Err(ContainerError::Corrupt(format!(
                            "field `{name}` has invalid shape {shape:?}"
                        )));
                    }
                    Value::F64Array(Array::new(shape, data))
                }
                1 => {
                    let mut d8 = [0u8; 8];
                    file.read_exact(&mut d8)?;
                    Value::U64(u64::from_le_bytes(d8))
                }
                2 => {
                    let mut l4 = [0u8; 4];
                    file.read_exact(&mut l4)?;
                    let len = u32::from_le_bytes(l4) as usize;
                    let mut s = vec![0u8; len];
                    file.read_exact(&mut s)?;
                    Value::Str(
                        String::from_utf8(s)
                            .map_err(|_| ContainerError::Corrupt("string not UTF-8".into()))?,
                    )
                }
                k => return Err(ContainerError::Corrupt(format!("unknown field kind {k}"))),
            };
            fields.insert(name, value);
        }
        Ok(Container { fields })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_determinism() {
        let mut c = Container::new();
        c.put_str("kind", "test");
        c.put_u64("count", 42);
        c.put_array("m", Array::matrix(2, 3, vec![1.0, -2.5, 3e-9, 4.0, 5.0, 6.0]));
        c.put_vec("v", &[0.1, 0.2]);
        let f1 = tempfile::NamedTempFile::new().unwrap();
        let f2 = tempfile::NamedTempFile::new().unwrap();
        c.save(f1.path()).unwrap();
        c.save(f2.path()).unwrap();
        assert_eq!(
            std::fs::read(f1.path()).unwrap(),
            std::fs::read(f2.path()).unwrap()
        );
        let r = Container::load(f1.path()).unwrap();
        assert_eq!(r.str("kind").unwrap(), "test");
        assert_eq!(r.u64("count").unwrap(), 42);
        assert_eq!(r.array("m").unwrap().shape(), &[2, 3]);
        assert_eq!(r.array("m").unwrap().get2(1, 2), 6.0);
        assert_eq!(r.vec("v").unwrap(), vec![0.1, 0.2]);
    }

    #[test]
    fn version_gate() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"GPRC");
        bytes.extend_from_slice(&99u32.to_le_bytes());
        std::fs::write(f.path(), &bytes).unwrap();
        assert!(matches!(
            Container::load(f.path()),
            Err(ContainerError::UnsupportedVersion { found: 99, .. })
        ));

        std::fs::write(f.path(), b"NOPE....").unwrap();
        assert!(matches!(
            Container::load(f.path()),
            Err(ContainerError::BadMagic)
        ));
    }
}
