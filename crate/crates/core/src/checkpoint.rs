//! Named-parameter model state: task-vector arithmetic and a little-endian
//! binary file format.
//!
//! Layout: magic `MSLD`, version u32, meta count u32 then (key len u32, key,
//! value len u32, value) per entry, param count u32 then (name len u32, name,
//! rows u64, cols u64, rows*cols f64) per parameter. No padding. Entry order
//! is insertion order and survives a save/load round trip byte-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAGIC: [u8; 4] = *b"MSLD";
const VERSION: u32 = 1;

/// Ordered map of parameter name -> matrix, plus free-form string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: IndexMap<String, Matrix>,
    meta: IndexMap<String, String>,
}

/// Per-parameter delta between a checkpoint and its base. Same structure as
/// a checkpoint, kept as its own type so deltas and absolute weights cannot
/// be mixed up.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskVector {
    entries: IndexMap<String, Matrix>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    /// Insert or replace a parameter; insertion order is preserved.
    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.entries.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|v| v.as_str())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta_iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.meta.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Identical name sets and per-name shapes.
    pub fn check_compatible(&self, other: &Checkpoint) -> Result<()> {
        check_compatible_maps(&self.entries, &other.entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, m) in &self.entries {
            write_str(&mut w, name)?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for &x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }

        let mut meta = IndexMap::new();
        let meta_count = read_u32(&mut r, "meta count")?;
        for _ in 0..meta_count {
            let key = read_string(&mut r, "meta key")?;
            let value = read_string(&mut r, "meta value")?;
            meta.insert(key, value);
        }

        let mut entries = IndexMap::new();
        let param_count = read_u32(&mut r, "param count")?;
        for _ in 0..param_count {
            let name = read_string(&mut r, "param name")?;
            let rows = read_u64(&mut r, "rows")? as usize;
            let cols = read_u64(&mut r, "cols")? as usize;
            let mut data = vec![0.0f64; rows * cols];
            for x in &mut data {
                *x = read_f64(&mut r, "param data")?;
            }
            entries.insert(name, Matrix::from_vec(rows, cols, data));
        }

        Ok(Checkpoint { entries, meta })
    }
}

impl TaskVector {
    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.entries.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn check_compatible(&self, base: &Checkpoint) -> Result<()> {
        check_compatible_maps(&self.entries, &base.entries)
    }

    /// Frobenius norm of the whole delta, all parameters concatenated.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for m in self.entries.values() {
            for v in m.data() {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&self, s: f64) -> TaskVector {
        TaskVector {
            entries: self
                .entries
                .iter()
                .map(|(k, m)| (k.clone(), m.scale(s)))
                .collect(),
        }
    }

    /// Wrap as a checkpoint (e.g. for serialization).
    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            entries: self.entries,
            meta: IndexMap::new(),
        }
    }

    /// Reinterpret checkpoint entries as a delta; metadata is dropped.
    pub fn from_checkpoint(c: Checkpoint) -> TaskVector {
        TaskVector { entries: c.entries }
    }
}

/// `theta - base`, per parameter.
pub fn task_vector(theta: &Checkpoint, base: &Checkpoint) -> Result<TaskVector> {
    theta.check_compatible(base)?;
    let mut entries = IndexMap::new();
    for (name, t) in &theta.entries {
        let b = &base.entries[name];
        entries.insert(name.clone(), t.sub(b)?);
    }
    Ok(TaskVector { entries })
}

/// `base + scale * delta`, per parameter.
pub fn apply_delta(base: &Checkpoint, delta: &TaskVector, scale: f64) -> Result<Checkpoint> {
    delta.check_compatible(base)?;
    let mut out = Checkpoint::new();
    for (name, b) in &base.entries {
        let d = &delta.entries[name];
        out.insert(name.clone(), b.add_scaled(d, scale)?);
    }
    Ok(out)
}

fn check_compatible_maps(a: &IndexMap<String, Matrix>, b: &IndexMap<String, Matrix>) -> Result<()> {
    for (name, ma) in a {
        match b.get(name) {
            None => {
                return Err(Error::Incompatible {
                    name: name.clone(),
                    detail: "missing from the other checkpoint".into(),
                })
            }
            Some(mb) if ma.shape() != mb.shape() => {
                return Err(Error::Incompatible {
                    name: name.clone(),
                    detail: format!(
                        "shape {}x{} vs {}x{}",
                        ma.rows(),
                        ma.cols(),
                        mb.rows(),
                        mb.cols()
                    ),
                });
            }
            _ => {}
        }
    }
    if let Some(name) = b.keys().find(|k| !a.contains_key(*k)) {
        return Err(Error::Incompatible {
            name: name.clone(),
            detail: "missing from the first checkpoint".into(),
        });
    }
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what)
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, what: &'static str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read, what: &'static str) -> Result<f64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read, what: &'static str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Truncated(what))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, rows: &[Vec<f64>]) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(name, Matrix::from_rows(rows));
        c
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(99);
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn task_vector_of_base_is_zero() {
        let base = single("w", &[vec![1.5, -2.0], vec![0.25, 7.0]]);
        let tv = task_vector(&base, &base).unwrap();
        assert!(tv.get("w").unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn task_vector_single_param() {
        let theta = single("w", &[vec![2.0, 3.0]]);
        let base = single("w", &[vec![1.0, 1.0]]);
        let tv = task_vector(&theta, &base).unwrap();
        assert_eq!(tv.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn apply_then_recover_is_exact_on_materialized_weights() {
        // theta is produced as base + delta, which is how every checkpoint
        // in this pipeline comes to exist; the recovery is then float-exact.
        let mut next = lcg(5);
        let mut base = Checkpoint::new();
        let mut delta = TaskVector::default();
        for p in 0..4 {
            base.insert(
                format!("p{p}"),
                Matrix::from_vec(3, 3, (0..9).map(|_| next()).collect()),
            );
            delta.insert(
                format!("p{p}"),
                Matrix::from_vec(3, 3, (0..9).map(|_| next() * 0.05).collect()),
            );
        }
        let theta = apply_delta(&base, &delta, 1.0).unwrap();
        let recovered = task_vector(&theta, &base).unwrap();
        let back = apply_delta(&base, &recovered, 1.0).unwrap();
        for (name, m) in back.iter() {
            assert_eq!(m.data(), theta.get(name).unwrap().data(), "param {name}");
        }
    }

    #[test]
    fn apply_delta_scale_zero_returns_base() {
        let base = single("w", &[vec![1.0, -2.5]]);
        let mut delta = TaskVector::default();
        delta.insert("w", Matrix::from_rows(&[vec![10.0, 20.0]]));
        let out = apply_delta(&base, &delta, 0.0).unwrap();
        assert_eq!(out.get("w").unwrap().data(), base.get("w").unwrap().data());
    }

    #[test]
    fn apply_delta_inverse_scale() {
        let base = single("w", &[vec![1.0, 1.0]]);
        let mut delta = TaskVector::default();
        delta.insert("w", Matrix::from_rows(&[vec![2.0, 4.0]]));
        let out = apply_delta(&base, &delta, 0.5).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn incompatible_names_reported() {
        let a = single("w", &[vec![1.0]]);
        let b = single("v", &[vec![1.0]]);
        let err = task_vector(&a, &b).unwrap_err();
        assert!(matches!(err, Error::Incompatible { .. }), "{err}");
    }

    #[test]
    fn incompatible_shape_reported_with_name() {
        let a = single("w", &[vec![1.0, 2.0]]);
        let b = single("w", &[vec![1.0], vec![2.0]]);
        let err = task_vector(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('w') && msg.contains("1x2"), "{msg}");
    }

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.msld");
        let mut next = lcg(11);
        let mut c = Checkpoint::new();
        c.set_meta("task_id", "3");
        c.set_meta("epochs", "10");
        c.insert("zeta", Matrix::from_vec(2, 5, (0..10).map(|_| next()).collect()));
        c.insert("alpha", Matrix::from_vec(4, 1, (0..4).map(|_| next()).collect()));
        c.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        // insertion order preserved, not alphabetized
        let names: Vec<&str> = back.names().collect();
        assert_eq!(names, vec!["zeta", "alpha"]);
        for (name, m) in c.iter() {
            let b = back.get(name).unwrap();
            for (x, y) in m.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.msld");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.msld");
        let mut bytes = b"MSLD".to_vec();
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion(9)), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.msld");
        let mut c = Checkpoint::new();
        c.insert("w", Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]));
        c.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");
    }

    #[test]
    fn thousand_param_resave_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.msld");
        let p2 = dir.path().join("b.msld");
        let mut next = lcg(2024);
        let mut c = Checkpoint::new();
        for i in 0..1000 {
            c.insert(format!("param_{i:04}"), Matrix::from_vec(2, 3, (0..6).map(|_| next()).collect()));
        }
        c.save(&p1).unwrap();
        let back = Checkpoint::load(&p1).unwrap();
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
