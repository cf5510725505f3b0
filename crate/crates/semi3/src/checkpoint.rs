//! Checkpoint serialization.
//!
//! Layout: magic bytes `S3NET001`, a parameter count, then per parameter:
//! name length (u32 LE), name bytes, rank (u8), dims (u64 LE each), values
//! (f64 LE). A trailing name-to-group table restores the share-groups, and a
//! final length-prefixed text block carries the run configuration so a
//! checkpoint is self-describing. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{Group, Init, ParameterStore};

pub const MAGIC: &[u8; 8] = b"S3NET001";

pub fn write_store(store: &ParameterStore, config_text: &str, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(store.names().len() as u32).to_le_bytes())?;
    for name in store.names() {
        let value = store.value(name)?;
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = value.shape();
        w.write_all(&[shape.len() as u8])?;
        for &dim in shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let entries: usize = store.groups().iter().map(|g| g.members.len()).sum();
    w.write_all(&(entries as u32).to_le_bytes())?;
    for group in store.groups() {
        for member in &group.members {
            w.write_all(&(member.len() as u32).to_le_bytes())?;
            w.write_all(member.as_bytes())?;
            w.write_all(&(group.id.len() as u32).to_le_bytes())?;
            w.write_all(group.id.as_bytes())?;
        }
    }
    w.write_all(&(config_text.len() as u32).to_le_bytes())?;
    w.write_all(config_text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back into a store plus its embedded config text.
pub fn read_store(path: &Path) -> Result<(ParameterStore, String)> {
    let file = File::open(path)?;
    let mut r = Context {
        inner: BufReader::new(file),
        at: "header".to_string(),
    };

    let mut magic = [0u8; 8];
    r.fill(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }

    let count = r.u32()? as usize;
    let mut store = ParameterStore::new(0);
    for i in 0..count {
        r.at = format!("parameter #{i}");
        let name = r.string()?;
        r.at = format!("parameter `{name}`");
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.f64()?);
        }
        store.register(&name, &shape, Init::Zeros)?;
        store.set_value(&name, values)?;
    }

    r.at = "group table".to_string();
    let entries = r.u32()? as usize;
    let mut groups: Vec<Group> = Vec::new();
    for _ in 0..entries {
        let member = r.string()?;
        let group_id = r.string()?;
        match groups.iter_mut().find(|g| g.id == group_id) {
            Some(g) => g.members.push(member),
            None => groups.push(Group {
                id: group_id,
                members: vec![member],
            }),
        }
    }
    // Restore aliasing: every member shares the first member's slot.
    for group in &groups {
        let donor = group.members[0].clone();
        let donor_values = store.value(&donor)?.data().to_vec();
        for member in &group.members {
            // Shapes were validated at tie time before saving; re-check here.
            if store.shape(member)? != store.shape(&donor)? {
                return Err(Error::Format(format!(
                    "group `{}` ties `{member}` to `{donor}` with different shapes",
                    group.id
                )));
            }
        }
        for member in &group.members {
            store.set_value(member, donor_values.clone())?;
        }
        store.alias_members(group)?;
    }
    store.set_groups(groups);

    r.at = "config block".to_string();
    let config_len = r.u32()? as usize;
    let mut config = vec![0u8; config_len];
    r.fill(&mut config)?;
    let config_text = String::from_utf8(config)
        .map_err(|_| Error::Format("config block is not valid UTF-8".into()))?;
    Ok((store, config_text))
}

struct Context<R: Read> {
    inner: R,
    at: String,
}

impl<R: Read> Context<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            Error::Format(format!("truncated checkpoint while reading {}: {e}", self.at))
        })
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(Error::Format(format!(
                "implausible string length {len} while reading {}",
                self.at
            )));
        }
        let mut buf = vec![0u8; len];
        self.fill(&mut buf)?;
        String::from_utf8(buf)
            .map_err(|_| Error::Format(format!("non-UTF-8 name while reading {}", self.at)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{SharePlan, Strategy};

    fn sample_store() -> ParameterStore {
        let mut store = ParameterStore::new(42);
        store.register("sketch.c1.w", &[2, 3], Init::Gaussian(0.5)).unwrap();
        store.register("image.c1.w", &[2, 3], Init::Gaussian(0.5)).unwrap();
        store.register("edgemap.c1.w", &[2, 3], Init::Gaussian(0.5)).unwrap();
        store.register("sketch.fc.b", &[4], Init::Gaussian(1.0)).unwrap();
        store
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut store = sample_store();
        let plan = SharePlan {
            strategy: Strategy::SketchEdgemapOnly,
            groups: vec![Group {
                id: "SE-conv:c1.w".into(),
                members: vec!["sketch.c1.w".into(), "edgemap.c1.w".into()],
            }],
        };
        store.tie(&plan).unwrap();
        write_store(&store, "k = v\n", &path).unwrap();

        let (loaded, config) = read_store(&path).unwrap();
        assert_eq!(config, "k = v\n");
        assert_eq!(loaded.names(), store.names());
        for name in store.names() {
            assert_eq!(loaded.value(name).unwrap(), store.value(name).unwrap());
        }
        assert!(loaded.assert_tied(&plan).unwrap().all_identical());
        // aliasing survived, not just equal values
        assert_eq!(
            loaded.slot_of("sketch.c1.w").unwrap(),
            loaded.slot_of("edgemap.c1.w").unwrap()
        );

        // write -> read -> write reproduces the bytes exactly
        let path2 = dir.path().join("b.ckpt");
        write_store(&loaded, &config, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let store = sample_store();
        write_store(&store, "", &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..40]).unwrap(); // cut inside first record
        let err = read_store(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sketch.c1.w"), "got: {msg}");
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOTMAGIC-and-more").unwrap();
        assert!(read_store(&path).is_err());
    }
}
