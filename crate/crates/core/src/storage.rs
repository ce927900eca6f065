//! Blob encoding and atomic directory writes shared by the dataset and
//! model containers.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// Encodes values as consecutive little-endian `f32`.
pub fn encode_f32_le(values: impl IntoIterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn decode_f32_le(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Populates a fresh sibling temporary directory with `fill`, then renames it
/// onto `target`, replacing any previous directory there. A failure inside
/// `fill` leaves `target` untouched.
pub fn write_dir_atomically<E>(
    target: &Path,
    fill: impl FnOnce(&Path) -> Result<(), E>,
) -> Result<(), E>
where
    E: From<io::Error>,
{
    let tmp = temp_sibling(target)?;
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if target.exists() {
        fs::remove_dir_all(target)?;
    }
    fs::rename(&tmp, target)?;
    Ok(())
}

/// Writes a single file through a temporary sibling and a rename.
pub fn write_file_atomically(target: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = temp_sibling(target)?;
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, target)
}

fn temp_sibling(target: &Path) -> io::Result<PathBuf> {
    let name = target
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    Ok(parent.join(format!(".{name}.tmp-{}", std::process::id())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_roundtrip() {
        let mut buf = Vec::new();
        encode_f32_le([1.0, -2.5, 3e7], &mut buf);
        assert_eq!(buf.len(), 12);
        assert_eq!(decode_f32_le(&buf), vec![1.0, -2.5, 3e7]);
    }

    #[test]
    fn failed_fill_leaves_target_alone() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out");
        fs::create_dir(&target).unwrap();
        fs::write(target.join("keep"), b"x").unwrap();
        let r: Result<(), io::Error> = write_dir_atomically(&target, |tmp| {
            fs::write(tmp.join("partial"), b"y")?;
            Err(io::Error::new(io::ErrorKind::Other, "interrupted"))
        });
        assert!(r.is_err());
        assert!(target.join("keep").exists());
        assert!(!target.join("partial").exists());
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn successful_fill_replaces_target() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out");
        fs::create_dir(&target).unwrap();
        fs::write(target.join("old"), b"x").unwrap();
        write_dir_atomically::<io::Error>(&target, |tmp| fs::write(tmp.join("new"), b"y")).unwrap();
        assert!(target.join("new").exists());
        assert!(!target.join("old").exists());
    }
}
