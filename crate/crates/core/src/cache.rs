//! Binary cache for p-Laplacian eigensystems.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic      8 bytes  "EPLAPCF\0"
//! version    u32
//! flags      u32      bit 0: descent converged
//! n          u64
//! K          u64
//! p          f64      IEEE-754 bits
//! digest     32 bytes SHA-256 of the source graph
//! F          n*K f64  row-major
//! lambda     K f64
//! checksum   32 bytes SHA-256 of every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::plap::PLapEigenSystem;

pub const MAGIC: &[u8; 8] = b"EPLAPCF\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 8 + 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct CachedSystem {
    pub system: PLapEigenSystem,
    pub graph_digest: [u8; 32],
    pub converged: bool,
}

/// File name for a `(graph, p, K)` triple.
pub fn cache_file_name(graph_digest: &[u8; 32], p: f64, k: usize) -> String {
    format!("plap-{}-p{}-k{k}.bin", &hex::encode(graph_digest)[..16], p)
}

pub fn encode(system: &PLapEigenSystem, graph_digest: &[u8; 32], converged: bool) -> Vec<u8> {
    let (n, k) = system.f.shape();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * (n * k + k) + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::from(converged).to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(k as u64).to_le_bytes());
    buf.extend_from_slice(&system.p.to_bits().to_le_bytes());
    buf.extend_from_slice(graph_digest);
    for i in 0..n {
        for j in 0..k {
            buf.extend_from_slice(&system.f[(i, j)].to_le_bytes());
        }
    }
    for v in system.lambda.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let checksum: [u8; 32] = Sha256::digest(&buf).into();
    buf.extend_from_slice(&checksum);
    buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<CachedSystem> {
    let fail = |message: String| Error::Cache {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN + 32 {
        return Err(fail(format!("truncated ({} bytes)", bytes.len())));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    let actual: [u8; 32] = Sha256::digest(body).into();
    if actual.as_slice() != checksum {
        return Err(fail("checksum mismatch".into()));
    }
    if &body[..8] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(body[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let converged = u32_at(12) & 1 == 1;
    let n = u64_at(16) as usize;
    let k = u64_at(24) as usize;
    let p = f64::from_bits(u64_at(32));
    let graph_digest: [u8; 32] = body[40..72].try_into().unwrap();
    let expected = HEADER_LEN + 8 * (n * k + k);
    if body.len() != expected {
        return Err(fail(format!("payload is {} bytes, header implies {expected}", body.len())));
    }
    let floats: Vec<f64> = body[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let f = DMatrix::from_row_slice(n, k, &floats[..n * k]);
    let lambda = DVector::from_column_slice(&floats[n * k..]);
    Ok(CachedSystem {
        system: PLapEigenSystem { f, lambda, p },
        graph_digest,
        converged,
    })
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write(path: &Path, system: &PLapEigenSystem, graph_digest: &[u8; 32], converged: bool) -> Result<()> {
    let bytes = encode(system, graph_digest, converged);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp: PathBuf = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("plap"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a cache file and checks it belongs to `graph_digest` with the given `p` and `K`.
pub fn load(path: &Path, graph_digest: &[u8; 32], p: f64, k: usize) -> Result<CachedSystem> {
    let bytes = fs::read(path)?;
    let cached = decode(&bytes, path)?;
    let fail = |message: String| Error::Cache {
        path: path.to_path_buf(),
        message,
    };
    if &cached.graph_digest != graph_digest {
        return Err(fail("graph digest mismatch".into()));
    }
    if cached.system.p.to_bits() != p.to_bits() || cached.system.f.ncols() != k {
        return Err(fail(format!(
            "holds p = {}, K = {}; wanted p = {p}, K = {k}",
            cached.system.p,
            cached.system.f.ncols()
        )));
    }
    Ok(cached)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn system(n: usize, k: usize, seed: f64) -> PLapEigenSystem {
        PLapEigenSystem {
            f: DMatrix::from_fn(n, k, |i, j| (i as f64 * 0.37 + j as f64 * seed).sin()),
            lambda: DVector::from_fn(k, |j, _| j as f64 * seed),
            p: 2.5,
        }
    }

    proptest! {
        #[test]
        fn roundtrip(n in 1usize..12, k in 1usize..6, seed in -3.0f64..3.0, converged in any::<bool>()) {
            let sys = system(n, k.min(n), seed);
            let digest = [7u8; 32];
            let bytes = encode(&sys, &digest, converged);
            let back = decode(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.system, sys);
            prop_assert_eq!(back.graph_digest, digest);
            prop_assert_eq!(back.converged, converged);
        }
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let sys = system(5, 3, 0.8);
        let bytes = encode(&sys, &[1u8; 32], true);
        for pos in [0, 9, 20, 40, 80, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(decode(&bad, Path::new("mem")).is_err(), "byte {pos}");
        }
        assert!(decode(&bytes[..50], Path::new("mem")).is_err());
    }

    #[test]
    fn load_checks_identity() {
        let dir = tempfile::tempdir().unwrap();
        let sys = system(4, 2, 1.1);
        let digest = [3u8; 32];
        let path = dir.path().join(cache_file_name(&digest, 2.5, 2));
        write(&path, &sys, &digest, true).unwrap();
        assert!(load(&path, &digest, 2.5, 2).is_ok());
        assert!(load(&path, &[4u8; 32], 2.5, 2).is_err());
        assert!(load(&path, &digest, 2.6, 2).is_err());
        assert!(load(&path, &digest, 2.5, 3).is_err());
    }
}
