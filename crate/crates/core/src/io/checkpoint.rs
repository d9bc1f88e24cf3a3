//! Little-endian binary snapshots of a particle system.

use std::fs;
use std::path::Path;

use crate::dynamics::ParticleSystem;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub system: ParticleSystem,
}

/// Layout: magic, `u32` version, `u64` step, `u32` m, `u32` d, `u8` has-second-layer,
/// then the `m × d` weights and optionally the `m` second-layer weights as `f64`.
pub fn write_checkpoint(path: &Path, step: usize, system: &ParticleSystem) -> Result<()> {
    let (m, d) = (system.m(), system.d());
    let b = system.second_layer();
    let mut buf = Vec::with_capacity(25 + 8 * (m * d + m));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(step as u64).to_le_bytes());
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.push(b.is_some() as u8);
    for v in system.weights().iter().chain(b.unwrap_or(&[])) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 25 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(bad("unsupported version"));
    }
    let step = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let (m, d) = (u32_at(16) as usize, u32_at(20) as usize);
    let has_b = bytes[24] == 1;
    let n = m * d + if has_b { m } else { 0 };
    if bytes.len() != 25 + 8 * n {
        return Err(bad("truncated"));
    }
    let vals: Vec<f64> = bytes[25..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (w, b) = vals.split_at(m * d);
    let system = ParticleSystem::new(d, w.to_vec(), has_b.then(|| b.to_vec()))?;
    Ok(Checkpoint { step, system })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SecondLayerSpec;

    #[test]
    fn round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for spec in [SecondLayerSpec::Ones, SecondLayerSpec::Signed { magnitude: 8.0 }] {
            let sys = ParticleSystem::init(5, 7, 3, &spec).unwrap();
            let p = dir.path().join("c.bin");
            write_checkpoint(&p, 42, &sys).unwrap();
            let back = read_checkpoint(&p).unwrap();
            assert_eq!(back.step, 42);
            assert_eq!(back.system, sys);
        }
        fs::write(dir.path().join("junk"), b"PCKPxx").unwrap();
        assert!(matches!(read_checkpoint(&dir.path().join("junk")), Err(Error::Format(_))));
    }
}
