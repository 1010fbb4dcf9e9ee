//! Versioned binary snapshots for the trajectory and the synthetic
//! dataset, plus the CSV report writers.

use std::io::{Read, Write};
use std::path::Path;

use crate::detection::SyntheticDataset;
use crate::error::{Error, Result};
use crate::fl::{ModelVector, Trajectory};

const TRAJECTORY_MAGIC: &[u8; 4] = b"SFTJ";
const DSYN_MAGIC: &[u8; 4] = b"SFDS";
const VERSION: u32 = 1;

fn write_u32<W: Write>(out: &mut W, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(out: &mut W, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        input.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

fn check_magic<R: Read>(input: &mut R, expect: &[u8; 4], what: &str) -> Result<()> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != expect {
        return Err(Error::CorruptSnapshot(format!("{}: bad magic", what)));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::CorruptSnapshot(format!(
            "{}: unsupported version {}",
            what, version
        )));
    }
    Ok(())
}

/// Writes a trajectory snapshot: model dimension, trajectory length, the
/// master seed, then the models in round order (little-endian doubles).
pub fn write_trajectory<W: Write>(out: &mut W, trajectory: &Trajectory, seed: u64) -> Result<()> {
    out.write_all(TRAJECTORY_MAGIC)?;
    write_u32(out, VERSION)?;
    write_u64(out, trajectory.dim() as u64)?;
    write_u64(out, trajectory.len() as u64)?;
    write_u64(out, seed)?;
    for model in trajectory.models() {
        write_f64s(out, model.as_slice())?;
    }
    Ok(())
}

pub fn read_trajectory<R: Read>(input: &mut R) -> Result<(Trajectory, u64)> {
    check_magic(input, TRAJECTORY_MAGIC, "trajectory")?;
    let dim = read_u64(input)? as usize;
    let count = read_u64(input)? as usize;
    let seed = read_u64(input)?;
    if dim == 0 || count == 0 {
        return Err(Error::CorruptSnapshot("trajectory: empty".into()));
    }
    let mut models = Vec::with_capacity(count);
    for _ in 0..count {
        let params = read_f64s(input, dim)?;
        models.push(ModelVector::from_vec(params));
    }
    Ok((Trajectory::from_models(models)?, seed))
}

/// Writes a synthetic-dataset snapshot: row count, feature count, class
/// count, then the features and raw label logits.
pub fn write_dsyn<W: Write>(out: &mut W, dsyn: &SyntheticDataset) -> Result<()> {
    out.write_all(DSYN_MAGIC)?;
    write_u32(out, VERSION)?;
    write_u64(out, dsyn.size as u64)?;
    write_u64(out, dsyn.features as u64)?;
    write_u64(out, dsyn.classes as u64)?;
    write_f64s(out, &dsyn.x)?;
    write_f64s(out, &dsyn.y)?;
    Ok(())
}

pub fn read_dsyn<R: Read>(input: &mut R) -> Result<SyntheticDataset> {
    check_magic(input, DSYN_MAGIC, "synthetic dataset")?;
    let size = read_u64(input)? as usize;
    let features = read_u64(input)? as usize;
    let classes = read_u64(input)? as usize;
    let x = read_f64s(input, size * features)?;
    let y = read_f64s(input, size * classes)?;
    SyntheticDataset::new(x, y, size, features, classes)
}

pub fn save_trajectory(path: &Path, trajectory: &Trajectory, seed: u64) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    write_trajectory(&mut file, trajectory, seed)
}

pub fn load_trajectory(path: &Path) -> Result<(Trajectory, u64)> {
    let mut file = std::fs::File::open(path)?;
    read_trajectory(&mut file)
}

pub fn save_dsyn(path: &Path, dsyn: &SyntheticDataset) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    write_dsyn(&mut file, dsyn)
}

pub fn load_dsyn(path: &Path) -> Result<SyntheticDataset> {
    let mut file = std::fs::File::open(path)?;
    read_dsyn(&mut file)
}

/// `iter,objective` CSV of the distillation objective log.
pub fn write_syngen_log<W: Write>(out: &mut W, log: &[f64]) -> Result<()> {
    writeln!(out, "iter,objective")?;
    for (i, v) in log.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, v)?;
    }
    Ok(())
}

/// Formats an optional metric, using the NA convention for undefined rates.
pub fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "NA".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_snapshot_round_trips() {
        let models = vec![
            ModelVector::from_vec(vec![1.0, -2.5, 3.25]),
            ModelVector::from_vec(vec![0.5, 0.125, -9.0]),
        ];
        let trajectory = Trajectory::from_models(models).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &trajectory, 77).unwrap();
        let (back, seed) = read_trajectory(&mut buf.as_slice()).unwrap();
        assert_eq!(back, trajectory);
        assert_eq!(seed, 77);
    }

    #[test]
    fn dsyn_snapshot_round_trips() {
        let dsyn = SyntheticDataset::new(
            vec![0.1, 0.2, 0.3, 0.4],
            vec![1.0, -1.0, 2.0, -2.0],
            2,
            2,
            2,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_dsyn(&mut buf, &dsyn).unwrap();
        let back = read_dsyn(&mut buf.as_slice()).unwrap();
        assert_eq!(back, dsyn);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut buf = b"XXXX\x01\x00\x00\x00".to_vec();
        assert!(read_trajectory(&mut buf.as_slice()).is_err());
        buf.clear();
        buf.extend_from_slice(TRAJECTORY_MAGIC);
        buf.extend_from_slice(&9u32.to_le_bytes());
        assert!(read_trajectory(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn syngen_log_layout() {
        let mut buf = Vec::new();
        write_syngen_log(&mut buf, &[2.5, 1.25]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iter,objective\n1,2.5\n2,1.25\n"
        );
    }
}
