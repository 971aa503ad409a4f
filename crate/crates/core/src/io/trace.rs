//! Binary persistence for noise traces.
//!
//! A trace file stores the initial latent and every per-step noise grid of
//! one sampling run, so a reconstruction or edit can be replayed later:
//!
//! ```text
//! magic "PEtr" | format version u32 | dtype u32 (scalar byte width)
//! steps u32 | height u32 | width u32 | channels u32 | seed u64
//! initial grid | noise grid for step 1 .. steps   (row-major scalars)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::io::wire::{dtype_of, read_scalars, read_u32, read_u64, write_scalars, write_u32, write_u64};
use crate::sampler::NoiseTrace;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"PEtr";
const FORMAT_VERSION: u32 = 1;

/// Write a trace to `path`.
pub fn save_trace<S: Scalar>(path: &Path, trace: &NoiseTrace<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (h, wdt, c) = trace.shape();
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, dtype_of::<S>())?;
    write_u32(&mut w, trace.num_steps() as u32)?;
    write_u32(&mut w, h as u32)?;
    write_u32(&mut w, wdt as u32)?;
    write_u32(&mut w, c as u32)?;
    write_u64(&mut w, trace.seed())?;
    write_scalars(&mut w, trace.initial().data().iter())?;
    for t in 1..=trace.num_steps() {
        write_scalars(&mut w, trace.noise(t).data().iter())?;
    }
    Ok(())
}

/// Read a trace written by [`save_trace`] at the same scalar precision.
pub fn load_trace<S: Scalar>(path: &Path) -> Result<NoiseTrace<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a trace file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "trace format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let dtype = read_u32(&mut r)?;
    if dtype != dtype_of::<S>() {
        return Err(Error::Checkpoint(format!(
            "trace stores {dtype}-byte scalars but a {}-byte load was requested",
            dtype_of::<S>()
        )));
    }
    let steps = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    if steps == 0 || h == 0 || w == 0 || c == 0 || h * w * c > 1 << 28 {
        return Err(Error::Checkpoint("trace header has implausible dimensions".into()));
    }
    let mut read_grid = |ctx: &str| -> Result<LatentGrid<S>> {
        let data = read_scalars::<S>(&mut r, h * w * c)?;
        let arr = Array3::from_shape_vec((h, w, c), data)
            .map_err(|_| Error::Checkpoint(format!("trace {ctx} data truncated")))?;
        LatentGrid::new(arr)
    };
    let initial = read_grid("initial latent")?;
    let mut noises = Vec::with_capacity(steps);
    for t in 1..=steps {
        noises.push(read_grid(&format!("step {t} noise"))?);
    }
    NoiseTrace::new(initial, noises, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.trace");
        let trace = NoiseTrace::<f32>::from_seed(8, 8, 2, 6, 12345).unwrap();
        save_trace(&path, &trace).unwrap();
        let loaded = load_trace::<f32>(&path).unwrap();
        assert_eq!(loaded.seed(), 12345);
        assert_eq!(loaded.num_steps(), 6);
        assert_eq!(loaded.initial().data(), trace.initial().data());
        for t in 1..=6 {
            assert_eq!(loaded.noise(t).data(), trace.noise(t).data());
        }
    }

    #[test]
    fn f64_round_trip_preserves_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run64.trace");
        let mut rng = rng_from_seed(3);
        let initial = LatentGrid::<f64>::standard_normal(4, 4, 1, &mut rng);
        let noises = (0..3)
            .map(|_| LatentGrid::<f64>::standard_normal(4, 4, 1, &mut rng))
            .collect();
        let trace = NoiseTrace::new(initial, noises, 7).unwrap();
        save_trace(&path, &trace).unwrap();
        let loaded = load_trace::<f64>(&path).unwrap();
        assert_eq!(loaded.initial().data(), trace.initial().data());
        // Loading at the wrong precision is refused.
        assert!(load_trace::<f32>(&path).is_err());
    }

    #[test]
    fn junk_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.trace");
        std::fs::write(&path, b"nope").unwrap();
        assert!(load_trace::<f32>(&path).is_err());
    }
}
