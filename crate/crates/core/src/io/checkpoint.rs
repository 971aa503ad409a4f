//! Versioned binary checkpoints for the toy models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PEck" | format version u32 | dtype u32 (scalar byte width)
//! kind string  | meta count u32 | (key string, value u32)*
//! tensor count u32 | (name string, ndim u32, dims u32*, data scalar*)*
//! ```
//!
//! Tensors are stored at the scalar's native precision; loading into a
//! different precision is refused rather than silently cast, which keeps
//! runs bit-reproducible across save/load.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::io::wire::{
    dtype_of, read_scalars, read_string, read_u32, write_scalars, write_string, write_u32,
};
use crate::scalar::Scalar;
use crate::toy::denoiser::ToyDenoiser;
use crate::toy::embedder::ToyJointEmbedder;

const MAGIC: &[u8; 4] = b"PEck";
const FORMAT_VERSION: u32 = 1;

/// Kind tag for denoiser checkpoints.
pub const DENOISER_KIND: &str = "toy-denoiser";
/// Kind tag for embedder checkpoints.
pub const EMBEDDER_KIND: &str = "joint-embedder";

/// In-memory form of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub kind: String,
    pub meta: Vec<(String, u32)>,
    pub tensors: Vec<(String, ArrayD<S>)>,
}

/// Write a checkpoint.
pub fn save_checkpoint<S: Scalar>(path: &Path, checkpoint: &Checkpoint<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    use std::io::Write;
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, dtype_of::<S>())?;
    write_string(&mut w, &checkpoint.kind)?;
    write_u32(&mut w, checkpoint.meta.len() as u32)?;
    for (k, v) in &checkpoint.meta {
        write_string(&mut w, k)?;
        write_u32(&mut w, *v)?;
    }
    write_u32(&mut w, checkpoint.tensors.len() as u32)?;
    for (name, tensor) in &checkpoint.tensors {
        write_string(&mut w, name)?;
        write_u32(&mut w, tensor.ndim() as u32)?;
        for d in tensor.shape() {
            write_u32(&mut w, *d as u32)?;
        }
        // Row-major iteration; tensors are stored contiguously.
        write_scalars(&mut w, tensor.iter())?;
    }
    Ok(())
}

/// Read a checkpoint, checking magic, version, and scalar precision.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let mut r = BufReader::new(File::open(path)?);
    use std::io::Read;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let dtype = read_u32(&mut r)?;
    if dtype != dtype_of::<S>() {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {dtype}-byte scalars but a {}-byte load was requested",
            dtype_of::<S>()
        )));
    }
    let kind = read_string(&mut r)?;
    let meta_count = read_u32(&mut r)? as usize;
    let mut meta = Vec::with_capacity(meta_count);
    for _ in 0..meta_count {
        let k = read_string(&mut r)?;
        let v = read_u32(&mut r)?;
        meta.push((k, v));
    }
    let tensor_count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = read_string(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 4 {
            return Err(Error::Checkpoint(format!("tensor {name} has {ndim} dims")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut r)? as usize);
        }
        let count: usize = dims.iter().product();
        if count > 1 << 28 {
            return Err(Error::Checkpoint(format!("tensor {name} is unreasonably large")));
        }
        let data = read_scalars::<S>(&mut r, count)?;
        let tensor = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|_| Error::Checkpoint(format!("tensor {name} shape/data mismatch")))?;
        tensors.push((name, tensor));
    }
    Ok(Checkpoint { kind, meta, tensors })
}

/// Save a trained denoiser.
pub fn save_denoiser<S: Scalar>(path: &Path, model: &ToyDenoiser<S>) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint {
            kind: DENOISER_KIND.to_string(),
            meta: model.meta(),
            tensors: model.tensors(),
        },
    )
}

/// Load a denoiser saved with [`save_denoiser`].
pub fn load_denoiser<S: Scalar>(path: &Path) -> Result<ToyDenoiser<S>> {
    let ckpt = load_checkpoint::<S>(path)?;
    if ckpt.kind != DENOISER_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {DENOISER_KIND} checkpoint, found {}",
            ckpt.kind
        )));
    }
    let cfg = ToyDenoiser::<S>::config_from_meta(&ckpt.meta)?;
    let mut model = ToyDenoiser::new(cfg, 0)?;
    model.load_tensors(&ckpt.tensors)?;
    Ok(model)
}

/// Save a trained embedder.
pub fn save_embedder<S: Scalar>(path: &Path, model: &ToyJointEmbedder<S>) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint {
            kind: EMBEDDER_KIND.to_string(),
            meta: model.meta(),
            tensors: model.tensors(),
        },
    )
}

/// Load an embedder saved with [`save_embedder`].
pub fn load_embedder<S: Scalar>(path: &Path) -> Result<ToyJointEmbedder<S>> {
    let ckpt = load_checkpoint::<S>(path)?;
    if ckpt.kind != EMBEDDER_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {EMBEDDER_KIND} checkpoint, found {}",
            ckpt.kind
        )));
    }
    let cfg = ToyJointEmbedder::<S>::config_from_meta(&ckpt.meta)?;
    let mut model = ToyJointEmbedder::new(cfg, 0)?;
    model.load_tensors(&ckpt.tensors)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Denoiser;
    use crate::embedding::JointEmbedder;
    use crate::grid::LatentGrid;
    use crate::rng::rng_from_seed;
    use crate::toy::denoiser::ToyDenoiserConfig;
    use crate::toy::embedder::ToyEmbedderConfig;

    #[test]
    fn denoiser_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = ToyDenoiser::<f32>::new(ToyDenoiserConfig::default(), 3).unwrap();
        save_denoiser(&path, &model).unwrap();
        let loaded = load_denoiser::<f32>(&path).unwrap();

        let mut rng = rng_from_seed(8);
        let z = LatentGrid::standard_normal(32, 32, 3, &mut rng);
        let prompt = model.encode_prompt("a small red square in the center").unwrap();
        let (a, _) = model.predict_noise(&crate::denoiser::DenoiserInput {
            latent: &z,
            timestep: 5,
            total_steps: 10,
            prompt: &prompt,
            image: None,
            injected: None,
        }).unwrap();
        let prompt2 = loaded.encode_prompt("a small red square in the center").unwrap();
        let (b, _) = loaded.predict_noise(&crate::denoiser::DenoiserInput {
            latent: &z,
            timestep: 5,
            total_steps: 10,
            prompt: &prompt2,
            image: None,
            injected: None,
        }).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn embedder_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embed.ckpt");
        let model = ToyJointEmbedder::<f32>::new(ToyEmbedderConfig::default(), 4).unwrap();
        save_embedder(&path, &model).unwrap();
        let loaded = load_embedder::<f32>(&path).unwrap();
        let scene = crate::toy::SceneSpec::random(&mut rng_from_seed(2));
        let img = scene.render();
        assert_eq!(
            model.embed_image(&img).unwrap().values(),
            loaded.embed_image(&img).unwrap().values()
        );
        assert_eq!(
            model.embed_text(&scene.describe()).unwrap().values(),
            loaded.embed_text(&scene.describe()).unwrap().values()
        );
    }

    #[test]
    fn kind_and_precision_mismatches_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embed.ckpt");
        let model = ToyJointEmbedder::<f32>::new(ToyEmbedderConfig::default(), 4).unwrap();
        save_embedder(&path, &model).unwrap();
        assert!(load_denoiser::<f32>(&path).is_err());
        assert!(load_embedder::<f64>(&path).is_err());
        let missing = dir.path().join("nope.ckpt");
        assert!(load_embedder::<f32>(&missing).is_err());
    }

    #[test]
    fn junk_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
