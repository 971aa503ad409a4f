//! Noise-prediction training for the toy denoiser.
//!
//! Standard recipe: sample a scene, a timestep, and a Gaussian noise grid;
//! diffuse the clean latent to that timestep; regress the model's noise
//! prediction onto the true noise with mean squared error. Prompt and image
//! conditioning are randomly dropped so the model also learns an
//! unconditional mode (needed for classifier-free guidance).

use rand::seq::SliceRandom;
use rand::Rng;

use crate::denoiser::{Denoiser, PromptEncoding};
use crate::embedding::JointEmbedder;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::rng::rng_from_seed;
use crate::sampler::forward_diffuse;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::toy::denoiser::ToyDenoiser;
use crate::toy::embedder::{ToyJointEmbedder, TrainingStats};
use crate::grid::to_latent;
use crate::toy::scene::SceneSpec;
use crate::toy::nn::Adam;

/// Knobs for denoiser training.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserTrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing the prompt with the empty prompt.
    pub prompt_dropout: f64,
    /// Probability of dropping the image conditioning entirely.
    pub image_dropout: f64,
    /// Image-conditioning weight used while training.
    pub conditioning_weight: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainOpts {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            learning_rate: 2e-3,
            prompt_dropout: 0.1,
            image_dropout: 0.1,
            conditioning_weight: 1.0,
            seed: 0,
        }
    }
}

/// Train `model` on rendered `scenes` with a frozen `embedder` providing the
/// image-conditioning vectors. Returns the per-epoch loss curve.
pub fn train_toy_denoiser<S: Scalar>(
    model: &mut ToyDenoiser<S>,
    embedder: &ToyJointEmbedder<S>,
    scenes: &[SceneSpec],
    schedule: &NoiseSchedule<S>,
    opts: &DenoiserTrainOpts,
) -> Result<TrainingStats> {
    if scenes.is_empty() {
        return Err(Error::invalid("training needs at least one scene"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("need batch_size >= 1"));
    }
    if !(0.0..=1.0).contains(&opts.prompt_dropout) || !(0.0..=1.0).contains(&opts.image_dropout) {
        return Err(Error::invalid("dropout probabilities must lie in [0, 1]"));
    }
    let total_steps = schedule.num_steps();
    let cfg = *model.config();

    // Precompute everything that is constant across epochs. Prompt encodings
    // are *not* precomputed: they copy rows out of the token table, which the
    // optimizer updates, so they are re-encoded per sample below.
    let latents: Vec<LatentGrid<S>> = scenes.iter().map(|s| to_latent(&s.render())).collect();
    let texts: Vec<String> = scenes.iter().map(|s| s.describe()).collect();
    let joints: Vec<ndarray::Array1<S>> = scenes
        .iter()
        .map(|s| Ok(embedder.embed_image(&s.render())?.into_inner()))
        .collect::<Result<_>>()?;

    let mut rng = rng_from_seed(opts.seed);
    let mut opt = Adam::new(S::from_real(opts.learning_rate));
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let n_elems = S::from_real((cfg.height * cfg.width * cfg.channels) as f64);
    let lambda = S::from_real(opts.conditioning_weight);

    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut samples = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            model.zero_grad();
            let mut batch_loss = S::zero();
            for &idx in chunk {
                let t = rng.gen_range(1..=total_steps);
                let drop_prompt = rng.gen::<f64>() < opts.prompt_dropout;
                let drop_image = rng.gen::<f64>() < opts.image_dropout;
                let noise =
                    LatentGrid::standard_normal(cfg.height, cfg.width, cfg.channels, &mut rng);
                let zt = forward_diffuse(&latents[idx], t, &noise, schedule)?;
                let prompt: PromptEncoding<S> =
                    model.encode_prompt(if drop_prompt { "" } else { &texts[idx] })?;
                let image = if drop_image {
                    None
                } else {
                    Some((&joints[idx], lambda))
                };
                let (eps_hat, _, tape) = model.forward(&zt, t, total_steps, &prompt, image, None)?;

                // Mean-squared error over all latent elements.
                let mut loss = S::zero();
                let mut grad = eps_hat.data().clone();
                ndarray::Zip::from(&mut grad).and(noise.data()).for_each(|g, &n| {
                    let d = *g - n;
                    loss += d * d;
                    *g = (d + d) / n_elems;
                });
                loss /= n_elems;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        details: format!("loss became {loss} at timestep {t}"),
                    });
                }
                batch_loss += loss;
                model.backward(&tape, &prompt, &LatentGrid::new(grad)?);
            }
            model.scale_grads(S::one() / S::from_real(chunk.len() as f64));
            model.apply_adam(&mut opt);
            epoch_loss += batch_loss.to_real();
            samples += chunk.len() as f64;
        }
        epoch_losses.push(epoch_loss / samples);
    }
    Ok(TrainingStats { epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::corpus::training_scenes;
    use crate::toy::denoiser::ToyDenoiserConfig;
    use crate::toy::embedder::ToyEmbedderConfig;

    fn quick_opts(epochs: usize) -> DenoiserTrainOpts {
        DenoiserTrainOpts {
            epochs,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn loss_decreases_on_small_run() {
        let scenes = training_scenes(12, 3);
        let sched = NoiseSchedule::<f32>::subsampled_linear_beta(1000, 10, 1.0).unwrap();
        let embedder = ToyJointEmbedder::new(ToyEmbedderConfig::default(), 1).unwrap();
        let mut model = ToyDenoiser::new(ToyDenoiserConfig::default(), 2).unwrap();
        let stats =
            train_toy_denoiser(&mut model, &embedder, &scenes, &sched, &quick_opts(8)).unwrap();
        assert!(
            stats.final_loss().unwrap() < stats.initial_loss().unwrap(),
            "loss went from {:?} to {:?}",
            stats.initial_loss(),
            stats.final_loss()
        );
    }

    #[test]
    fn zero_epochs_leaves_the_model_untouched() {
        let scenes = training_scenes(4, 5);
        let sched = NoiseSchedule::<f32>::subsampled_linear_beta(1000, 10, 1.0).unwrap();
        let embedder = ToyJointEmbedder::new(ToyEmbedderConfig::default(), 1).unwrap();
        let mut model = ToyDenoiser::new(ToyDenoiserConfig::default(), 7).unwrap();
        let before = model.tensors();
        let stats =
            train_toy_denoiser(&mut model, &embedder, &scenes, &sched, &quick_opts(0)).unwrap();
        assert!(stats.epoch_losses.is_empty());
        assert!(stats.final_loss().is_none());
        for ((name_a, a), (name_b, b)) in before.iter().zip(model.tensors().iter()) {
            assert_eq!(name_a, name_b);
            assert_eq!(a, b, "tensor {name_a} changed during a zero-epoch run");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let scenes = training_scenes(8, 4);
        let sched = NoiseSchedule::<f32>::subsampled_linear_beta(1000, 10, 1.0).unwrap();
        let embedder = ToyJointEmbedder::new(ToyEmbedderConfig::default(), 1).unwrap();
        let run = || {
            let mut model = ToyDenoiser::new(ToyDenoiserConfig::default(), 9).unwrap();
            train_toy_denoiser(&mut model, &embedder, &scenes, &sched, &quick_opts(2)).unwrap();
            model
        };
        let a = run();
        let b = run();
        for ((na, ta), (nb, tb)) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "tensor {na} differs between identical runs");
        }
    }
}
