//! Scratch probe: self-attention structure of a trained model.

use ndarray::Array2;
use promptedit_core::attention::AttentionKind;
use promptedit_core::denoiser::{Denoiser, DenoiserInput};
use promptedit_core::grid::to_latent;
use promptedit_core::rng::rng_from_seed;
use promptedit_core::sampler::forward_diffuse;
use promptedit_core::schedule::NoiseSchedule;
use promptedit_core::toy::scene::{Color, ObjectSize, Position, Shape};
use promptedit_core::toy::{
    train_toy_denoiser, train_toy_embedder, training_scenes, DenoiserTrainOpts, EmbedderTrainOpts,
    SceneSpec, ToyDenoiser, ToyDenoiserConfig, ToyEmbedderConfig, ToyJointEmbedder,
};
use promptedit_core::LatentGrid;

fn main() {
    let schedule = NoiseSchedule::<f32>::subsampled_linear_beta(1000, 8, 1.0).unwrap();
    let scenes = training_scenes(256, 900);
    let mut embedder = ToyJointEmbedder::<f32>::new(ToyEmbedderConfig::default(), 901).unwrap();
    train_toy_embedder(
        &mut embedder,
        &scenes,
        &EmbedderTrainOpts { epochs: 12, seed: 902, ..Default::default() },
    )
    .unwrap();
    let mut model = ToyDenoiser::<f32>::new(ToyDenoiserConfig::default(), 903).unwrap();
    train_toy_denoiser(
        &mut model,
        &embedder,
        &scenes,
        &schedule,
        &DenoiserTrainOpts { epochs: 40, image_dropout: 0.5, seed: 904, ..Default::default() },
    )
    .unwrap();

    let spec = SceneSpec {
        shape: Shape::Square,
        color: Color::Red,
        position: Position::Northwest,
        size: ObjectSize::Large,
        background: Color::White,
    };
    let img: LatentGrid<f32> = spec.render();
    let prompt = model.encode_prompt(&spec.describe()).unwrap();
    let obj = spec.object_mask();
    // 8x8 patch grid: patch (r,c) covers pixels 4r..4r+4 x 4c..4c+4. A patch
    // counts as object if most of its pixels are.
    let patch_is_obj: Vec<bool> = (0..64)
        .map(|p| {
            let (pr, pc) = (p / 8, p % 8);
            let mut n = 0;
            for r in 0..4 {
                for c in 0..4 {
                    if obj[[pr * 4 + r, pc * 4 + c]] {
                        n += 1;
                    }
                }
            }
            n >= 8
        })
        .collect();
    let n_obj = patch_is_obj.iter().filter(|b| **b).count();
    println!("object patches: {n_obj}/64");

    for t in [1usize, 2, 3, 4, 6] {
        let mut rng = rng_from_seed(7);
        let noise = LatentGrid::standard_normal(32, 32, 3, &mut rng);
        let zt = forward_diffuse(&to_latent(&img), t, &noise, &schedule).unwrap();
        let (_, bundle) = model
            .predict_noise(&DenoiserInput {
                latent: &zt,
                timestep: t,
                total_steps: 8,
                prompt: &prompt,
                image: None,
                injected: None,
            })
            .unwrap();
        let rec = &bundle.of_kind(AttentionKind::SelfAttention)[0];
        let w: &Array2<f32> = &rec.weights;
        // Mean attention mass from object rows to object columns vs expected
        // under uniform (n_obj/64), and same for background rows.
        let mut oo = 0.0f64;
        let mut bo = 0.0f64;
        let (mut no_rows, mut nb_rows) = (0usize, 0usize);
        for p in 0..64 {
            let mass: f64 = (0..64)
                .filter(|q| patch_is_obj[*q])
                .map(|q| w[[p, q]] as f64)
                .sum();
            if patch_is_obj[p] {
                oo += mass;
                no_rows += 1;
            } else {
                bo += mass;
                nb_rows += 1;
            }
        }
        println!(
            "t={t}: obj->obj mass {:.3} (uniform {:.3}), bg->obj mass {:.3}",
            oo / no_rows.max(1) as f64,
            n_obj as f64 / 64.0,
            bo / nb_rows.max(1) as f64
        );
    }
}
