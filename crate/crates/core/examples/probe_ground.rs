//! Scratch probe: grounding quality vs training recipe.

use ndarray::Array2;
use promptedit_core::engine::{ground_once, Hyperparams, PromptSpec};
use promptedit_core::grounding::{EditMask, GroundingStrategy};
use promptedit_core::metrics::grounding_iou;
use promptedit_core::rng::rng_from_seed;
use promptedit_core::schedule::NoiseSchedule;
use promptedit_core::toy::{
    train_toy_denoiser, train_toy_embedder, training_scenes, DenoiserTrainOpts, EditCase,
    EditKind, EmbedderTrainOpts, SceneSpec, ToyDenoiser, ToyDenoiserConfig, ToyEmbedderConfig,
    ToyJointEmbedder,
};

fn main() {
    let schedule = NoiseSchedule::<f32>::subsampled_linear_beta(1000, 8, 1.0).unwrap();
    for (n_scenes, image_dropout, prompt_dropout) in
        [(64usize, 0.5f64, 0.1f64), (128, 0.5, 0.1), (128, 0.8, 0.1), (256, 0.5, 0.1)]
    {
        let scenes = training_scenes(n_scenes, 900);
        let mut embedder = ToyJointEmbedder::<f32>::new(ToyEmbedderConfig::default(), 901).unwrap();
        train_toy_embedder(
            &mut embedder,
            &scenes,
            &EmbedderTrainOpts { epochs: 12, seed: 902, ..Default::default() },
        )
        .unwrap();
        let mut model = ToyDenoiser::<f32>::new(ToyDenoiserConfig::default(), 903).unwrap();
        let stats = train_toy_denoiser(
            &mut model,
            &embedder,
            &scenes,
            &schedule,
            &DenoiserTrainOpts {
                epochs: 40,
                image_dropout,
                prompt_dropout,
                seed: 904,
                ..Default::default()
            },
        )
        .unwrap();
        println!(
            "== scenes {n_scenes} img_drop {image_dropout} (loss {:.4})",
            stats.final_loss().unwrap_or(f64::NAN)
        );
        for t in [1usize, 2, 3, 4] {
            for strat in [GroundingStrategy::Refined, GroundingStrategy::CrossAttentionOnly] {
                let hyper = Hyperparams { guidance_scale: 2.0, grounding: strat, ..Default::default() };
                let mut ious = Vec::new();
                let (mut inside, mut outside) = (0.0f64, 0.0f64);
                for s in 0..12u64 {
                    let case = EditCase::random(
                        SceneSpec::random(&mut rng_from_seed(60 + s)),
                        EditKind::ChangeColor,
                        &mut rng_from_seed(160 + s),
                    );
                    let prompts = PromptSpec::derived(case.source_prompt(), case.target_prompt());
                    let (sal, mask) = ground_once(
                        &case.source.render::<f32>(),
                        &prompts,
                        &model,
                        &embedder,
                        &schedule,
                        &hyper,
                        t,
                        7 + s,
                    )
                    .unwrap();
                    let truth = EditMask {
                        variance: Array2::from_elem((32, 32), false),
                        blend: case.ground_truth_mask(),
                    };
                    ious.push(grounding_iou(&mask, &truth).unwrap());
                    let (mut si, mut ni, mut so, mut no) = (0.0f64, 0usize, 0.0f64, 0usize);
                    for r in 0..32 {
                        for c in 0..32 {
                            let v = sal[[r, c]] as f64;
                            if truth.blend[[r, c]] { si += v; ni += 1; } else { so += v; no += 1; }
                        }
                    }
                    inside += si / ni.max(1) as f64;
                    outside += so / no.max(1) as f64;
                }
                let mean = ious.iter().sum::<f64>() / ious.len() as f64;
                println!(
                    "  t={t} {strat:?}: mean IoU {mean:.3}  sal in/out {:.3}/{:.3}",
                    inside / 12.0,
                    outside / 12.0
                );
            }
        }
    }
}
