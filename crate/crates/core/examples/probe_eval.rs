//! Scratch probe: per-edit-type grounding IoU and mask sizes.

use promptedit_core::engine::{edit, EditSession, Hyperparams, PromptSpec};
use promptedit_core::grounding::{EditMask, GroundingStrategy};
use promptedit_core::metrics::grounding_iou;
use promptedit_core::schedule::NoiseSchedule;
use promptedit_core::toy::{
    item_seed, train_toy_denoiser, train_toy_embedder, training_scenes, Corpus,
    DenoiserTrainOpts, EditKind, EmbedderTrainOpts, ToyDenoiser, ToyDenoiserConfig,
    ToyEmbedderConfig, ToyJointEmbedder,
};
use ndarray::Array2;

fn main() {
    let schedule = NoiseSchedule::<f32>::subsampled_linear_beta(1000, 8, 1.0).unwrap();
    for (n_scenes, epochs) in [(256usize, 80usize), (512, 120)] {
        let scenes = training_scenes(n_scenes, 900);
        let mut embedder = ToyJointEmbedder::<f32>::new(ToyEmbedderConfig::default(), 901).unwrap();
        train_toy_embedder(
            &mut embedder,
            &scenes,
            &EmbedderTrainOpts { epochs: 20, seed: 902, ..Default::default() },
        )
        .unwrap();
        let mut model = ToyDenoiser::<f32>::new(ToyDenoiserConfig::default(), 903).unwrap();
        train_toy_denoiser(
            &mut model,
            &embedder,
            &scenes,
            &schedule,
            &DenoiserTrainOpts { epochs, image_dropout: 0.5, seed: 904, ..Default::default() },
        )
        .unwrap();
        println!("== scenes {n_scenes} epochs {epochs}");
        let corpus = Corpus::generate(48, 400);
        for strat in [GroundingStrategy::Refined, GroundingStrategy::CrossAttentionOnly] {
            let hyper = Hyperparams { guidance_scale: 2.0, grounding: strat, ..Default::default() };
            // (iou_sum, frac_sum, count) per kind
            let mut per: std::collections::BTreeMap<&str, (f64, f64, usize)> = Default::default();
            for item in &corpus.items {
                let session = EditSession::new(
                    item.case.source.render::<f32>(),
                    PromptSpec::derived(item.case.source_prompt(), item.case.target_prompt()),
                    schedule.clone(),
                    hyper.clone(),
                    item_seed(5, item.id),
                )
                .unwrap();
                let out = edit(&session, &model, &embedder).unwrap();
                let mask = out.final_mask().unwrap();
                let truth = EditMask {
                    variance: Array2::from_elem((32, 32), false),
                    blend: item.case.ground_truth_mask(),
                };
                let iou = grounding_iou(mask, &truth).unwrap();
                let kind = match item.case.kind {
                    EditKind::ChangeColor => "color",
                    EditKind::ChangeShape => "shape",
                    EditKind::ChangeBackground => "bg",
                };
                let e = per.entry(kind).or_default();
                e.0 += iou;
                e.1 += mask.blend_fraction();
                e.2 += 1;
            }
            print!("  {strat:?}:");
            for (k, (iou, frac, n)) in &per {
                print!("  {k}: IoU {:.3} frac {:.2} (n={n})", iou / *n as f64, frac / *n as f64);
            }
            println!();
        }
    }
}
