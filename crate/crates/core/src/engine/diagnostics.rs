//! On-disk diagnostics for an edit run: per-step saliency heatmaps and mask
//! PNGs, the final images, and a JSON manifest tying them together.

use std::path::Path;
use std::time::Duration;

use serde_json::json;

use crate::error::{Error, Result};
use crate::io::png::{save_heatmap, save_image, save_mask};
use crate::scalar::Scalar;

use super::{EditOutcome, EditSession, StepDiagnostics};

/// Manifest layout version.
const SCHEMA_VERSION: u32 = 1;

/// Write the full diagnostics bundle into `dir` (created if missing).
///
/// `outcome` is `None` when the run aborted; the steps completed so far are
/// still written and `error` lands in the manifest so a crashed run leaves
/// an inspectable trail.
pub(super) fn write_report<S: Scalar>(
    dir: &Path,
    session: &EditSession<S>,
    steps: &[StepDiagnostics<S>],
    outcome: Option<&EditOutcome<S>>,
    error: Option<&Error>,
    elapsed: Duration,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut step_rows = Vec::with_capacity(steps.len());
    for step in steps {
        let t = step.timestep;
        save_heatmap(&dir.join(format!("step_{t:03}_saliency.png")), &step.saliency)?;
        save_mask(&dir.join(format!("step_{t:03}_blend_mask.png")), &step.mask.blend)?;
        save_mask(
            &dir.join(format!("step_{t:03}_variance_mask.png")),
            &step.mask.variance,
        )?;
        step_rows.push(json!({
            "timestep": t,
            "sigma_fraction": step.sigma_fraction,
            "blend_fraction": step.mask.blend_fraction(),
            "variance_fraction": step.mask.variance_fraction(),
            "injected_cross": step.injected_cross,
            "injected_self": step.injected_self,
        }));
    }

    if let Some(out) = outcome {
        if out.edited.channels() == 3 {
            save_image(&dir.join("edited.png"), &out.edited)?;
            save_image(&dir.join("reconstruction.png"), &out.reconstruction)?;
        }
    }

    let manifest = json!({
        "schema_version": SCHEMA_VERSION,
        "seed": session.seed,
        "prompts": serde_json::to_value(&session.prompts).map_err(to_invalid)?,
        "hyperparams": serde_json::to_value(session.hyperparams).map_err(to_invalid)?,
        "schedule_steps": session.schedule.num_steps(),
        "variance_magnitude": session.schedule.variance_magnitude().to_real(),
        "completed_steps": steps.len(),
        "steps": step_rows,
        "error": error.map(|e| e.to_string()),
        "timings": { "total_ms": elapsed.as_millis() as u64 },
    });
    let path = dir.join("manifest.json");
    let file = std::fs::File::create(&path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest).map_err(to_invalid)?;
    Ok(())
}

fn to_invalid(e: serde_json::Error) -> Error {
    Error::invalid(format!("serializing diagnostics manifest: {e}"))
}

#[cfg(test)]
mod tests {
    use super::super::{EditMask, Hyperparams, PromptSpec};
    use super::*;
    use crate::grid::LatentGrid;
    use crate::schedule::NoiseSchedule;
    use ndarray::Array2;

    fn tiny_session() -> EditSession<f32> {
        EditSession {
            source_image: LatentGrid::zeros(4, 4, 3),
            prompts: PromptSpec::derived("a red square", "a blue square"),
            schedule: NoiseSchedule::linear_beta(3, 1.0).unwrap(),
            hyperparams: Hyperparams::default(),
            seed: 42,
        }
    }

    fn fake_step(t: usize) -> StepDiagnostics<f32> {
        StepDiagnostics {
            timestep: t,
            saliency: Array2::from_elem((4, 4), 0.5),
            mask: EditMask {
                blend: Array2::from_elem((4, 4), t % 2 == 0),
                variance: Array2::from_elem((4, 4), false),
            },
            sigma_fraction: 0.25,
            injected_cross: true,
            injected_self: false,
        }
    }

    #[test]
    fn report_writes_manifest_and_step_files() {
        let dir = tempfile::tempdir().unwrap();
        let session = tiny_session();
        let steps = vec![fake_step(3), fake_step(2), fake_step(1)];
        write_report(dir.path(), &session, &steps, None, None, Duration::from_millis(7)).unwrap();

        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["schema_version"], 1);
        assert_eq!(manifest["seed"], 42);
        assert_eq!(manifest["completed_steps"], 3);
        assert_eq!(manifest["steps"].as_array().unwrap().len(), 3);
        assert_eq!(manifest["steps"][0]["timestep"], 3);
        assert!(manifest["error"].is_null());
        assert_eq!(manifest["hyperparams"]["variance_mode"], "adaptive");
        for t in 1..=3 {
            assert!(dir.path().join(format!("step_{t:03}_saliency.png")).exists());
            assert!(dir.path().join(format!("step_{t:03}_blend_mask.png")).exists());
            assert!(dir.path().join(format!("step_{t:03}_variance_mask.png")).exists());
        }
        // No outcome: no final images.
        assert!(!dir.path().join("edited.png").exists());
    }

    #[test]
    fn report_records_errors_and_partial_steps() {
        let dir = tempfile::tempdir().unwrap();
        let session = tiny_session();
        let steps = vec![fake_step(3)];
        let err = Error::NumericDomain {
            timestep: 2,
            details: "went non-finite".into(),
        };
        write_report(dir.path(), &session, &steps, None, Some(&err), Duration::ZERO).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["completed_steps"], 1);
        let msg = manifest["error"].as_str().unwrap();
        assert!(msg.contains("timestep 2"), "error message was {msg:?}");
    }
}
