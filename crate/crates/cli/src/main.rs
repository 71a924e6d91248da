mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use vidtta_core::container::{write_pgm, write_tensors, NamedTensor};
use vidtta_core::engine::{
    motion_intensities, plan_step, EngineError, NoiseSample, NoiseSchedule, TtaEngine,
};
use vidtta_core::masking::{apply_mask_to_latent, rasterize_plan, LatentGrid, MaskPlan, PatchGrid};
use vidtta_core::models::{LatentCodec, ParamStore, VidTtaModel};
use vidtta_core::scene::export_scene;
use vidtta_core::selfcheck;
use vidtta_core::weighting::global_text_feature;

use crate::config::{load_scene, RunConfig};

#[derive(Parser)]
#[command(name = "vidtta", version, about = "Test-time adaptation lab for text-guided video denoisers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt the model to one clip and write the report and artifacts.
    Adapt {
        /// `synthetic:<spec.json>` or an exported manifest.json.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the mask plans and graymaps for one adaptation step.
    Masks {
        #[arg(long)]
        scene: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
    /// Run the built-in oracle checks.
    Selfcheck,
    /// Render a synthetic scene spec to graymaps and a manifest.
    ExportScene {
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Adapt {
            scene,
            prompt,
            config,
            out,
        } => adapt(&scene, &prompt, &config, &out),
        Command::Masks {
            scene,
            config,
            out,
            step,
        } => masks(&scene, config.as_deref(), &out, step),
        Command::Selfcheck => run_selfcheck(),
        Command::ExportScene { spec, out } => {
            let scene = load_scene(&format!("synthetic:{spec}"))?;
            let path = export_scene(&scene, &out)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_masks(dir: &Path, grid: &PatchGrid, plans: &[MaskPlan]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for plan in plans {
        let img = rasterize_plan(plan, grid);
        write_pgm(
            &dir.join(format!("frame_{:04}.pgm", plan.frame_index)),
            grid.frame_width,
            grid.frame_height,
            &img,
        )?;
    }
    Ok(())
}

fn latent_tensor(name: &str, z: &LatentGrid) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        shape: z.dims().to_vec(),
        data: z.data.iter().map(|&v| v as f32).collect(),
    }
}

/// Reconstruction of the masked latent and noise prediction on a fixed
/// probe sample, under the given model.
fn latent_outputs(model: &VidTtaModel, masked: &LatentGrid, probe: &NoiseSample, text: &[f64]) -> Result<Vec<NamedTensor>> {
    Ok(vec![
        latent_tensor("reconstruction", &model.reconstruct(masked, text)?),
        latent_tensor("noise_prediction", &model.denoise(&probe.noisy, probe.timestep, text)?),
    ])
}

fn write_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    Ok(write_tensors(path, &params.to_named_tensors())?)
}

fn adapt(scene_arg: &str, prompt: &str, config_path: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(Some(config_path))?;
    let scene = load_scene(scene_arg)?;
    let instance = cfg.instance(&scene)?;
    let vocab = cfg.vocabulary()?;
    let rules = cfg.augmentation_rules(&vocab)?;
    let model = VidTtaModel::new(cfg.model_config(&vocab)?)?;
    let mut engine = TtaEngine::new(model, cfg.adaptation.clone(), cfg.grid, vocab, rules)?;

    fs::create_dir_all(out)?;
    let base = engine.model().clone();
    let prep = engine.prepare(&instance, prompt)?;
    let text = global_text_feature(&base.encode_text(&prep.prompt_ids)?)?;
    let probe = NoiseSample::draw(&prep.latent, 500, &NoiseSchedule::default(), cfg.adaptation.seed);

    let result = engine.adapt(&instance, prompt);
    let (report, wall, adapted) = match result {
        Ok(o) => (o.report, Some(o.wall_time_secs), Some(o.parameters)),
        Err(EngineError::Diverged { report, .. }) => (*report, None, None),
        Err(EngineError::Core(e)) => return Err(e.into()),
    };
    fs::write(out.join("report.json"), report.to_json()?)?;
    write_json(&out.join("timing.json"), &json!({ "wall_time_secs": wall }))?;

    let first_plans = engine.plan_history().first().cloned().unwrap_or_default();
    let masks_dir = out.join("masks");
    write_masks(&masks_dir, &prep.grid, &first_plans)?;
    write_json(&masks_dir.join("plans.json"), &engine.plan_history())?;

    let latents = out.join("latents");
    fs::create_dir_all(&latents)?;
    let masked = apply_mask_to_latent(&prep.latent, &first_plans, &prep.grid)?;
    let mut before = vec![latent_tensor("latent", &prep.latent), latent_tensor("masked", &masked)];
    before.extend(latent_outputs(&base, &masked, &probe, &text)?);
    write_tensors(&latents.join("before.bin"), &before)?;

    let checkpoints = out.join("checkpoints");
    fs::create_dir_all(&checkpoints)?;
    write_checkpoint(&checkpoints.join("base.bin"), &base.params)?;

    let Some(adapted) = adapted else {
        bail!(
            "adaptation diverged at step {}; parameters restored, partial report in {}",
            report.diverged_at.unwrap_or(0),
            out.join("report.json").display()
        );
    };
    let adapted_model = VidTtaModel {
        config: base.config.clone(),
        params: adapted,
    };
    write_tensors(&latents.join("after.bin"), &latent_outputs(&adapted_model, &masked, &probe, &text)?)?;
    write_checkpoint(&checkpoints.join("adapted.bin"), &adapted_model.params)?;

    let (first, last) = (&report.initial_eval, report.final_eval.as_ref().expect("completed run"));
    println!(
        "{} steps, L_total {:.6} -> {:.6}, weights {:.4?}",
        report.steps.len(),
        first.l_total,
        last.l_total,
        last.weights
    );
    Ok(())
}

fn masks(scene_arg: &str, config_path: Option<&Path>, out: &Path, step: u64) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let scene = load_scene(scene_arg)?;
    let instance = cfg.instance(&scene)?;
    let v = &instance.video;
    let grid = PatchGrid::new(
        v.width,
        v.height,
        cfg.grid.patch_width,
        cfg.grid.patch_height,
        cfg.grid.latent_stride,
    )?;
    // the codec stride must divide the frame as it does during adaptation
    LatentCodec::new(grid.latent_stride)?.encode(v)?;
    let intensities = motion_intensities(&instance, &grid)?;
    let a = &cfg.adaptation;
    let plans = plan_step(&grid, &intensities, &instance.detections, (a.r_f, a.r_b), a.seed, step)?;
    fs::create_dir_all(out)?;
    write_masks(out, &grid, &plans)?;
    write_json(&out.join("plans.json"), &plans)?;
    let masked: usize = plans.iter().map(|p| p.foreground_ids.len() + p.background_ids.len()).sum();
    println!("{} frames, {masked} patches masked", plans.len());
    Ok(())
}

fn run_selfcheck() -> Result<()> {
    let results = selfcheck::run_all();
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} check(s) failed");
    }
    Ok(())
}
