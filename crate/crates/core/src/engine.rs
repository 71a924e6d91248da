//! Per-instance test-time adaptation.
//!
//! Every step draws a fresh set of mask plans, augmented-and-masked prompts
//! and a noise sample from seeded streams, builds the three losses on a
//! tape, weights them with the feature-conditioned weight network and takes
//! one Adam step over the trainable parameters.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{shape, validation, Error, Result};
use crate::flow::{patch_motion_intensity, BoundingBox, Detector, FlowEstimator, FlowField};
use crate::masking::{apply_mask_to_latent, masked_cells, plan_frame, LatentGrid, MaskPlan, PatchGrid};
use crate::models::{bind, LatentCodec, ModelConfig, ParamStore, VidTtaModel};
use crate::prompt::{augment_prompt, mask_tokens, words, Augmentation, AugmentationRules, MaskedPrompt, Vocabulary};
use crate::scene::{SyntheticScene, Video};
use crate::seed::{derive_seed, Stream};
use crate::tape::{Tape, Tensor};
use crate::weighting::{global_video_feature, total_on_tape, weights_on_tape, LossBundle};

pub const SCHEDULE_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiMode {
    /// Weight network and projector train with the denoiser.
    Joint,
    /// Weight network and projector stay at initialisation.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub r_f: f64,
    pub r_b: f64,
    pub n_augment: usize,
    pub mask_ratio_text: f64,
    pub lambda_video: f64,
    pub lambda_text: f64,
    pub timestep_min: usize,
    pub timestep_max: usize,
    pub seed: u64,
    pub psi_mode: PsiMode,
    pub episodic_reset: bool,
    /// Parameter-name prefixes to adapt; empty adapts everything.
    pub trainable: Vec<String>,
    /// Minimum weight per loss term; 0 disables the floor.
    pub weight_floor: f64,
    /// Fixed draws averaged for the before/after evaluation.
    pub eval_draws: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            r_f: 0.75,
            r_b: 0.2,
            n_augment: 3,
            mask_ratio_text: 0.30,
            lambda_video: 0.1,
            lambda_text: 0.1,
            timestep_min: 1,
            timestep_max: SCHEDULE_STEPS,
            seed: 0,
            psi_mode: PsiMode::Joint,
            episodic_reset: true,
            trainable: Vec::new(),
            weight_floor: 0.0,
            eval_draws: 4,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(validation("steps must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(validation("learning_rate must be positive"));
        }
        for (name, r) in [
            ("r_f", self.r_f),
            ("r_b", self.r_b),
            ("mask_ratio_text", self.mask_ratio_text),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(validation(format!("{name} = {r} is outside [0, 1]")));
            }
        }
        if self.lambda_video < 0.0 || self.lambda_text < 0.0 {
            return Err(validation("scale factors must be non-negative"));
        }
        if self.timestep_min < 1 || self.timestep_min > self.timestep_max || self.timestep_max > SCHEDULE_STEPS {
            return Err(validation(format!(
                "timestep range [{}, {}] must lie within [1, {SCHEDULE_STEPS}]",
                self.timestep_min, self.timestep_max
            )));
        }
        if !(0.0..1.0 / 3.0).contains(&self.weight_floor) {
            return Err(validation("weight_floor must lie in [0, 1/3)"));
        }
        if self.eval_draws == 0 {
            return Err(validation("eval_draws must be at least 1"));
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        if self.psi_mode == PsiMode::Frozen && name.starts_with("weighting.") {
            return false;
        }
        self.trainable.is_empty() || self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub patch_width: usize,
    pub patch_height: usize,
    pub latent_stride: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            patch_width: 16,
            patch_height: 16,
            latent_stride: 8,
        }
    }
}

/// Linear beta schedule over [`SCHEDULE_STEPS`] steps, 1e-4 to 0.02.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(SCHEDULE_STEPS, 1e-4, 0.02)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut prod = 1.0;
        let alpha_bar = (0..steps)
            .map(|i| {
                let beta = if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                };
                prod *= 1.0 - beta;
                prod
            })
            .collect();
        Self { alpha_bar }
    }

    /// Cumulative signal fraction at timestep `t` in `1..=steps`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
}

/// Inputs of the noise-prediction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub timestep: usize,
    pub noise: LatentGrid,
    pub noisy: LatentGrid,
}

impl NoiseSample {
    pub fn draw(z: &LatentGrid, timestep: usize, schedule: &NoiseSchedule, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = (0..z.data.len()).map(|_| rng.sample(StandardNormal)).collect();
        Self::from_noise(z, timestep, schedule, eps)
    }

    pub fn from_noise(z: &LatentGrid, timestep: usize, schedule: &NoiseSchedule, eps: Vec<f64>) -> Self {
        let ab = schedule.alpha_bar(timestep);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let noisy = z.data.iter().zip(&eps).map(|(x, e)| a * x + b * e).collect();
        let [f, c, h, w] = z.dims();
        Self {
            timestep,
            noise: LatentGrid::from_vec(f, c, h, w, eps).expect("same dims"),
            noisy: LatentGrid::from_vec(f, c, h, w, noisy).expect("same dims"),
        }
    }
}

/// Mean squared error between predicted and injected noise.
pub fn noise_prediction_loss(
    model: &VidTtaModel,
    text_feature: &[f64],
    sample: &NoiseSample,
) -> Result<f64> {
    if sample.noise.dims() != sample.noisy.dims() {
        return Err(shape("noise and noised latent differ in shape"));
    }
    let pred = model.denoise(&sample.noisy, sample.timestep, text_feature)?;
    let n = pred.data.len() as f64;
    Ok(pred
        .data
        .iter()
        .zip(&sample.noise.data)
        .map(|(p, e)| (p - e) * (p - e))
        .sum::<f64>()
        / n)
}

/// A clip together with what the detector and flow estimator reported.
#[derive(Debug, Clone)]
pub struct VideoInstance {
    pub video: Video,
    /// `flows[t]` maps frame `t` to `t + 1`.
    pub flows: Vec<FlowField>,
    pub detections: Vec<Option<BoundingBox>>,
}

impl VideoInstance {
    pub fn from_scene(scene: &SyntheticScene) -> Self {
        Self {
            video: scene.frames.clone(),
            flows: scene.flows.clone(),
            detections: scene.boxes.iter().copied().map(Some).collect(),
        }
    }

    pub fn from_plugins(video: Video, detector: &dyn Detector, flow: &dyn FlowEstimator) -> Result<Self> {
        let detections = (0..video.num_frames)
            .map(|t| detector.detect(&video, t))
            .collect::<Result<Vec<_>>>()?;
        let flows = (0..video.num_frames.saturating_sub(1))
            .map(|t| flow.estimate(&video, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            video,
            flows,
            detections,
        })
    }
}

/// Everything about an instance that stays fixed across steps.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub grid: PatchGrid,
    pub latent: LatentGrid,
    pub intensities: Vec<Vec<f64>>,
    pub detections: Vec<Option<BoundingBox>>,
    pub prompt: String,
    pub prompt_ids: Vec<usize>,
    pub max_len: usize,
    pub video_feature: Vec<f64>,
}

/// Per-frame patch motion intensities. Frame `t` uses the flow leaving it;
/// the last frame reuses the flow that enters it.
pub fn motion_intensities(instance: &VideoInstance, grid: &PatchGrid) -> Result<Vec<Vec<f64>>> {
    let v = &instance.video;
    let zero = FlowField::zeros(v.width, v.height);
    (0..v.num_frames)
        .map(|t| {
            let flow = instance.flows.get(t).or(instance.flows.last()).unwrap_or(&zero);
            patch_motion_intensity(flow, grid)
        })
        .collect()
}

pub fn prepare_instance(
    instance: &VideoInstance,
    prompt: &str,
    grid_config: &GridConfig,
    vocab: &Vocabulary,
    model_config: &ModelConfig,
) -> Result<PreparedInstance> {
    let v = &instance.video;
    let prompt_ids = vocab.tokenize(prompt);
    if prompt_ids.is_empty() {
        return Err(validation("prompt is empty"));
    }
    if prompt_ids.len() > model_config.max_len {
        return Err(validation(format!(
            "prompt has {} tokens, the text encoder accepts {}",
            prompt_ids.len(),
            model_config.max_len
        )));
    }
    if v.num_frames == 0 {
        return Err(validation("video has no frames"));
    }
    if v.channels != model_config.latent_channels {
        return Err(shape(format!(
            "video has {} channels, model expects {}",
            v.channels, model_config.latent_channels
        )));
    }
    if instance.detections.len() != v.num_frames {
        return Err(shape(format!(
            "{} detections for {} frames",
            instance.detections.len(),
            v.num_frames
        )));
    }
    let grid = PatchGrid::new(
        v.width,
        v.height,
        grid_config.patch_width,
        grid_config.patch_height,
        grid_config.latent_stride,
    )?;
    let latent = LatentCodec::new(grid.latent_stride)?.encode(v)?;
    let intensities = motion_intensities(instance, &grid)?;
    let video_feature = global_video_feature(&latent)?;
    Ok(PreparedInstance {
        grid,
        latent,
        intensities,
        detections: instance.detections.clone(),
        prompt: words(prompt).collect::<Vec<_>>().join(" "),
        prompt_ids,
        max_len: model_config.max_len,
        video_feature,
    })
}

/// The random material consumed by one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraw {
    pub plans: Vec<MaskPlan>,
    pub augmentations: Vec<Augmentation>,
    pub masked_prompts: Vec<MaskedPrompt>,
    pub noise: NoiseSample,
}

/// Seed for the background selection of frame `t` at `step`.
pub fn mask_seed(base: u64, step: u64, frame: usize) -> u64 {
    derive_seed(base, Stream::BackgroundMask, step, frame as u64)
}

/// Mask plans for every frame at one step.
pub fn plan_step(
    grid: &PatchGrid,
    intensities: &[Vec<f64>],
    detections: &[Option<BoundingBox>],
    ratios: (f64, f64),
    base_seed: u64,
    step: u64,
) -> Result<Vec<MaskPlan>> {
    if intensities.len() != detections.len() {
        return Err(shape("one intensity vector and one detection per frame"));
    }
    (0..intensities.len())
        .map(|t| {
            plan_frame(
                grid,
                t,
                &intensities[t],
                detections[t].as_ref(),
                ratios,
                mask_seed(base_seed, step, t),
            )
        })
        .collect()
}

pub fn draw_step(
    prep: &PreparedInstance,
    config: &AdaptationConfig,
    rules: &AugmentationRules,
    vocab: &Vocabulary,
    base_seed: u64,
    step: u64,
) -> Result<StepDraw> {
    let plans = plan_step(
        &prep.grid,
        &prep.intensities,
        &prep.detections,
        (config.r_f, config.r_b),
        base_seed,
        step,
    )?;

    let augmentations = augment_prompt(
        &prep.prompt,
        rules,
        config.n_augment,
        derive_seed(base_seed, Stream::PromptAugment, step, 0),
    );
    let masked_prompts = augmentations
        .iter()
        .enumerate()
        .map(|(i, aug)| {
            let mut ids = vocab.tokenize(&aug.text);
            ids.truncate(prep.max_len);
            mask_tokens(
                &ids,
                config.mask_ratio_text,
                derive_seed(base_seed, Stream::PromptMask, step, i as u64),
                vocab,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let noise_seed = derive_seed(base_seed, Stream::Noise, step, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let timestep = rng.random_range(config.timestep_min..=config.timestep_max);
    let noise = NoiseSample::draw(&prep.latent, timestep, &NoiseSchedule::default(), rng.random());

    Ok(StepDraw {
        plans,
        augmentations,
        masked_prompts,
        noise,
    })
}

/// Fixed draws used to score the parameters before and after adaptation.
pub fn evaluation_draws(
    prep: &PreparedInstance,
    config: &AdaptationConfig,
    rules: &AugmentationRules,
    vocab: &Vocabulary,
) -> Result<Vec<StepDraw>> {
    (0..config.eval_draws)
        .map(|k| {
            let base = derive_seed(config.seed, Stream::Evaluation, k as u64, 0);
            draw_step(prep, config, rules, vocab, base, 0)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub bundle: LossBundle,
    pub total: f64,
    /// Gradients of the total per trainable parameter.
    pub grads: Option<BTreeMap<String, Vec<f64>>>,
}

/// Builds the three losses and their weighted total for one draw.
/// `trainable` selects the parameters that receive gradients; `None` runs
/// forward only.
pub fn evaluate_objective(
    model: &VidTtaModel,
    prep: &PreparedInstance,
    draw: &StepDraw,
    config: &AdaptationConfig,
    trainable: Option<&dyn Fn(&str) -> bool>,
) -> Result<ObjectiveOutput> {
    model.check_finite()?;
    let mut tape = Tape::new();
    let p = bind(&mut tape, &model.params, |n| trainable.is_some_and(|f| f(n)));

    let hidden = model.text_hidden(&mut tape, &p, &prep.prompt_ids)?;
    let text_feature = tape.mean_rows(hidden);

    // noise prediction
    let z = &prep.latent;
    let dims = z.dims().to_vec();
    let noisy = tape.constant(Tensor::new(dims.clone(), draw.noise.noisy.data.clone()));
    let eps_hat = model.denoiser_forward(&mut tape, &p, noisy, draw.noise.timestep, text_feature);
    let l_noise = tape.mse(eps_hat, &draw.noise.noise.data);

    // masked latent reconstruction
    let masked = apply_mask_to_latent(z, &draw.plans, &prep.grid)?;
    let flags = masked_cells(z, &draw.plans, &prep.grid)?;
    let masked = tape.constant(Tensor::new(dims, masked.data));
    let recon = model.reconstruct_on(&mut tape, &p, masked, text_feature);
    let l_video = tape.masked_mse(recon, &z.data, &flags);

    // masked prompt reconstruction, averaged over augmented prompts
    let l_prompt = if draw.masked_prompts.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let mut terms = Vec::with_capacity(draw.masked_prompts.len());
        for mp in &draw.masked_prompts {
            let h = model.text_hidden(&mut tape, &p, &mp.masked)?;
            let rows = tape.gather_rows(h, &mp.positions);
            let logits = model.prompt_logits(&mut tape, &p, rows);
            terms.push(tape.cross_entropy_rows(logits, &mp.targets));
        }
        let stacked = tape.stack(&terms);
        tape.mean(stacked)
    };

    let weights = weights_on_tape(&mut tape, &p, &prep.video_feature, text_feature, config.weight_floor);
    let total = total_on_tape(
        &mut tape,
        weights,
        [l_noise, l_video, l_prompt],
        config.lambda_video,
        config.lambda_text,
    );

    let w = &tape.value(weights).data;
    let bundle = LossBundle {
        l_noise: tape.value(l_noise).item(),
        l_video: tape.value(l_video).item(),
        l_prompt: tape.value(l_prompt).item(),
        weights: [w[0], w[1], w[2]],
        lambda_video: config.lambda_video,
        lambda_text: config.lambda_text,
    };
    let total_value = tape.value(total).item();
    let grads = trainable.map(|f| {
        let g = tape.backward(total);
        p.iter()
            .filter(|(name, _)| f(name))
            .map(|(name, &v)| (name.clone(), g.get_or_zeros(v)))
            .collect()
    });
    Ok(ObjectiveOutput {
        bundle,
        total: total_value,
        grads,
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let Some(t) = params.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                t.data[i] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

/// Exact copy of the parameters with its checksum.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    pub params: ParamStore,
    pub checksum: String,
}

impl ParamSnapshot {
    pub fn of(params: &ParamStore) -> Self {
        Self {
            params: params.clone(),
            checksum: params.checksum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub timestep: usize,
    pub l_noise: f64,
    pub l_video: f64,
    pub l_prompt: f64,
    pub weights: [f64; 3],
    pub l_total: f64,
    pub grad_norm: f64,
    pub augment_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub l_noise: f64,
    pub l_video: f64,
    pub l_prompt: f64,
    pub weights: [f64; 3],
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub adaptation: u64,
    pub model_init: u64,
}

/// Deterministic record of an adaptation run. Wall-clock time is reported
/// separately so that identical runs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub prompt: String,
    pub config: AdaptationConfig,
    pub model: ModelConfig,
    pub grid: PatchGrid,
    pub seeds: SeedRecord,
    pub trainable_values: usize,
    pub initial_checksum: String,
    pub final_checksum: String,
    pub initial_eval: EvalRecord,
    pub final_eval: Option<EvalRecord>,
    pub steps: Vec<StepRecord>,
    pub diverged_at: Option<usize>,
}

impl AdaptationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("non-finite objective at step {step}; parameters restored")]
    Diverged {
        step: usize,
        report: Box<AdaptationReport>,
    },
}

#[derive(Debug, Clone)]
pub struct AdaptationOutcome {
    pub parameters: ParamStore,
    pub report: AdaptationReport,
    pub wall_time_secs: f64,
}

/// Owns the model and adapts it to one instance at a time.
pub struct TtaEngine {
    model: VidTtaModel,
    config: AdaptationConfig,
    grid_config: GridConfig,
    vocab: Vocabulary,
    rules: AugmentationRules,
    base: ParamSnapshot,
    plan_history: Vec<Vec<MaskPlan>>,
}

impl TtaEngine {
    pub fn new(
        model: VidTtaModel,
        config: AdaptationConfig,
        grid_config: GridConfig,
        vocab: Vocabulary,
        rules: AugmentationRules,
    ) -> Result<Self> {
        config.validate()?;
        if model.config.vocab_size != vocab.len() {
            return Err(validation(format!(
                "model vocabulary of {} does not match {} tokens",
                model.config.vocab_size,
                vocab.len()
            )));
        }
        model.check_finite()?;
        let base = ParamSnapshot::of(&model.params);
        Ok(Self {
            model,
            config,
            grid_config,
            vocab,
            rules,
            base,
            plan_history: Vec::new(),
        })
    }

    pub fn model(&self) -> &VidTtaModel {
        &self.model
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn rules(&self) -> &AugmentationRules {
        &self.rules
    }

    pub fn grid_config(&self) -> &GridConfig {
        &self.grid_config
    }

    /// Mask plans used at every step of the last run.
    pub fn plan_history(&self) -> &[Vec<MaskPlan>] {
        &self.plan_history
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot::of(&self.model.params)
    }

    /// Parameters the engine was created with.
    pub fn base_snapshot(&self) -> &ParamSnapshot {
        &self.base
    }

    pub fn reset_to_snapshot(&mut self, snapshot: &ParamSnapshot) -> Result<()> {
        if !self.model.params.same_topology(&snapshot.params) {
            return Err(validation("snapshot was taken from a different model topology"));
        }
        self.model.params = snapshot.params.clone();
        Ok(())
    }

    /// Restores the base parameters.
    pub fn reset(&mut self) {
        self.model.params = self.base.params.clone();
    }

    pub fn prepare(&self, instance: &VideoInstance, prompt: &str) -> Result<PreparedInstance> {
        prepare_instance(instance, prompt, &self.grid_config, &self.vocab, &self.model.config)
    }

    fn evaluate(&self, prep: &PreparedInstance, draws: &[StepDraw]) -> Result<EvalRecord> {
        let mut acc = EvalRecord {
            l_noise: 0.0,
            l_video: 0.0,
            l_prompt: 0.0,
            weights: [0.0; 3],
            l_total: 0.0,
        };
        for d in draws {
            let out = evaluate_objective(&self.model, prep, d, &self.config, None)?;
            acc.l_noise += out.bundle.l_noise;
            acc.l_video += out.bundle.l_video;
            acc.l_prompt += out.bundle.l_prompt;
            acc.l_total += out.total;
            acc.weights = out.bundle.weights;
        }
        let k = draws.len() as f64;
        acc.l_noise /= k;
        acc.l_video /= k;
        acc.l_prompt /= k;
        acc.l_total /= k;
        Ok(acc)
    }

    /// Adapts the current parameters to one instance. With `episodic_reset`
    /// the run starts from the base parameters.
    pub fn adapt(&mut self, instance: &VideoInstance, prompt: &str) -> std::result::Result<AdaptationOutcome, EngineError> {
        let started = Instant::now();
        let config = self.config.clone();
        config.validate()?;
        if config.episodic_reset {
            self.reset();
        }
        let prep = self.prepare(instance, prompt)?;
        let pre_run = self.snapshot();
        let eval_draws = evaluation_draws(&prep, &config, &self.rules, &self.vocab)?;
        let initial_eval = self.evaluate(&prep, &eval_draws)?;
        let trainable_values = self
            .model
            .params
            .iter()
            .filter(|(n, _)| config.is_trainable(n))
            .map(|(_, t)| t.len())
            .sum();

        let mut report = AdaptationReport {
            prompt: prep.prompt.clone(),
            config: config.clone(),
            model: self.model.config.clone(),
            grid: prep.grid,
            seeds: SeedRecord {
                adaptation: config.seed,
                model_init: self.model.config.init_seed,
            },
            trainable_values,
            initial_checksum: pre_run.checksum.clone(),
            final_checksum: String::new(),
            initial_eval,
            final_eval: None,
            steps: Vec::with_capacity(config.steps),
            diverged_at: None,
        };
        self.plan_history.clear();

        let mut adam = Adam::new(config.learning_rate, config.beta1, config.beta2, config.epsilon);
        let is_trainable = |n: &str| config.is_trainable(n);
        for step in 0..config.steps {
            let draw = draw_step(&prep, &config, &self.rules, &self.vocab, config.seed, step as u64)?;
            let out = evaluate_objective(&self.model, &prep, &draw, &config, Some(&is_trainable))?;
            let grads = out.grads.expect("gradients requested");
            let grad_norm = grads
                .values()
                .flat_map(|g| g.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            let finite = out.total.is_finite() && grad_norm.is_finite();
            report.steps.push(StepRecord {
                step,
                timestep: draw.noise.timestep,
                l_noise: out.bundle.l_noise,
                l_video: out.bundle.l_video,
                l_prompt: out.bundle.l_prompt,
                weights: out.bundle.weights,
                l_total: out.total,
                grad_norm,
                augment_fallbacks: draw.augmentations.iter().filter(|a| a.fallback).count(),
            });
            self.plan_history.push(draw.plans);
            if finite {
                adam.step(&mut self.model.params, &grads);
            }
            if !finite || !self.model.params.all_finite() {
                self.model.params = pre_run.params.clone();
                report.diverged_at = Some(step);
                report.final_checksum = pre_run.checksum.clone();
                return Err(EngineError::Diverged {
                    step,
                    report: Box::new(report),
                });
            }
        }

        report.final_eval = Some(self.evaluate(&prep, &eval_draws)?);
        report.final_checksum = self.model.params.checksum();
        Ok(AdaptationOutcome {
            parameters: self.model.params.clone(),
            report,
            wall_time_secs: started.elapsed().as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    fn engine(config: AdaptationConfig) -> TtaEngine {
        let vocab = Vocabulary::builtin();
        let model = VidTtaModel::new(ModelConfig {
            vocab_size: vocab.len(),
            init_seed: 1,
            ..Default::default()
        })
        .unwrap();
        TtaEngine::new(model, config, GridConfig::default(), vocab, AugmentationRules::builtin()).unwrap()
    }

    fn instance() -> VideoInstance {
        let spec = SceneSpec::rectangle(32, 32, 3, (16, 16), (0, 8), (4, 0));
        VideoInstance::from_scene(&generate_scene(&spec).unwrap())
    }

    #[test]
    fn config_validation() {
        assert!(AdaptationConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(AdaptationConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdaptationConfig { r_f: 1.5, ..Default::default() }.validate().is_err());
        assert!(AdaptationConfig { timestep_max: 1001, ..Default::default() }.validate().is_err());
        AdaptationConfig::default().validate().unwrap();
    }

    #[test]
    fn frozen_mode_excludes_weighting() {
        let c = AdaptationConfig {
            psi_mode: PsiMode::Frozen,
            ..Default::default()
        };
        assert!(!c.is_trainable("weighting.mlp.out.weight"));
        assert!(c.is_trainable("denoiser.head.weight"));
        let c = AdaptationConfig {
            trainable: vec!["denoiser.".into()],
            ..Default::default()
        };
        assert!(!c.is_trainable("text_encoder.embed"));
    }

    #[test]
    fn schedule_is_decreasing() {
        let s = NoiseSchedule::default();
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < s.alpha_bar(500));
        assert!(s.alpha_bar(1000) > 0.0);
    }

    #[test]
    fn zero_head_noise_loss_is_noise_energy() {
        let e = engine(AdaptationConfig::default());
        let prep = e.prepare(&instance(), "a man is surfing").unwrap();
        let sample = NoiseSample::draw(&prep.latent, 300, &NoiseSchedule::default(), 4);
        let tf = vec![0.0; e.model().config.text_dim];
        let l = noise_prediction_loss(e.model(), &tf, &sample).unwrap();
        let energy = sample.noise.data.iter().map(|x| x * x).sum::<f64>() / sample.noise.data.len() as f64;
        assert_eq!(l, energy);
        let perfect = NoiseSample::from_noise(&prep.latent, 300, &NoiseSchedule::default(), vec![0.0; prep.latent.data.len()]);
        assert_eq!(noise_prediction_loss(e.model(), &tf, &perfect).unwrap(), 0.0);
    }

    #[test]
    fn empty_prompt_rejected() {
        let mut e = engine(AdaptationConfig {
            steps: 1,
            ..Default::default()
        });
        assert!(matches!(e.adapt(&instance(), "  "), Err(EngineError::Core(Error::Validation(_)))));
    }

    #[test]
    fn divergence_restores_parameters() {
        let mut e = engine(AdaptationConfig {
            steps: 3,
            learning_rate: 1e300,
            eval_draws: 1,
            ..Default::default()
        });
        let before = e.snapshot();
        match e.adapt(&instance(), "a man is surfing") {
            Err(EngineError::Diverged { step, report }) => {
                assert_eq!(report.diverged_at, Some(step));
                assert_eq!(report.steps.len(), step + 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        assert_eq!(e.snapshot(), before);
    }

    #[test]
    fn short_run_records_every_step() {
        let mut e = engine(AdaptationConfig {
            steps: 3,
            eval_draws: 1,
            ..Default::default()
        });
        let out = e.adapt(&instance(), "a man is surfing on the sea").unwrap();
        assert_eq!(out.report.steps.len(), 3);
        assert_eq!(e.plan_history().len(), 3);
        assert_ne!(out.report.initial_checksum, out.report.final_checksum);
        for s in &out.report.steps {
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // the first step starts from the uniform triple
        assert_eq!(out.report.steps[0].weights, [1.0 / 3.0; 3]);
        e.reset();
        assert_eq!(e.snapshot().checksum, out.report.initial_checksum);
    }

    #[test]
    fn topology_mismatch_rejected() {
        let mut e = engine(AdaptationConfig::default());
        let mut other = e.snapshot();
        other.params.insert("extra", Tensor::zeros(vec![1]));
        assert!(e.reset_to_snapshot(&other).is_err());
    }
}
