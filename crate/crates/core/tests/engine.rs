use vidtta_core::engine::{
    draw_step, evaluate_objective, plan_step, prepare_instance, AdaptationConfig, GridConfig, PsiMode, TtaEngine,
    VideoInstance,
};
use vidtta_core::flow::{FlowEstimator, RecordedDetector, RecordedFlow};
use vidtta_core::masking::{plan_frame, MaskPlan};
use vidtta_core::models::{ModelConfig, VidTtaModel};
use vidtta_core::prompt::{AugmentationRules, Vocabulary};
use vidtta_core::scene::{generate_scene, SceneSpec, SyntheticScene};

const PROMPT: &str = "a man is surfing on the sea";

fn scene() -> SyntheticScene {
    generate_scene(&SceneSpec::rectangle(64, 64, 4, (24, 24), (4, 8), (6, 2))).unwrap()
}

fn model(seed: u64) -> VidTtaModel {
    VidTtaModel::new(ModelConfig {
        vocab_size: Vocabulary::builtin().len(),
        init_seed: seed,
        ..Default::default()
    })
    .unwrap()
}

fn engine(config: AdaptationConfig) -> TtaEngine {
    TtaEngine::new(
        model(1),
        config,
        GridConfig::default(),
        Vocabulary::builtin(),
        AugmentationRules::builtin(),
    )
    .unwrap()
}

#[test]
fn engine_plans_match_direct_masking_calls() {
    let config = AdaptationConfig {
        steps: 4,
        seed: 77,
        eval_draws: 1,
        ..Default::default()
    };
    let mut e = engine(config.clone());
    let s = scene();
    let instance = VideoInstance::from_scene(&s);
    e.adapt(&instance, PROMPT).unwrap();
    let prep = e.prepare(&instance, PROMPT).unwrap();
    for (step, plans) in e.plan_history().iter().enumerate() {
        let direct: Vec<MaskPlan> = (0..s.spec.num_frames)
            .map(|t| {
                plan_frame(
                    &prep.grid,
                    t,
                    &prep.intensities[t],
                    Some(&s.boxes[t]),
                    (config.r_f, config.r_b),
                    vidtta_core::engine::mask_seed(config.seed, step as u64, t),
                )
                .unwrap()
            })
            .collect();
        assert_eq!(plans, &direct, "step {step}");
        let via_plan_step = plan_step(
            &prep.grid,
            &prep.intensities,
            &prep.detections,
            (config.r_f, config.r_b),
            config.seed,
            step as u64,
        )
        .unwrap();
        assert_eq!(plans, &via_plan_step);
    }
}

#[test]
fn plugin_instance_matches_scene_instance() {
    let s = scene();
    let flows = RecordedFlow::new(s.flows.clone());
    let det = RecordedDetector::new(s.boxes.clone());
    let a = VideoInstance::from_plugins(s.frames.clone(), &det, &flows).unwrap();
    let b = VideoInstance::from_scene(&s);
    assert_eq!(a.detections, b.detections);
    assert_eq!(a.flows, b.flows);
    assert_eq!(flows.estimate(&s.frames, 0).unwrap(), s.flows[0]);
}

#[test]
fn zero_scales_with_frozen_weights_leave_auxiliary_heads_untouched() {
    let config = AdaptationConfig {
        lambda_video: 0.0,
        lambda_text: 0.0,
        psi_mode: PsiMode::Frozen,
        ..Default::default()
    };
    let vocab = Vocabulary::builtin();
    let rules = AugmentationRules::builtin();
    let mut m = model(5);
    m.perturb(6, 0.05);
    // frozen weighting parameters stay at their initial values
    let init = model(5);
    for (name, t) in init.params.iter().filter(|(n, _)| n.starts_with("weighting.")) {
        *m.params.get_mut(name).unwrap() = t.clone();
    }
    let s = scene();
    let prep = prepare_instance(&VideoInstance::from_scene(&s), PROMPT, &GridConfig::default(), &vocab, &m.config).unwrap();
    let draw = draw_step(&prep, &config, &rules, &vocab, 3, 0).unwrap();
    let trainable = |n: &str| config.is_trainable(n);
    let out = evaluate_objective(&m, &prep, &draw, &config, Some(&trainable)).unwrap();
    assert!(out.bundle.l_video > 0.0 && out.bundle.l_prompt > 0.0);
    assert_eq!(out.bundle.weights, [1.0 / 3.0; 3]);
    assert!((out.total - out.bundle.l_noise / 3.0).abs() < 1e-15);
    let grads = out.grads.unwrap();
    assert!(!grads.keys().any(|k| k.starts_with("weighting.")));
    // the prompt head only feeds the prompt loss
    assert!(grads["prompt_head.weight"].iter().all(|&g| g == 0.0));
    assert!(grads["prompt_head.bias"].iter().all(|&g| g == 0.0));
    assert!(grads["denoiser.head.weight"].iter().any(|&g| g != 0.0));
}

#[test]
fn frozen_blend_equals_static_weighting() {
    let config = AdaptationConfig {
        psi_mode: PsiMode::Frozen,
        steps: 3,
        eval_draws: 1,
        ..Default::default()
    };
    let mut e = engine(config);
    let out = e.adapt(&VideoInstance::from_scene(&scene()), PROMPT).unwrap();
    for s in &out.report.steps {
        let blend = (s.l_noise + 0.1 * s.l_video + 0.1 * s.l_prompt) / 3.0;
        assert!((s.l_total - blend).abs() < 1e-12, "{} vs {blend}", s.l_total);
    }
}

#[test]
fn weighting_parameters_move_only_in_joint_mode() {
    let instance = VideoInstance::from_scene(&scene());
    for (mode, should_move) in [(PsiMode::Joint, true), (PsiMode::Frozen, false)] {
        let mut e = engine(AdaptationConfig {
            psi_mode: mode,
            steps: 3,
            eval_draws: 1,
            ..Default::default()
        });
        let before = e.model().params.get("weighting.mlp.out.weight").unwrap().clone();
        let out = e.adapt(&instance, PROMPT).unwrap();
        let after = out.parameters.get("weighting.mlp.out.weight").unwrap();
        assert_eq!(&before != after, should_move, "{mode:?}");
    }
}

#[test]
fn trainable_filter_restricts_updates() {
    let mut e = engine(AdaptationConfig {
        trainable: vec!["denoiser.".into()],
        steps: 2,
        eval_draws: 1,
        ..Default::default()
    });
    let before = e.model().params.clone();
    let out = e.adapt(&VideoInstance::from_scene(&scene()), PROMPT).unwrap();
    for (name, t) in out.parameters.iter() {
        if !name.starts_with("denoiser.") {
            assert_eq!(t, before.get(name).unwrap(), "{name}");
        }
    }
    assert_ne!(out.parameters.get("denoiser.head.weight"), before.get("denoiser.head.weight"));
}

#[test]
fn missing_detections_fall_back_to_background_budget() {
    let s = scene();
    let mut instance = VideoInstance::from_scene(&s);
    instance.detections = vec![None; s.spec.num_frames];
    let config = AdaptationConfig {
        steps: 1,
        eval_draws: 1,
        ..Default::default()
    };
    let mut e = engine(config);
    e.adapt(&instance, PROMPT).unwrap();
    for plan in &e.plan_history()[0] {
        assert!(plan.foreground_ids.is_empty());
        assert_eq!(plan.background_ids.len(), 3); // floor(0.2 * 16)
    }
}

#[test]
fn prompt_longer_than_encoder_rejected() {
    let mut e = engine(AdaptationConfig::default());
    let long = vec!["sea"; 40].join(" ");
    assert!(e.adapt(&VideoInstance::from_scene(&scene()), &long).is_err());
}
