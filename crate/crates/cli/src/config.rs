use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use vidtta_core::engine::{AdaptationConfig, GridConfig, VideoInstance};
use vidtta_core::flow::{PluginContext, Registry};
use vidtta_core::models::ModelConfig;
use vidtta_core::prompt::{AugmentationRules, Vocabulary};
use vidtta_core::scene::{generate_scene, load_scene_manifest, SceneSpec, SyntheticScene};

/// Contents of `--config`. Relative paths resolve against the config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub adaptation: AdaptationConfig,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub detector: String,
    pub flow_estimator: String,
    pub flo_dir: Option<PathBuf>,
    pub box_stream: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            adaptation: AdaptationConfig::default(),
            model: ModelConfig::default(),
            grid: GridConfig::default(),
            detector: "ground_truth".into(),
            flow_estimator: "ground_truth".into(),
            flo_dir: None,
            box_stream: None,
            rules: None,
            vocab: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.flo_dir, &mut cfg.box_stream, &mut cfg.rules, &mut cfg.vocab]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.adaptation.validate()?;
        Ok(cfg)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Ok(match &self.vocab {
            Some(p) => Vocabulary::load(p)?,
            None => Vocabulary::builtin(),
        })
    }

    pub fn augmentation_rules(&self, vocab: &Vocabulary) -> Result<AugmentationRules> {
        let rules = match &self.rules {
            Some(p) => AugmentationRules::load(p)?,
            None => AugmentationRules::builtin(),
        };
        rules.validate(vocab)?;
        Ok(rules)
    }

    /// Model config with the vocabulary size filled in when left at zero.
    pub fn model_config(&self, vocab: &Vocabulary) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = vocab.len();
        } else if m.vocab_size != vocab.len() {
            bail!("model.vocab_size = {} but the vocabulary has {} tokens", m.vocab_size, vocab.len());
        }
        Ok(m)
    }

    /// Runs the configured detector and flow estimator over the scene.
    pub fn instance(&self, scene: &SyntheticScene) -> Result<VideoInstance> {
        let registry = Registry::with_builtins();
        let ctx = PluginContext {
            scene: Some(scene),
            flo_dir: self.flo_dir.as_deref(),
            box_stream: self.box_stream.as_deref(),
        };
        let detector = registry.detector(&self.detector, &ctx)?;
        let flow = registry.flow_estimator(&self.flow_estimator, &ctx)?;
        Ok(VideoInstance::from_plugins(scene.frames.clone(), detector.as_ref(), flow.as_ref())?)
    }
}

/// `synthetic:<spec.json>` or a path to an exported `manifest.json`.
pub fn load_scene(arg: &str) -> Result<SyntheticScene> {
    if let Some(spec_path) = arg.strip_prefix("synthetic:") {
        let text = std::fs::read_to_string(spec_path).with_context(|| format!("reading {spec_path}"))?;
        let spec: SceneSpec = serde_json::from_str(&text).with_context(|| format!("parsing {spec_path}"))?;
        Ok(generate_scene(&spec)?)
    } else {
        Ok(load_scene_manifest(Path::new(arg)).with_context(|| format!("loading scene manifest {arg}"))?)
    }
}
