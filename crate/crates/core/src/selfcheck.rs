//! Quick oracle checks run by `vidtta selfcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{decode_tensors, encode_tensors, NamedTensor};
use crate::engine::{
    draw_step, evaluate_objective, prepare_instance, AdaptationConfig, GridConfig, VideoInstance,
};
use crate::flow::{BoundingBox, FlowField};
use crate::masking::{foreground_patch_set, mask_budgets, plan_masks, PatchGrid};
use crate::models::{ModelConfig, VidTtaModel};
use crate::prompt::{AugmentationRules, Vocabulary};
use crate::scene::{generate_scene, SceneSpec};
use crate::weighting::{compute_weights, FeatureProjector, WeightNet};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, body: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match body() {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name,
            passed: false,
            detail,
        },
    }
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("mask budgets", budgets),
        check("foreground ranking", ranking),
        check("foreground patch set", foreground),
        check("initial weights", initial_weights),
        check("flow round trip", flow_round_trip),
        check("tensor container", tensor_container),
        check("gradients", gradients),
    ]
}

fn budgets() -> Result<String, String> {
    let mut n = 0;
    for n_p in 0..=40usize {
        for n_b in 0..=n_p {
            for num in 0..=8usize {
                let r = num as f64 / 8.0;
                let got = mask_budgets(n_p, n_b, r, r).map_err(|e| e.to_string())?;
                let want = (num * n_b / 8, num * (n_p - n_b) / 8);
                if got != want {
                    return Err(format!("N_p={n_p} N_B={n_b} r={r}: {got:?} != {want:?}"));
                }
                n += 1;
            }
        }
    }
    Ok(format!("{n} rational tuples"))
}

fn ranking() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..50 {
        let n_p = rng.random_range(4..40);
        let intensities: Vec<f64> = (0..n_p).map(|_| rng.random_range(0..5) as f64).collect();
        let fg: Vec<usize> = (0..n_p).filter(|_| rng.random_bool(0.5)).collect();
        let m_f = rng.random_range(0..=fg.len());
        let plan = plan_masks(&intensities, &fg, (m_f, 0), case).map_err(|e| e.to_string())?;
        // selection-by-max oracle
        let mut left = fg.clone();
        for (k, &got) in plan.foreground_ids.iter().enumerate() {
            let best = *left
                .iter()
                .max_by(|&&a, &&b| intensities[a].total_cmp(&intensities[b]).then(b.cmp(&a)))
                .unwrap();
            if got != best {
                return Err(format!("case {case} rank {k}: {got} != {best}"));
            }
            left.retain(|&i| i != best);
        }
    }
    Ok("50 random vectors".into())
}

fn foreground() -> Result<String, String> {
    let grid = PatchGrid::new(64, 64, 16, 16, 8).map_err(|e| e.to_string())?;
    let mut n = 0;
    for x in (-16..64).step_by(4) {
        for y in (-16..64).step_by(4) {
            for w in (4..48).step_by(12) {
                let b = BoundingBox::new(x, y, w, w);
                let want: Vec<usize> = (0..16)
                    .filter(|id| {
                        let cx = (id % 4 * 16) as f64 + 8.0;
                        let cy = (id / 4 * 16) as f64 + 8.0;
                        let (x0, y0) = (x.max(0) as f64, y.max(0) as f64);
                        let (x1, y1) = (((x + w).min(64)) as f64, ((y + w).min(64)) as f64);
                        cx >= x0 && cx < x1 && cy >= y0 && cy < y1
                    })
                    .collect();
                let got = foreground_patch_set(&grid, &b);
                if got != want {
                    return Err(format!("{b:?}: {got:?} != {want:?}"));
                }
                n += 1;
            }
        }
    }
    Ok(format!("{n} boxes"))
}

fn initial_weights() -> Result<String, String> {
    let model = VidTtaModel::new(ModelConfig {
        vocab_size: 8,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let g = FeatureProjector::from_params(&model.params).map_err(|e| e.to_string())?;
    let net = WeightNet::from_params(&model.params).map_err(|e| e.to_string())?;
    let v = g.project(&[0.7]).map_err(|e| e.to_string())?;
    let t = vec![0.3; model.config.text_dim];
    let w = compute_weights(&v, &t, &net).map_err(|e| e.to_string())?;
    if w != [1.0 / 3.0; 3] {
        return Err(format!("{w:?}"));
    }
    Ok("uniform at initialisation".into())
}

fn flow_round_trip() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
        let mut f = FlowField::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                f.set(x, y, rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            }
        }
        let back = FlowField::from_bytes(&f.to_bytes()).map_err(|e| e.to_string())?;
        if back != f {
            return Err(format!("{w}x{h} field changed"));
        }
    }
    if FlowField::from_bytes(b"XXXX\x01\0\0\0\x01\0\0\0\0\0\0\0\0\0\0\0").is_ok() {
        return Err("bad magic accepted".into());
    }
    Ok("20 fields, bad magic rejected".into())
}

fn tensor_container() -> Result<String, String> {
    let tensors = vec![
        NamedTensor {
            name: "a".into(),
            shape: vec![2, 3],
            data: vec![1.0, -2.0, 3.5, 0.0, 1e-3, 7.0],
        },
        NamedTensor {
            name: "b".into(),
            shape: vec![1],
            data: vec![42.0],
        },
    ];
    let bytes = encode_tensors(&tensors).map_err(|e| e.to_string())?;
    let back = decode_tensors(&bytes).map_err(|e| e.to_string())?;
    if back != tensors {
        return Err("tensors changed".into());
    }
    Ok("2 tensors".into())
}

fn gradients() -> Result<String, String> {
    let vocab = Vocabulary::builtin();
    let rules = AugmentationRules::builtin();
    let mut model = VidTtaModel::new(ModelConfig {
        vocab_size: vocab.len(),
        width: 4,
        blocks: 1,
        text_dim: 8,
        time_dim: 8,
        max_len: 16,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    model.perturb(3, 0.1);
    let spec = SceneSpec::rectangle(32, 32, 2, (16, 16), (8, 8), (4, 0));
    let scene = generate_scene(&spec).map_err(|e| e.to_string())?;
    let instance = VideoInstance::from_scene(&scene);
    let config = AdaptationConfig::default();
    let prep = prepare_instance(&instance, "a man is surfing", &GridConfig::default(), &vocab, &model.config)
        .map_err(|e| e.to_string())?;
    let draw = draw_step(&prep, &config, &rules, &vocab, 9, 0).map_err(|e| e.to_string())?;
    let all = |_: &str| true;
    let out = evaluate_objective(&model, &prep, &draw, &config, Some(&all)).map_err(|e| e.to_string())?;
    let grads = out.grads.unwrap_or_default();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for name in [
        "denoiser.stem.weight",
        "prompt_head.weight",
        "weighting.proj.weight",
        "weighting.mlp.hidden.weight",
        "text_encoder.embed",
    ] {
        let g = &grads[name];
        let i = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap_or(0);
        let eval_at = |delta: f64| -> Result<f64, String> {
            let mut m = model.clone();
            m.params.get_mut(name).unwrap().data[i] += delta;
            evaluate_objective(&m, &prep, &draw, &config, None)
                .map(|o| o.total)
                .map_err(|e| e.to_string())
        };
        let numeric = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
        let rel = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(1e-12);
        worst = worst.max(rel);
    }
    if worst < 1e-4 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e}"))
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for r in super::run_all() {
            assert!(r.passed, "{r}");
        }
    }
}
