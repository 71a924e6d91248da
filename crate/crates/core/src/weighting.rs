//! Feature-conditioned loss weighting.
//!
//! A clip-level video feature (spatially and temporally pooled latent) is
//! projected into the text hidden space, concatenated with the mean-pooled
//! text hidden states, and mapped by a small MLP to three logits whose
//! softmax weights the noise, video and prompt losses.

use serde::{Deserialize, Serialize};

use crate::error::{shape, validation, Error, Result};
use crate::masking::LatentGrid;
use crate::models::{Bound, ParamStore};
use crate::tape::{Tape, Tensor, Var};

/// Per-channel mean over all frames and cells.
pub fn global_video_feature(z: &LatentGrid) -> Result<Vec<f64>> {
    if z.data.is_empty() {
        return Err(validation("cannot pool an empty latent"));
    }
    let per_frame = (z.height * z.width) as f64;
    let mut v = vec![0.0; z.channels];
    for t in 0..z.frames {
        for (c, acc) in v.iter_mut().enumerate() {
            let start = z.index(t, c, 0, 0);
            let s: f64 = z.data[start..start + z.height * z.width].iter().sum();
            *acc += s / per_frame;
        }
    }
    for acc in v.iter_mut() {
        *acc /= z.frames as f64;
    }
    Ok(v)
}

/// Mean of the hidden-state rows.
pub fn global_text_feature(hidden: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = hidden.first() else {
        return Err(validation("cannot pool zero hidden states"));
    };
    let d = first.len();
    let mut t = vec![0.0; d];
    for row in hidden {
        if row.len() != d {
            return Err(shape("ragged hidden states"));
        }
        for (acc, v) in t.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let l = hidden.len() as f64;
    Ok(t.into_iter().map(|v| v / l).collect())
}

fn matvec(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), k);
    let mut out = b.data.clone();
    for (p, xv) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(&w.data[p * n..(p + 1) * n]) {
            *o += xv * wv;
        }
    }
    out
}

fn param<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Tensor> {
    store
        .get(name)
        .ok_or_else(|| validation(format!("missing parameter {name}")))
}

/// Linear map from latent channels into the text hidden space.
#[derive(Debug, Clone)]
pub struct FeatureProjector {
    weight: Tensor,
    bias: Tensor,
}

impl FeatureProjector {
    pub fn from_params(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            weight: param(store, "weighting.proj.weight")?.clone(),
            bias: param(store, "weighting.proj.bias")?.clone(),
        })
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.weight.shape[0] {
            return Err(shape(format!(
                "video feature of length {}, projector expects {}",
                v.len(),
                self.weight.shape[0]
            )));
        }
        Ok(matvec(v, &self.weight, &self.bias))
    }
}

/// Two-layer SiLU MLP producing three logits.
#[derive(Debug, Clone)]
pub struct WeightNet {
    hidden_w: Tensor,
    hidden_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

impl WeightNet {
    pub fn from_params(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            hidden_w: param(store, "weighting.mlp.hidden.weight")?.clone(),
            hidden_b: param(store, "weighting.mlp.hidden.bias")?.clone(),
            out_w: param(store, "weighting.mlp.out.weight")?.clone(),
            out_b: param(store, "weighting.mlp.out.bias")?.clone(),
        })
    }

    pub fn logits(&self, input: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = matvec(input, &self.hidden_w, &self.hidden_b)
            .into_iter()
            .map(|x| x / (1.0 + (-x).exp()))
            .collect();
        matvec(&h, &self.out_w, &self.out_b)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `softmax(psi([v_p; t]))`.
pub fn compute_weights(v_p: &[f64], t: &[f64], net: &WeightNet) -> Result<[f64; 3]> {
    if v_p.len() != t.len() {
        return Err(shape(format!(
            "projected video feature has length {}, text feature {}",
            v_p.len(),
            t.len()
        )));
    }
    if v_p.iter().chain(t).any(|x| !x.is_finite()) {
        return Err(Error::Value("non-finite feature".into()));
    }
    let input: Vec<f64> = v_p.iter().chain(t).copied().collect();
    if input.len() != net.hidden_w.shape[0] {
        return Err(shape("feature length does not match the weight network"));
    }
    let w = softmax(&net.logits(&input));
    Ok([w[0], w[1], w[2]])
}

/// The three losses, their weights and the two scale factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_noise: f64,
    pub l_video: f64,
    pub l_prompt: f64,
    pub weights: [f64; 3],
    pub lambda_video: f64,
    pub lambda_text: f64,
}

impl LossBundle {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [
            ("l_noise", self.l_noise),
            ("l_video", self.l_video),
            ("l_prompt", self.l_prompt),
        ] {
            if !(l >= 0.0) {
                return Err(validation(format!("{name} = {l} must be non-negative")));
            }
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && *w < 1.0)) {
            return Err(validation(format!("weights {:?} must lie in (0, 1)", self.weights)));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(validation(format!("weights sum to {s}")));
        }
        if self.lambda_video < 0.0 || self.lambda_text < 0.0 {
            return Err(validation("scale factors must be non-negative"));
        }
        Ok(())
    }
}

/// `w1 L_noise + w2 lambda_video L_video + w3 lambda_text L_prompt`.
pub fn total_loss(bundle: &LossBundle) -> Result<f64> {
    bundle.validate()?;
    let [w1, w2, w3] = bundle.weights;
    Ok(w1 * bundle.l_noise
        + w2 * bundle.lambda_video * bundle.l_video
        + w3 * bundle.lambda_text * bundle.l_prompt)
}

/// Mixes the softmax output with the uniform triple so that every weight is
/// at least `floor`. A floor of zero leaves the weights untouched.
pub fn apply_weight_floor(weights: [f64; 3], floor: f64) -> [f64; 3] {
    if floor <= 0.0 {
        return weights;
    }
    weights.map(|w| w * (1.0 - 3.0 * floor) + floor)
}

/// Weight triple on the tape as a `1 x 3` row.
pub fn weights_on_tape(
    tape: &mut Tape,
    p: &Bound,
    video_feature: &[f64],
    text_feature: Var,
    floor: f64,
) -> Var {
    let v = tape.constant(Tensor::row(video_feature.to_vec()));
    let vp = tape.linear(v, p.var("weighting.proj.weight"), p.var("weighting.proj.bias"));
    let x = tape.concat_cols(vp, text_feature);
    let h = tape.linear(x, p.var("weighting.mlp.hidden.weight"), p.var("weighting.mlp.hidden.bias"));
    let h = tape.silu(h);
    let logits = tape.linear(h, p.var("weighting.mlp.out.weight"), p.var("weighting.mlp.out.bias"));
    let w = tape.softmax_rows(logits);
    if floor > 0.0 {
        tape.affine(w, 1.0 - 3.0 * floor, floor)
    } else {
        w
    }
}

/// Weighted total on the tape from three scalar loss nodes.
pub fn total_on_tape(
    tape: &mut Tape,
    weights: Var,
    losses: [Var; 3],
    lambda_video: f64,
    lambda_text: f64,
) -> Var {
    let l = tape.stack(&losses);
    let wl = tape.mul(weights, l);
    let scales = tape.constant(Tensor::row(vec![1.0, lambda_video, lambda_text]));
    let terms = tape.mul(wl, scales);
    tape.sum(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, VidTtaModel};
    use proptest::prelude::*;

    fn model() -> VidTtaModel {
        VidTtaModel::new(ModelConfig {
            latent_channels: 3,
            vocab_size: 10,
            text_dim: 4,
            init_seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn pooling_cases() {
        let z = LatentGrid::from_vec(2, 2, 2, 2, vec![0.7; 16]).unwrap();
        assert!(global_video_feature(&z).unwrap().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let one = LatentGrid::from_vec(1, 3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(global_video_feature(&one).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(global_video_feature(&LatentGrid::zeros(0, 3, 2, 2)).is_err());

        assert_eq!(global_text_feature(&[vec![1.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(
            global_text_feature(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(global_text_feature(&[]).is_err());
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let m = model();
        let net = WeightNet::from_params(&m.params).unwrap();
        let w = compute_weights(&[0.3, -1.0, 2.0, 0.1], &[1.0, 1.0, -3.0, 0.5], &net).unwrap();
        assert_eq!(w, [1.0 / 3.0; 3]);
        assert!(compute_weights(&[f64::NAN, 0.0, 0.0, 0.0], &[0.0; 4], &net).is_err());
        assert!(compute_weights(&[0.0; 3], &[0.0; 4], &net).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = LossBundle {
            l_noise: 0.3,
            l_video: 0.6,
            l_prompt: 0.9,
            weights: [1.0 / 3.0; 3],
            lambda_video: 0.1,
            lambda_text: 0.1,
        };
        assert!((total_loss(&b).unwrap() - 0.15).abs() < 1e-12);
        let zero = LossBundle {
            l_noise: 0.0,
            l_video: 0.0,
            l_prompt: 0.0,
            ..b
        };
        assert_eq!(total_loss(&zero).unwrap(), 0.0);
        assert!(total_loss(&LossBundle { l_video: -1.0, ..b }).is_err());
        assert!(total_loss(&LossBundle { weights: [0.5, 0.5, 0.0], ..b }).is_err());
    }

    #[test]
    fn tape_weights_match_plain_path() {
        let mut m = model();
        m.perturb(5, 0.3);
        let v = [0.2, 0.5, -0.1];
        let t = [0.3, -0.2, 0.9, 0.0];
        let proj = FeatureProjector::from_params(&m.params).unwrap();
        let net = WeightNet::from_params(&m.params).unwrap();
        let plain = compute_weights(&proj.project(&v).unwrap(), &t, &net).unwrap();
        let mut tape = Tape::new();
        let p = crate::models::bind(&mut tape, &m.params, |_| false);
        let tf = tape.constant(Tensor::row(t.to_vec()));
        let w = weights_on_tape(&mut tape, &p, &v, tf, 0.0);
        for (a, b) in tape.value(w).data.iter().zip(plain) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn weight_floor_bounds() {
        let w = apply_weight_floor([0.98, 0.01, 0.01], 0.05);
        assert!(w.iter().all(|&x| x >= 0.05));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(apply_weight_floor([0.2, 0.3, 0.5], 0.0), [0.2, 0.3, 0.5]);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(a in -20.0f64..20.0, b in -20.0f64..20.0, c in -20.0f64..20.0, k in -50.0f64..50.0) {
            let w1 = softmax(&[a, b, c]);
            let w2 = softmax(&[a + k, b + k, c + k]);
            for (x, y) in w1.iter().zip(&w2) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let u = softmax(&[a, a, a]);
            prop_assert!(u.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        }

        #[test]
        fn total_loss_monotone(l in proptest::array::uniform3(0.0f64..5.0), dl in 0.0f64..2.0, which in 0usize..3, w0 in 0.05f64..0.9) {
            let w1 = (1.0 - w0) / 2.0;
            let base = LossBundle { l_noise: l[0], l_video: l[1], l_prompt: l[2], weights: [w0, w1, 1.0 - w0 - w1], lambda_video: 0.1, lambda_text: 0.1 };
            let mut bumped = base;
            match which { 0 => bumped.l_noise += dl, 1 => bumped.l_video += dl, _ => bumped.l_prompt += dl }
            prop_assert!(total_loss(&bumped).unwrap() >= total_loss(&base).unwrap());
        }
    }
}
