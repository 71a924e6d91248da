//! Differentiable stand-ins for the networks touched by adaptation: a fixed
//! block-average latent codec, a one-block text encoder, a FiLM-conditioned
//! residual convolutional denoiser, the linear prompt head and the loss
//! weighting network parameters.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::NamedTensor;
use crate::error::{shape, validation, Error, Result};
use crate::masking::LatentGrid;
use crate::scene::Video;
use crate::tape::{Tape, Tensor, Var};

/// Fixed codec: `s x s` block average per channel; decode repeats each cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentCodec {
    pub stride: usize,
}

impl LatentCodec {
    pub fn new(stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(validation("codec stride must be positive"));
        }
        Ok(Self { stride })
    }

    pub fn encode(&self, video: &Video) -> Result<LatentGrid> {
        let s = self.stride;
        if !video.height.is_multiple_of(s) || !video.width.is_multiple_of(s) {
            return Err(shape(format!(
                "frame {}x{} is not divisible by stride {s}",
                video.width, video.height
            )));
        }
        let (lh, lw) = (video.height / s, video.width / s);
        let mut z = LatentGrid::zeros(video.num_frames, video.channels, lh, lw);
        let norm = 1.0 / (s * s) as f64;
        for t in 0..video.num_frames {
            for c in 0..video.channels {
                for y in 0..video.height {
                    for x in 0..video.width {
                        let i = z.index(t, c, y / s, x / s);
                        z.data[i] += video.get(t, c, y, x);
                    }
                }
                for y in 0..lh {
                    for x in 0..lw {
                        let i = z.index(t, c, y, x);
                        z.data[i] *= norm;
                    }
                }
            }
        }
        Ok(z)
    }

    pub fn decode(&self, z: &LatentGrid) -> Video {
        let s = self.stride;
        let mut v = Video::zeros(z.frames, z.channels, z.height * s, z.width * s);
        for t in 0..z.frames {
            for c in 0..z.channels {
                for y in 0..v.height {
                    for x in 0..v.width {
                        let i = v.index(t, c, y, x);
                        v.data[i] = z.get(t, c, y / s, x / s);
                    }
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub vocab_size: usize,
    /// Denoiser feature width.
    pub width: usize,
    pub blocks: usize,
    pub time_dim: usize,
    /// Text hidden dimension `d`.
    pub text_dim: usize,
    pub max_len: usize,
    /// Weight-network hidden size; `None` means `4 d`.
    pub weight_hidden: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 1,
            vocab_size: 0,
            width: 16,
            blocks: 3,
            time_dim: 16,
            text_dim: 32,
            max_len: 32,
            weight_hidden: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn weight_hidden(&self) -> usize {
        self.weight_hidden.unwrap_or(4 * self.text_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.latent_channels,
            self.vocab_size,
            self.width,
            self.time_dim,
            self.text_dim,
            self.max_len,
            self.weight_hidden(),
        ];
        if dims.contains(&0) {
            return Err(validation("model dimensions must be positive"));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(validation("time_dim must be even"));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn same_topology(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape == t2.shape)
    }

    /// SHA-256 over names, shapes and the exact `f64` bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checkpoint view; values are narrowed to `f32`.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        self.tensors
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape.clone(),
                data: t.data.iter().map(|&v| v as f32).collect(),
            })
            .collect()
    }

    pub fn from_named_tensors(tensors: &[NamedTensor]) -> Self {
        let mut store = Self::default();
        for t in tensors {
            store.insert(
                &t.name,
                Tensor::new(t.shape.clone(), t.data.iter().map(|&v| v as f64).collect()),
            );
        }
        store
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Places every parameter on the tape; `trainable` picks the ones that
/// receive gradients.
pub fn bind(tape: &mut Tape, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Bound {
    let vars = store
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name))))
        .collect();
    Bound { vars }
}

/// Sinusoidal timestep embedding `[sin(t f_k) .. , cos(t f_k) ..]`.
pub fn timestep_embedding(timestep: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let t = timestep as f64;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64).ln() * k as f64 / half as f64).exp())
        .collect();
    freqs
        .iter()
        .map(|f| (t * f).sin())
        .chain(freqs.iter().map(|f| (t * f).cos()))
        .collect()
}

fn latent_tensor(z: &LatentGrid) -> Tensor {
    Tensor::new(z.dims().to_vec(), z.data.clone())
}

fn tensor_latent(t: &Tensor) -> LatentGrid {
    LatentGrid::from_vec(t.shape[0], t.shape[1], t.shape[2], t.shape[3], t.data.clone())
        .expect("rank-4 tensor")
}

/// All adapted networks behind one parameter store.
///
/// Parameter name prefixes: `denoiser.`, `text_encoder.`, `prompt_head.`,
/// `weighting.proj.` (the feature projector) and `weighting.mlp.` (the weight
/// network).
#[derive(Debug, Clone, PartialEq)]
pub struct VidTtaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl VidTtaModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::default();
        let mut normal = |shape: Vec<usize>, std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
        };
        let c = config.latent_channels;
        let w = config.width;
        let d = config.text_dim;
        let v = config.vocab_size;
        let cond_in = config.time_dim + d;
        let hid = config.weight_hidden();

        let conv_std = |cin: usize| (1.0 / (9 * cin) as f64).sqrt();
        params.insert("denoiser.stem.weight", normal(vec![w, c, 3, 3], conv_std(c)));
        params.insert("denoiser.stem.bias", Tensor::zeros(vec![w]));
        params.insert("denoiser.cond.weight", normal(vec![cond_in, w], (1.0 / cond_in as f64).sqrt()));
        params.insert("denoiser.cond.bias", Tensor::zeros(vec![w]));
        for b in 0..config.blocks {
            let p = format!("denoiser.block{b}");
            params.insert(&format!("{p}.conv1.weight"), normal(vec![w, w, 3, 3], conv_std(w)));
            params.insert(&format!("{p}.conv1.bias"), Tensor::zeros(vec![w]));
            params.insert(&format!("{p}.conv2.weight"), normal(vec![w, w, 3, 3], 0.5 * conv_std(w)));
            params.insert(&format!("{p}.conv2.bias"), Tensor::zeros(vec![w]));
            let film_std = 0.5 / (w as f64).sqrt();
            params.insert(&format!("{p}.film_scale.weight"), normal(vec![w, w], film_std));
            params.insert(&format!("{p}.film_scale.bias"), Tensor::zeros(vec![w]));
            params.insert(&format!("{p}.film_shift.weight"), normal(vec![w, w], film_std));
            params.insert(&format!("{p}.film_shift.bias"), Tensor::zeros(vec![w]));
        }
        // Zero head: predicted noise is 0 and reconstruction is the identity.
        params.insert("denoiser.head.weight", Tensor::zeros(vec![c, w, 3, 3]));
        params.insert("denoiser.head.bias", Tensor::zeros(vec![c]));

        let attn_std = (1.0 / d as f64).sqrt();
        params.insert("text_encoder.embed", normal(vec![v, d], 0.5));
        params.insert("text_encoder.pos", normal(vec![config.max_len, d], 0.1));
        for m in ["query", "key", "value", "out"] {
            params.insert(&format!("text_encoder.{m}"), normal(vec![d, d], attn_std));
        }
        params.insert("text_encoder.ff1.weight", normal(vec![d, 2 * d], attn_std));
        params.insert("text_encoder.ff1.bias", Tensor::zeros(vec![2 * d]));
        params.insert("text_encoder.ff2.weight", normal(vec![2 * d, d], (0.5 / d as f64).sqrt()));
        params.insert("text_encoder.ff2.bias", Tensor::zeros(vec![d]));

        params.insert("prompt_head.weight", normal(vec![d, v], attn_std));
        params.insert("prompt_head.bias", Tensor::zeros(vec![v]));

        params.insert("weighting.proj.weight", normal(vec![c, d], (1.0 / c as f64).sqrt()));
        params.insert("weighting.proj.bias", Tensor::zeros(vec![d]));
        params.insert("weighting.mlp.hidden.weight", normal(vec![2 * d, hid], (1.0 / (2 * d) as f64).sqrt()));
        params.insert("weighting.mlp.hidden.bias", Tensor::zeros(vec![hid]));
        // Zero output layer: the first weight triple is uniform.
        params.insert("weighting.mlp.out.weight", Tensor::zeros(vec![hid, 3]));
        params.insert("weighting.mlp.out.bias", Tensor::zeros(vec![3]));

        Ok(Self { config, params })
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.all_finite() {
            Ok(())
        } else {
            Err(Error::ModelCorrupt("non-finite parameter value".into()))
        }
    }

    /// Adds Gaussian noise of the given std to every parameter, including the
    /// zero-initialised heads. Used to leave the degenerate starting point in
    /// gradient checks.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("positive std");
        for (_, t) in self.params.iter_mut() {
            for v in t.data.iter_mut() {
                *v += dist.sample(&mut rng);
            }
        }
    }

    // ---- tape forward passes ----------------------------------------------

    /// Text hidden states `L x d` for a non-empty id sequence.
    pub fn text_hidden(&self, tape: &mut Tape, p: &Bound, ids: &[usize]) -> Result<Var> {
        let l = ids.len();
        if l == 0 {
            return Err(validation("text encoder input is empty"));
        }
        if l > self.config.max_len {
            return Err(validation(format!(
                "prompt of {l} tokens exceeds max length {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(validation(format!("token id {bad} outside vocabulary")));
        }
        let d = self.config.text_dim;
        let tok = tape.gather_rows(p.var("text_encoder.embed"), ids);
        let positions: Vec<usize> = (0..l).collect();
        let pos = tape.gather_rows(p.var("text_encoder.pos"), &positions);
        let x = tape.add(tok, pos);

        let q = tape.matmul(x, p.var("text_encoder.query"));
        let k = tape.matmul(x, p.var("text_encoder.key"));
        let v = tape.matmul(x, p.var("text_encoder.value"));
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, v);
        let mixed = tape.matmul(mixed, p.var("text_encoder.out"));
        let x = tape.add(x, mixed);

        let f = tape.linear(x, p.var("text_encoder.ff1.weight"), p.var("text_encoder.ff1.bias"));
        let f = tape.silu(f);
        let f = tape.linear(f, p.var("text_encoder.ff2.weight"), p.var("text_encoder.ff2.bias"));
        Ok(tape.add(x, f))
    }

    /// Network body shared by noise prediction and reconstruction.
    pub fn denoiser_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        timestep: usize,
        text_feature: Var,
    ) -> Var {
        let temb = tape.constant(Tensor::row(timestep_embedding(timestep, self.config.time_dim)));
        let cond = tape.concat_cols(temb, text_feature);
        let cond = tape.linear(cond, p.var("denoiser.cond.weight"), p.var("denoiser.cond.bias"));
        let cond = tape.silu(cond);

        let mut h = tape.conv3x3(x, p.var("denoiser.stem.weight"), p.var("denoiser.stem.bias"));
        for b in 0..self.config.blocks {
            let pre = format!("denoiser.block{b}");
            let u = tape.silu(h);
            let u = tape.conv3x3(u, p.var(&format!("{pre}.conv1.weight")), p.var(&format!("{pre}.conv1.bias")));
            let gamma = tape.linear(
                cond,
                p.var(&format!("{pre}.film_scale.weight")),
                p.var(&format!("{pre}.film_scale.bias")),
            );
            let beta = tape.linear(
                cond,
                p.var(&format!("{pre}.film_shift.weight")),
                p.var(&format!("{pre}.film_shift.bias")),
            );
            let u = tape.modulate(u, gamma, beta);
            let u = tape.silu(u);
            let u = tape.conv3x3(u, p.var(&format!("{pre}.conv2.weight")), p.var(&format!("{pre}.conv2.bias")));
            h = tape.add(h, u);
        }
        let h = tape.silu(h);
        tape.conv3x3(h, p.var("denoiser.head.weight"), p.var("denoiser.head.bias"))
    }

    /// Reconstruction mode: timestep 0 with a residual connection around the
    /// denoiser body.
    pub fn reconstruct_on(&self, tape: &mut Tape, p: &Bound, masked: Var, text_feature: Var) -> Var {
        let delta = self.denoiser_forward(tape, p, masked, 0, text_feature);
        tape.add(masked, delta)
    }

    /// Vocabulary logits for selected hidden rows.
    pub fn prompt_logits(&self, tape: &mut Tape, p: &Bound, rows: Var) -> Var {
        tape.linear(rows, p.var("prompt_head.weight"), p.var("prompt_head.bias"))
    }

    // ---- plain forward API --------------------------------------------------

    fn check_latent(&self, z: &LatentGrid) -> Result<()> {
        if z.channels != self.config.latent_channels {
            return Err(shape(format!(
                "latent has {} channels, model expects {}",
                z.channels, self.config.latent_channels
            )));
        }
        if z.data.is_empty() {
            return Err(shape("empty latent"));
        }
        Ok(())
    }

    fn check_text_feature(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.config.text_dim {
            return Err(shape(format!(
                "text feature of length {}, expected {}",
                f.len(),
                self.config.text_dim
            )));
        }
        Ok(())
    }

    /// Hidden states as rows; empty input gives an empty matrix.
    pub fn encode_text(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, |_| false);
        let h = self.text_hidden(&mut tape, &p, ids)?;
        let d = self.config.text_dim;
        Ok(tape.value(h).data.chunks(d).map(<[f64]>::to_vec).collect())
    }

    /// Predicted noise for a noised latent.
    pub fn denoise(&self, z_noisy: &LatentGrid, timestep: usize, text_feature: &[f64]) -> Result<LatentGrid> {
        self.check_finite()?;
        self.check_latent(z_noisy)?;
        self.check_text_feature(text_feature)?;
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, |_| false);
        let x = tape.constant(latent_tensor(z_noisy));
        let tf = tape.constant(Tensor::row(text_feature.to_vec()));
        let out = self.denoiser_forward(&mut tape, &p, x, timestep, tf);
        Ok(tensor_latent(tape.value(out)))
    }

    /// Reconstructed latent from a masked latent.
    pub fn reconstruct(&self, masked: &LatentGrid, text_feature: &[f64]) -> Result<LatentGrid> {
        self.check_finite()?;
        self.check_latent(masked)?;
        self.check_text_feature(text_feature)?;
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, |_| false);
        let x = tape.constant(latent_tensor(masked));
        let tf = tape.constant(Tensor::row(text_feature.to_vec()));
        let out = self.reconstruct_on(&mut tape, &p, x, tf);
        Ok(tensor_latent(tape.value(out)))
    }

    /// Prompt-head logits for the given hidden rows.
    pub fn prompt_head(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.config.text_dim;
        if rows.iter().any(|r| r.len() != d) {
            return Err(shape("hidden rows must have length d"));
        }
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, |_| false);
        let x = tape.constant(Tensor::new(vec![rows.len(), d], rows.concat()));
        let out = self.prompt_logits(&mut tape, &p, x);
        Ok(tape
            .value(out)
            .data
            .chunks(self.config.vocab_size)
            .map(<[f64]>::to_vec)
            .collect())
    }
}
