//! Patch grid, mask budgets, motion-ranked patch selection and the masked
//! latent reconstruction loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, validation, Result};
use crate::flow::BoundingBox;

/// Partition of a `frame_width x frame_height` frame into equal patches,
/// together with the stride of the latent grid underneath it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub frame_width: usize,
    pub frame_height: usize,
    pub patch_width: usize,
    pub patch_height: usize,
    pub latent_stride: usize,
}

impl PatchGrid {
    pub fn new(
        frame_width: usize,
        frame_height: usize,
        patch_width: usize,
        patch_height: usize,
        latent_stride: usize,
    ) -> Result<Self> {
        let g = Self {
            frame_width,
            frame_height,
            patch_width,
            patch_height,
            latent_stride,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_width == 0 || self.patch_height == 0 || self.latent_stride == 0 {
            return Err(validation("patch size and stride must be positive"));
        }
        if self.frame_width == 0 || self.frame_height == 0 {
            return Err(validation("frame must be non-empty"));
        }
        if !self.frame_width.is_multiple_of(self.patch_width) || !self.frame_height.is_multiple_of(self.patch_height) {
            return Err(validation(format!(
                "patch {}x{} does not tile frame {}x{}",
                self.patch_width, self.patch_height, self.frame_width, self.frame_height
            )));
        }
        if !self.patch_width.is_multiple_of(self.latent_stride) || !self.patch_height.is_multiple_of(self.latent_stride) {
            return Err(validation(format!(
                "latent stride {} does not divide patch {}x{}",
                self.latent_stride, self.patch_width, self.patch_height
            )));
        }
        Ok(())
    }

    pub fn cols(&self) -> usize {
        self.frame_width / self.patch_width
    }

    pub fn rows(&self) -> usize {
        self.frame_height / self.patch_height
    }

    pub fn latent_width(&self) -> usize {
        self.frame_width / self.latent_stride
    }

    pub fn latent_height(&self) -> usize {
        self.frame_height / self.latent_stride
    }

    /// Latent cells per patch along x and y.
    pub fn latent_block(&self) -> (usize, usize) {
        (
            self.patch_width / self.latent_stride,
            self.patch_height / self.latent_stride,
        )
    }
}

pub fn patch_count(grid: &PatchGrid) -> usize {
    grid.rows() * grid.cols()
}

/// Patches whose centre lies inside the box (after clipping to the frame),
/// in ascending id order.
pub fn foreground_patch_set(grid: &PatchGrid, bbox: &BoundingBox) -> Vec<usize> {
    let Some(b) = bbox.clip(grid.frame_width, grid.frame_height) else {
        return Vec::new();
    };
    // Doubled coordinates keep the centre test in integers.
    let (x0, x1) = (2 * b.x, 2 * (b.x + b.w));
    let (y0, y1) = (2 * b.y, 2 * (b.y + b.h));
    let (pw, ph) = (grid.patch_width as i64, grid.patch_height as i64);
    let mut ids = Vec::new();
    for row in 0..grid.rows() {
        let cy = 2 * row as i64 * ph + ph;
        if cy < y0 || cy >= y1 {
            continue;
        }
        for col in 0..grid.cols() {
            let cx = 2 * col as i64 * pw + pw;
            if cx >= x0 && cx < x1 {
                ids.push(row * grid.cols() + col);
            }
        }
    }
    ids
}

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(validation(format!("{name} = {r} is outside [0, 1]")));
    }
    Ok(())
}

/// `floor(ratio * count)`. A 1e-9 guard absorbs binary representation error
/// so that e.g. `0.29 * 100` yields 29.
pub(crate) fn floor_fraction(ratio: f64, count: usize) -> usize {
    (((ratio * count as f64) + 1e-9).floor() as usize).min(count)
}

/// `(M_f, M_b) = (floor(r_f N_B), floor(r_b (N_p - N_B)))`.
pub fn mask_budgets(n_p: usize, n_b: usize, r_f: f64, r_b: f64) -> Result<(usize, usize)> {
    check_ratio("r_f", r_f)?;
    check_ratio("r_b", r_b)?;
    if n_b > n_p {
        return Err(validation(format!("N_B = {n_b} exceeds N_p = {n_p}")));
    }
    Ok((floor_fraction(r_f, n_b), floor_fraction(r_b, n_p - n_b)))
}

/// Patches selected for masking in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub frame_index: usize,
    /// Highest motion first; ties by ascending id.
    pub foreground_ids: Vec<usize>,
    /// Ascending.
    pub background_ids: Vec<usize>,
    pub budgets: (usize, usize),
    pub ratios: Option<(f64, f64)>,
}

impl MaskPlan {
    pub fn empty(frame_index: usize) -> Self {
        Self {
            frame_index,
            foreground_ids: Vec::new(),
            background_ids: Vec::new(),
            budgets: (0, 0),
            ratios: None,
        }
    }

    pub fn masked_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.foreground_ids.iter().chain(&self.background_ids).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground_ids.is_empty() && self.background_ids.is_empty()
    }
}

/// Picks the `M_f` most-moving foreground patches and `M_b` uniformly random
/// background patches. `intensities` is indexed by patch id.
pub fn plan_masks(
    intensities: &[f64],
    fg_set: &[usize],
    budgets: (usize, usize),
    seed: u64,
) -> Result<MaskPlan> {
    let n_p = intensities.len();
    let (m_f, m_b) = budgets;
    let mut is_fg = vec![false; n_p];
    for &id in fg_set {
        if id >= n_p {
            return Err(validation(format!("patch id {id} outside [0, {n_p})")));
        }
        if is_fg[id] {
            return Err(validation(format!("duplicate foreground patch id {id}")));
        }
        is_fg[id] = true;
    }
    if m_f > fg_set.len() {
        return Err(validation(format!(
            "M_f = {m_f} exceeds {} foreground patches",
            fg_set.len()
        )));
    }
    let complement: Vec<usize> = (0..n_p).filter(|&i| !is_fg[i]).collect();
    if m_b > complement.len() {
        return Err(validation(format!(
            "M_b = {m_b} exceeds {} background patches",
            complement.len()
        )));
    }

    let mut ranked = fg_set.to_vec();
    ranked.sort_by(|&a, &b| {
        intensities[b]
            .total_cmp(&intensities[a])
            .then_with(|| a.cmp(&b))
    });
    ranked.truncate(m_f);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut background: Vec<usize> = rand::seq::index::sample(&mut rng, complement.len(), m_b)
        .into_iter()
        .map(|i| complement[i])
        .collect();
    background.sort_unstable();

    Ok(MaskPlan {
        frame_index: 0,
        foreground_ids: ranked,
        background_ids: background,
        budgets,
        ratios: None,
    })
}

/// Budgets plus selection for one frame. A missing or empty detection falls
/// back to masking `floor(r_b N_p)` patches anywhere in the frame.
pub fn plan_frame(
    grid: &PatchGrid,
    frame_index: usize,
    intensities: &[f64],
    detection: Option<&BoundingBox>,
    ratios: (f64, f64),
    seed: u64,
) -> Result<MaskPlan> {
    let n_p = patch_count(grid);
    if intensities.len() != n_p {
        return Err(shape(format!(
            "{} intensities for {n_p} patches",
            intensities.len()
        )));
    }
    let fg = detection
        .map(|b| foreground_patch_set(grid, b))
        .unwrap_or_default();
    let budgets = mask_budgets(n_p, fg.len(), ratios.0, ratios.1)?;
    let mut plan = plan_masks(intensities, &fg, budgets, seed)?;
    plan.frame_index = frame_index;
    plan.ratios = Some(ratios);
    Ok(plan)
}

/// Latent tensor `T x C x H' x W'`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; frames * channels * height * width],
        }
    }

    pub fn from_vec(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != frames * channels * height * width {
            return Err(shape(format!(
                "{} values for latent {frames}x{channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * self.channels + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(t, c, y, x)]
    }
}

/// Per-cell flag: `true` where a masked patch covers the latent cell.
pub fn masked_cells(latent: &LatentGrid, plans: &[MaskPlan], grid: &PatchGrid) -> Result<Vec<bool>> {
    if latent.height != grid.latent_height() || latent.width != grid.latent_width() {
        return Err(shape(format!(
            "latent {}x{} does not match grid latent {}x{}",
            latent.height,
            latent.width,
            grid.latent_height(),
            grid.latent_width()
        )));
    }
    let n_p = patch_count(grid);
    let (bw, bh) = grid.latent_block();
    let mut flags = vec![false; latent.data.len()];
    for plan in plans {
        if plan.frame_index >= latent.frames {
            return Err(shape(format!(
                "plan for frame {} but latent has {} frames",
                plan.frame_index, latent.frames
            )));
        }
        for id in plan.masked_ids() {
            if id >= n_p {
                return Err(validation(format!("patch id {id} outside [0, {n_p})")));
            }
            let (row, col) = (id / grid.cols(), id % grid.cols());
            for c in 0..latent.channels {
                for y in row * bh..(row + 1) * bh {
                    for x in col * bw..(col + 1) * bw {
                        flags[latent.index(plan.frame_index, c, y, x)] = true;
                    }
                }
            }
        }
    }
    Ok(flags)
}

/// Zeroes the latent block under every masked patch; the input is untouched.
pub fn apply_mask_to_latent(
    latent: &LatentGrid,
    plans: &[MaskPlan],
    grid: &PatchGrid,
) -> Result<LatentGrid> {
    let flags = masked_cells(latent, plans, grid)?;
    let mut out = latent.clone();
    for (v, &m) in out.data.iter_mut().zip(&flags) {
        if m {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Mean squared error over latent cells under masked patches only.
pub fn video_reconstruction_loss(
    reconstructed: &LatentGrid,
    original: &LatentGrid,
    plans: &[MaskPlan],
    grid: &PatchGrid,
) -> Result<f64> {
    if reconstructed.dims() != original.dims() {
        return Err(shape(format!(
            "reconstruction {:?} vs original {:?}",
            reconstructed.dims(),
            original.dims()
        )));
    }
    let flags = masked_cells(original, plans, grid)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((r, o), &m) in reconstructed.data.iter().zip(&original.data).zip(&flags) {
        if m {
            sum += (r - o) * (r - o);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Binary raster of a plan at pixel resolution: 1 on masked patches.
pub fn rasterize_plan(plan: &MaskPlan, grid: &PatchGrid) -> Vec<f64> {
    let mut img = vec![0.0; grid.frame_width * grid.frame_height];
    for id in plan.masked_ids() {
        let (row, col) = (id / grid.cols(), id % grid.cols());
        for y in row * grid.patch_height..(row + 1) * grid.patch_height {
            let line = &mut img[y * grid.frame_width..(y + 1) * grid.frame_width];
            line[col * grid.patch_width..(col + 1) * grid.patch_width].fill(1.0);
        }
    }
    img
}
