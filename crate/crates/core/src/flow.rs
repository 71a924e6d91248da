//! Flow fields, bounding boxes, their file formats, and the detector / flow
//! estimator plug-in points.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{shape, validation, Error, Result};
use crate::masking::PatchGrid;
use crate::scene::{SyntheticScene, Video};

const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// Dense per-pixel displacement `(u, v)` stored row-major and interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            vectors: vec![0.0; 2 * width * height],
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        let mut f = Self::zeros(width, height);
        for pair in f.vectors.chunks_exact_mut(2) {
            pair[0] = u;
            pair[1] = v;
        }
        f
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.vectors[i], self.vectors[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: f32, v: f32) {
        let i = 2 * (y * self.width + x);
        self.vectors[i] = u;
        self.vectors[i + 1] = v;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.vectors.len());
        out.extend_from_slice(FLO_MAGIC);
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Length {
                expected: 12,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != FLO_MAGIC {
            return Err(Error::Format(format!(
                "bad .flo magic {:?}",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if width < 0 || height < 0 {
            return Err(Error::Format(format!("negative dimensions {width}x{height}")));
        }
        let (width, height) = (width as usize, height as usize);
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(12))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Length {
                expected,
                found: bytes.len(),
            });
        }
        let vectors: Vec<f32> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite flow component at index {i}")));
        }
        Ok(Self {
            width,
            height,
            vectors,
        })
    }
}

pub fn write_flow_file(field: &FlowField, path: &Path) -> Result<()> {
    fs::write(path, field.to_bytes())?;
    Ok(())
}

pub fn read_flow_file(path: &Path) -> Result<FlowField> {
    FlowField::from_bytes(&fs::read(path)?)
}

/// Axis-aligned box with top-left corner `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl BoundingBox {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> i64 {
        self.w.max(0) * self.h.max(0)
    }

    /// Intersection with `[0, width) x [0, height)`; `None` when empty.
    pub fn clip(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = (self.x + self.w.max(0)).min(width as i64);
        let y1 = (self.y + self.h.max(0)).min(height as i64);
        (x1 > x0 && y1 > y0).then(|| BoundingBox::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// One line of a box stream: `{"t":..,"x":..,"y":..,"w":..,"h":..}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub t: usize,
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl BoxRecord {
    pub fn from_box(t: usize, b: &BoundingBox) -> Self {
        Self {
            t,
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
        }
    }

    pub fn to_box(&self) -> BoundingBox {
        BoundingBox::new(self.x, self.y, self.w, self.h)
    }
}

pub fn write_box_stream(boxes: &[BoundingBox], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for (t, b) in boxes.iter().enumerate() {
        writeln!(f, "{}", serde_json::to_string(&BoxRecord::from_box(t, b))?)?;
    }
    Ok(())
}

pub fn read_box_stream(path: &Path) -> Result<Vec<BoxRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Mean flow magnitude per patch, in row-major patch order.
pub fn patch_motion_intensity(flow: &FlowField, grid: &PatchGrid) -> Result<Vec<f64>> {
    if flow.width != grid.frame_width || flow.height != grid.frame_height {
        return Err(shape(format!(
            "flow is {}x{}, grid expects {}x{}",
            flow.width, flow.height, grid.frame_width, grid.frame_height
        )));
    }
    let (cols, rows) = (grid.cols(), grid.rows());
    let mut sums = vec![0.0f64; cols * rows];
    for y in 0..flow.height {
        let row = y / grid.patch_height;
        for x in 0..flow.width {
            let (u, v) = flow.get(x, y);
            let (u, v) = (u as f64, v as f64);
            sums[row * cols + x / grid.patch_width] += (u * u + v * v).sqrt();
        }
    }
    let area = (grid.patch_width * grid.patch_height) as f64;
    Ok(sums.into_iter().map(|s| s / area).collect())
}

/// Produces at most one box per frame.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, video: &Video, t: usize) -> Result<Option<BoundingBox>>;
}

/// Produces the flow from frame `t` to frame `t + 1`.
pub trait FlowEstimator: Send + Sync {
    fn name(&self) -> &str;
    fn estimate(&self, video: &Video, t: usize) -> Result<FlowField>;
}

/// Replays boxes known in advance (synthetic ground truth or a box stream).
pub struct RecordedDetector {
    boxes: Vec<BoundingBox>,
}

impl RecordedDetector {
    pub fn new(boxes: Vec<BoundingBox>) -> Self {
        Self { boxes }
    }
}

impl Detector for RecordedDetector {
    fn name(&self) -> &str {
        "ground_truth"
    }

    fn detect(&self, _video: &Video, t: usize) -> Result<Option<BoundingBox>> {
        self.boxes.get(t).copied().map(Some).ok_or(Error::Index {
            index: t,
            len: self.boxes.len(),
        })
    }
}

/// Tight box around pixels (channel 0) that differ from the median border
/// value by more than `tolerance`.
pub struct ThresholdDetector {
    pub tolerance: f64,
}

impl Detector for ThresholdDetector {
    fn name(&self) -> &str {
        "threshold"
    }

    fn detect(&self, video: &Video, t: usize) -> Result<Option<BoundingBox>> {
        if t >= video.num_frames {
            return Err(Error::Index {
                index: t,
                len: video.num_frames,
            });
        }
        let (w, h) = (video.width, video.height);
        let mut border: Vec<f64> = (0..w)
            .flat_map(|x| [video.get(t, 0, 0, x), video.get(t, 0, h - 1, x)])
            .chain((0..h).flat_map(|y| [video.get(t, 0, y, 0), video.get(t, 0, y, w - 1)]))
            .collect();
        border.sort_by(f64::total_cmp);
        let bg = border[border.len() / 2];
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..h {
            for x in 0..w {
                if (video.get(t, 0, y, x) - bg).abs() > self.tolerance {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        Ok((x0 != usize::MAX).then(|| {
            BoundingBox::new(x0 as i64, y0 as i64, (x1 - x0) as i64, (y1 - y0) as i64)
        }))
    }
}

/// Replays precomputed flow fields.
pub struct RecordedFlow {
    flows: Vec<FlowField>,
}

impl RecordedFlow {
    pub fn new(flows: Vec<FlowField>) -> Self {
        Self { flows }
    }
}

impl FlowEstimator for RecordedFlow {
    fn name(&self) -> &str {
        "ground_truth"
    }

    fn estimate(&self, _video: &Video, t: usize) -> Result<FlowField> {
        self.flows.get(t).cloned().ok_or(Error::Index {
            index: t,
            len: self.flows.len(),
        })
    }
}

/// Reads `flow_####.flo` files from a directory.
pub struct FloDirectoryFlow {
    pub dir: PathBuf,
}

impl FlowEstimator for FloDirectoryFlow {
    fn name(&self) -> &str {
        "flo_dir"
    }

    fn estimate(&self, _video: &Video, t: usize) -> Result<FlowField> {
        read_flow_file(&self.dir.join(format!("flow_{t:04}.flo")))
    }
}

/// What a plug-in factory may draw on when it is instantiated.
#[derive(Default)]
pub struct PluginContext<'a> {
    pub scene: Option<&'a SyntheticScene>,
    pub flo_dir: Option<&'a Path>,
    pub box_stream: Option<&'a Path>,
}

type DetectorFactory = Box<dyn Fn(&PluginContext) -> Result<Box<dyn Detector>> + Send + Sync>;
type FlowFactory = Box<dyn Fn(&PluginContext) -> Result<Box<dyn FlowEstimator>> + Send + Sync>;

/// Name-keyed detector and flow estimator factories.
pub struct Registry {
    detectors: BTreeMap<String, DetectorFactory>,
    flows: BTreeMap<String, FlowFactory>,
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            detectors: BTreeMap::new(),
            flows: BTreeMap::new(),
        }
    }

    /// Built-ins: detectors `ground_truth`, `box_stream`, `threshold`;
    /// flow estimators `ground_truth`, `flo_dir`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register_detector("ground_truth", |ctx| {
            let scene = ctx
                .scene
                .ok_or_else(|| validation("ground_truth detector needs a scene"))?;
            Ok(Box::new(RecordedDetector::new(scene.boxes.clone())))
        });
        r.register_detector("box_stream", |ctx| {
            let path = ctx
                .box_stream
                .ok_or_else(|| validation("box_stream detector needs a box stream path"))?;
            let mut records = read_box_stream(path)?;
            records.sort_by_key(|r| r.t);
            Ok(Box::new(RecordedDetector::new(
                records.iter().map(BoxRecord::to_box).collect(),
            )))
        });
        r.register_detector("threshold", |_| Ok(Box::new(ThresholdDetector { tolerance: 1e-6 })));
        r.register_flow("ground_truth", |ctx| {
            let scene = ctx
                .scene
                .ok_or_else(|| validation("ground_truth flow needs a scene"))?;
            Ok(Box::new(RecordedFlow::new(scene.flows.clone())))
        });
        r.register_flow("flo_dir", |ctx| {
            let dir = ctx
                .flo_dir
                .ok_or_else(|| validation("flo_dir flow needs a directory"))?;
            Ok(Box::new(FloDirectoryFlow {
                dir: dir.to_path_buf(),
            }))
        });
        r
    }

    pub fn register_detector<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&PluginContext) -> Result<Box<dyn Detector>> + Send + Sync + 'static,
    {
        self.detectors.insert(name.to_string(), Box::new(factory));
    }

    pub fn register_flow<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&PluginContext) -> Result<Box<dyn FlowEstimator>> + Send + Sync + 'static,
    {
        self.flows.insert(name.to_string(), Box::new(factory));
    }

    pub fn detector(&self, name: &str, ctx: &PluginContext) -> Result<Box<dyn Detector>> {
        let f = self
            .detectors
            .get(name)
            .ok_or_else(|| validation(format!("unknown detector {name:?}")))?;
        f(ctx)
    }

    pub fn flow_estimator(&self, name: &str, ctx: &PluginContext) -> Result<Box<dyn FlowEstimator>> {
        let f = self
            .flows
            .get(name)
            .ok_or_else(|| validation(format!("unknown flow estimator {name:?}")))?;
        f(ctx)
    }
}
