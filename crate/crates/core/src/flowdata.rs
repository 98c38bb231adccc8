//! Synthetic video clips with exact labels, flow and occlusion masks, and the
//! on-disk dataset layout.
//!
//! Each clip shows textured rectangles and disks translating over a textured
//! background, optionally under a translating camera. Motion is in whole
//! pixels per frame, so the analytic flow reproduces the next frame exactly
//! wherever a correspondence exists. Frames additionally carry per-frame
//! sensor noise and transient "clutter" blobs of random colour that are not
//! part of the scene; they corrupt single frames without changing labels or
//! flow.
//!
//! Flow convention: `flows[k]` lives on the pixel grid of frame `k + 1` and
//! points at the source location in frame `k`, the form consumed by
//! [`crate::warp::warp_bilinear`]. `back_flows[k]` lives on frame `k` and
//! points into frame `k + 1`, which is what a chain running backward in time
//! consumes.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{GrfpError, Result};
use crate::io::{load_flow_file, load_tensor, save_flow_file, save_tensor, write_atomic, write_pgm, write_ppm, EXTENSION};
use crate::labels::LabelMap;
use crate::tensor::Tensor;
use crate::warp::FlowField;

/// Mean colour of each foreground class (class 0 is the background).
const CLASS_COLORS: [[f64; 3]; 8] = [
    [0.5, 0.5, 0.5],
    [0.85, 0.25, 0.2],
    [0.2, 0.75, 0.3],
    [0.25, 0.35, 0.9],
    [0.9, 0.8, 0.25],
    [0.7, 0.3, 0.8],
    [0.2, 0.8, 0.8],
    [0.95, 0.55, 0.2],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect { width: usize, height: usize },
    Disk { radius: usize },
}

/// One moving object. `position` is `(x, y)` in pixels at frame 0: the
/// top-left corner of a rectangle or the centre of a disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub class_id: u8,
    pub position: (i32, i32),
    pub velocity: (i32, i32),
    pub z_order: i32,
    pub texture_phase: f64,
}

impl ObjectSpec {
    fn origin(&self, frame: usize) -> (i32, i32) {
        let t = frame as i32;
        (self.position.0 + t * self.velocity.0, self.position.1 + t * self.velocity.1)
    }

    /// Object-local coordinates of image pixel `(i, j)` if the object covers it.
    fn local(&self, frame: usize, i: i32, j: i32) -> Option<(i32, i32)> {
        let (ox, oy) = self.origin(frame);
        let (ly, lx) = (i - oy, j - ox);
        let inside = match self.shape {
            ShapeKind::Rect { width, height } => {
                lx >= 0 && ly >= 0 && (lx as usize) < width && (ly as usize) < height
            }
            ShapeKind::Disk { radius } => {
                let r = radius as i32;
                lx * lx + ly * ly <= r * r
            }
        };
        inside.then_some((ly, lx))
    }
}

/// Full description of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub n_frames: usize,
    pub label_frame_index: usize,
    pub background_seed: u64,
    /// Whole-scene translation per frame `(vx, vy)`; background content moves by the opposite.
    pub camera_velocity: (i32, i32),
    pub objects: Vec<ObjectSpec>,
    /// Standard deviation of per-pixel, per-frame Gaussian noise.
    pub pixel_noise: f64,
    pub clutter_blobs: usize,
    pub clutter_radius: (usize, usize),
}

impl SceneSpec {
    pub fn max_displacement(&self) -> i32 {
        (self.height.min(self.width) / 4) as i32
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.n_frames == 0 {
            return Err(GrfpError::contract("scene needs a non-empty canvas and at least one frame"));
        }
        if self.n_classes < 2 || self.n_classes > CLASS_COLORS.len() {
            return Err(GrfpError::contract(format!(
                "scene supports 2..={} classes, got {}",
                CLASS_COLORS.len(),
                self.n_classes
            )));
        }
        if self.label_frame_index >= self.n_frames {
            return Err(GrfpError::contract(format!(
                "label frame {} outside {} frames",
                self.label_frame_index, self.n_frames
            )));
        }
        let bound = self.max_displacement();
        let too_fast = |(vx, vy): (i32, i32)| vx.abs() > bound || vy.abs() > bound;
        if too_fast(self.camera_velocity) {
            return Err(GrfpError::contract("camera displacement exceeds a quarter of the canvas"));
        }
        let mut z = HashSet::new();
        for o in &self.objects {
            if o.class_id == 0 || o.class_id as usize >= self.n_classes {
                return Err(GrfpError::contract(format!("object class {} outside 1..{}", o.class_id, self.n_classes)));
            }
            if too_fast(o.velocity) {
                return Err(GrfpError::contract(format!(
                    "object velocity {:?} exceeds {} px/frame",
                    o.velocity, bound
                )));
            }
            if !z.insert(o.z_order) {
                return Err(GrfpError::contract(format!("duplicate z-order {}", o.z_order)));
            }
        }
        Ok(())
    }

    /// Indices into [`SceneSpec::objects`], front-most first.
    fn front_to_back(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.objects.len()).collect();
        idx.sort_by_key(|&k| std::cmp::Reverse(self.objects[k].z_order));
        idx
    }

    /// Visible surface per pixel: `None` for background, else index into
    /// [`SceneSpec::objects`].
    pub fn surfaces(&self, frame: usize) -> Vec<Option<usize>> {
        let order = self.front_to_back();
        let mut out = vec![None; self.height * self.width];
        for i in 0..self.height {
            for j in 0..self.width {
                out[i * self.width + j] = order
                    .iter()
                    .copied()
                    .find(|&k| self.objects[k].local(frame, i as i32, j as i32).is_some());
            }
        }
        out
    }

    /// Ground-truth classes at any frame.
    pub fn render_labels(&self, frame: usize) -> LabelMap {
        let data = self
            .surfaces(frame)
            .into_iter()
            .map(|s| s.map_or(0, |k| self.objects[k].class_id))
            .collect();
        LabelMap::new(self.height, self.width, data).expect("canvas extents")
    }

    /// Displacement from frame `k` into frame `k + 1` of whatever surface is visible.
    fn forward_motion(&self, surface: Option<usize>) -> (i32, i32) {
        match surface {
            Some(k) => self.objects[k].velocity,
            None => (-self.camera_velocity.0, -self.camera_velocity.1),
        }
    }
}

/// Smooth procedural background texture in world coordinates.
struct Background {
    waves: Vec<(f64, f64, f64, f64, usize)>,
}

impl Background {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..6)
            .map(|k| {
                let freq = rng.random_range(0.08..0.3);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.03..0.07);
                (freq * angle.cos(), freq * angle.sin(), phase, amp, k % 3)
            })
            .collect();
        Background { waves }
    }

    fn color(&self, y: i32, x: i32) -> [f64; 3] {
        let mut c = [0.5; 3];
        for &(wx, wy, phase, amp, ch) in &self.waves {
            let s = amp * (wx * x as f64 + wy * y as f64 + phase).sin();
            c[ch] += s;
            c[(ch + 1) % 3] += 0.5 * s;
        }
        c
    }
}

fn object_color(o: &ObjectSpec, ly: i32, lx: i32) -> [f64; 3] {
    let base = CLASS_COLORS[o.class_id as usize];
    let stripe = 0.06 * (0.9 * (lx + ly) as f64 + o.texture_phase).sin();
    [base[0] + stripe, base[1] + stripe, base[2] + stripe]
}

/// A generated or loaded clip.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub frames: Vec<Tensor<f32>>,
    /// `flows[k]`: on frame `k + 1`, pointing back into frame `k`.
    pub flows: Vec<FlowField<f32>>,
    /// `back_flows[k]`: on frame `k`, pointing forward into frame `k + 1`.
    pub back_flows: Vec<FlowField<f32>>,
    /// `H × W × 2` per frame pair. Channel 0 flags pixels of frame `k + 1`
    /// with no correspondence in frame `k` (disocclusions, entries through the
    /// border); channel 1 flags pixels of frame `k` whose surface is covered
    /// by another one in frame `k + 1`. Pixels that merely leave the image are
    /// not flagged in channel 1.
    pub occlusions: Vec<Tensor<f32>>,
    pub labels: LabelMap,
    pub label_index: usize,
    pub n_classes: usize,
}

impl VideoSample {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 || self.flows.len() + 1 != n || self.back_flows.len() + 1 != n || self.occlusions.len() + 1 != n {
            return Err(GrfpError::contract(format!(
                "clip of {} frames has {} flows, {} backward flows, {} occlusion masks",
                n,
                self.flows.len(),
                self.back_flows.len(),
                self.occlusions.len()
            )));
        }
        if self.label_index >= n {
            return Err(GrfpError::contract("label frame outside clip"));
        }
        self.labels.validate(self.n_classes)
    }
}

/// Renders `spec` and derives flow, occlusion masks and labels analytically.
/// `seed` drives the per-frame noise and clutter.
pub fn generate_clip(spec: &SceneSpec, seed: u64) -> Result<VideoSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let bg = Background::new(spec.background_seed);
    let surfaces: Vec<Vec<Option<usize>>> = (0..spec.n_frames).map(|t| spec.surfaces(t)).collect();

    let mut frames = Vec::with_capacity(spec.n_frames);
    for (t, surf) in surfaces.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64 + 1);
        let noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).expect("finite sigma");
        let cam = (t as i32 * spec.camera_velocity.0, t as i32 * spec.camera_velocity.1);
        let mut img = Tensor::zeros(&[h, w, 3]);
        for i in 0..h {
            for j in 0..w {
                let c = match surf[i * w + j] {
                    None => bg.color(i as i32 + cam.1, j as i32 + cam.0),
                    Some(k) => {
                        let o = &spec.objects[k];
                        let (ly, lx) = o.local(t, i as i32, j as i32).expect("visible surface covers pixel");
                        object_color(o, ly, lx)
                    }
                };
                for ch in 0..3 {
                    let n = if spec.pixel_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    img.set(i, j, ch, (c[ch] + n).clamp(0.0, 1.0) as f32);
                }
            }
        }
        for _ in 0..spec.clutter_blobs {
            let (rmin, rmax) = spec.clutter_radius;
            let r = rng.random_range(rmin..=rmax.max(rmin)) as i32;
            let cy = rng.random_range(0..h as i32);
            let cx = rng.random_range(0..w as i32);
            for i in (cy - r).max(0)..(cy + r + 1).min(h as i32) {
                for j in (cx - r).max(0)..(cx + r + 1).min(w as i32) {
                    if (i - cy).pow(2) + (j - cx).pow(2) <= r * r {
                        for ch in 0..3 {
                            img.set(i as usize, j as usize, ch, rng.random::<f32>());
                        }
                    }
                }
            }
        }
        frames.push(img);
    }

    let inside = |y: i32, x: i32| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
    let mut flows = Vec::new();
    let mut back_flows = Vec::new();
    let mut occlusions = Vec::new();
    for k in 0..spec.n_frames.saturating_sub(1) {
        let (cur, next) = (&surfaces[k], &surfaces[k + 1]);
        let mut fwd = Tensor::zeros(&[h, w, 2]);
        let mut bwd = Tensor::zeros(&[h, w, 2]);
        let mut occ = Tensor::zeros(&[h, w, 2]);
        for i in 0..h {
            for j in 0..w {
                // pixel of frame k+1, traced back into frame k
                let s = next[i * w + j];
                let (vx, vy) = spec.forward_motion(s);
                fwd.set(i, j, 0, -vx as f32);
                fwd.set(i, j, 1, -vy as f32);
                let (py, px) = (i as i32 - vy, j as i32 - vx);
                if !inside(py, px) || cur[py as usize * w + px as usize] != s {
                    occ.set(i, j, 0, 1.0);
                }
                // pixel of frame k, traced forward into frame k+1
                let s = cur[i * w + j];
                let (vx, vy) = spec.forward_motion(s);
                bwd.set(i, j, 0, vx as f32);
                bwd.set(i, j, 1, vy as f32);
                let (qy, qx) = (i as i32 + vy, j as i32 + vx);
                if inside(qy, qx) && next[qy as usize * w + qx as usize] != s {
                    occ.set(i, j, 1, 1.0);
                }
            }
        }
        flows.push(FlowField::new(fwd)?);
        back_flows.push(FlowField::new(bwd)?);
        occlusions.push(occ);
    }

    let sample = VideoSample {
        frames,
        flows,
        back_flows,
        occlusions,
        labels: spec.render_labels(spec.label_frame_index),
        label_index: spec.label_frame_index,
        n_classes: spec.n_classes,
    };
    sample.validate()?;
    Ok(sample)
}

/// Adds i.i.d. Gaussian displacement noise of standard deviation `sigma` pixels.
pub fn perturb_flow<R: Rng>(flow: &FlowField<f32>, sigma: f64, rng: &mut R) -> FlowField<f32> {
    if sigma <= 0.0 {
        return flow.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut t = flow.tensor().clone();
    for v in t.data_mut() {
        *v += normal.sample(rng) as f32;
    }
    FlowField::new(t).expect("same shape")
}

/// Random scene distribution from which each clip's [`SceneSpec`] is drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTemplate {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Frames up to and including the labelled one.
    pub n_frames: usize,
    /// Extra frames rendered after the labelled frame for backward chains.
    pub frames_after_label: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub max_speed: i32,
    pub max_camera_speed: i32,
    pub pixel_noise: f64,
    pub clutter_blobs: usize,
    pub clutter_min_radius: usize,
    pub clutter_max_radius: usize,
}

impl Default for SceneTemplate {
    /// 64×64 canvas, 5 classes, 5 frames labelled at the last one.
    fn default() -> Self {
        SceneTemplate {
            height: 64,
            width: 64,
            n_classes: 5,
            n_frames: 5,
            frames_after_label: 0,
            min_objects: 3,
            max_objects: 5,
            min_size: 8,
            max_size: 20,
            max_speed: 3,
            max_camera_speed: 1,
            pixel_noise: 0.08,
            clutter_blobs: 9,
            clutter_min_radius: 3,
            clutter_max_radius: 7,
        }
    }
}

macro_rules! template_fields {
    ($m:ident) => {
        $m!(height, width, n_classes, n_frames, frames_after_label, min_objects, max_objects, min_size, max_size, max_speed, max_camera_speed, pixel_noise, clutter_blobs, clutter_min_radius, clutter_max_radius)
    };
}

impl SceneTemplate {
    pub fn label_frame_index(&self) -> usize {
        self.n_frames - 1
    }

    pub fn total_frames(&self) -> usize {
        self.n_frames + self.frames_after_label
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.min_objects > self.max_objects || self.min_size > self.max_size || self.min_size < 2 {
            return Err(GrfpError::contract(format!("inconsistent scene template {self:?}")));
        }
        if self.clutter_min_radius > self.clutter_max_radius {
            return Err(GrfpError::contract("clutter radius range is empty"));
        }
        Ok(())
    }

    /// Draws a scene. Objects are placed so they sit inside the canvas at the
    /// labelled frame.
    pub fn sample(&self, seed: u64) -> Result<SceneSpec> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ce4e);
        let label = self.label_frame_index() as i32;
        let n_objects = rng.random_range(self.min_objects..=self.max_objects);
        let mut z: Vec<i32> = (0..n_objects as i32).collect();
        for k in (1..z.len()).rev() {
            z.swap(k, rng.random_range(0..=k));
        }
        let speed = self.max_speed.min((self.height.min(self.width) / 4) as i32);
        let objects = (0..n_objects)
            .map(|k| {
                let size = rng.random_range(self.min_size..=self.max_size);
                let (shape, extent) = if rng.random_bool(0.5) {
                    let other = rng.random_range(self.min_size..=self.max_size);
                    (ShapeKind::Rect { width: size, height: other }, (size, other))
                } else {
                    let r = (size / 2).max(1);
                    (ShapeKind::Disk { radius: r }, (0, 0))
                };
                let class_id = rng.random_range(1..self.n_classes) as u8;
                let velocity = (rng.random_range(-speed..=speed), rng.random_range(-speed..=speed));
                let at_label = match shape {
                    ShapeKind::Rect { .. } => (
                        rng.random_range(0..=(self.width.saturating_sub(extent.0)) as i32),
                        rng.random_range(0..=(self.height.saturating_sub(extent.1)) as i32),
                    ),
                    ShapeKind::Disk { radius } => {
                        let r = radius as i32;
                        (
                            rng.random_range(r.min(self.width as i32 - 1)..=(self.width as i32 - 1 - r).max(r)),
                            rng.random_range(r.min(self.height as i32 - 1)..=(self.height as i32 - 1 - r).max(r)),
                        )
                    }
                };
                ObjectSpec {
                    shape,
                    class_id,
                    position: (at_label.0 - label * velocity.0, at_label.1 - label * velocity.1),
                    velocity,
                    z_order: z[k],
                    texture_phase: rng.random_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        let cam = self.max_camera_speed.min(speed);
        Ok(SceneSpec {
            height: self.height,
            width: self.width,
            n_classes: self.n_classes,
            n_frames: self.total_frames(),
            label_frame_index: self.label_frame_index(),
            background_seed: rng.random(),
            camera_velocity: (rng.random_range(-cam..=cam), rng.random_range(-cam..=cam)),
            objects,
            pixel_noise: self.pixel_noise,
            clutter_blobs: self.clutter_blobs,
            clutter_radius: (self.clutter_min_radius, self.clutter_max_radius),
        })
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        macro_rules! emit {
            ($($f:ident),*) => { $( s.push_str(&format!("{} = {}\n", stringify!($f), self.$f)); )* };
        }
        template_fields!(emit);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut t = SceneTemplate::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GrfpError::contract(format!("template line {line:?} is not key = value")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || GrfpError::contract(format!("bad template value {k} = {v}"));
            macro_rules! parse {
                ($($f:ident),*) => {
                    match k {
                        $( stringify!($f) => t.$f = v.parse().map_err(|_| bad())?, )*
                        _ => return Err(GrfpError::contract(format!("unknown template key {k}"))),
                    }
                };
            }
            template_fields!(parse);
        }
        t.validate()?;
        Ok(t)
    }
}

impl fmt::Display for SceneTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}×{} canvas, {} classes, {} frames labelled at frame {} (+{} after), {}-{} objects of {}-{} px, speed ≤ {} px/frame, camera ≤ {}, noise σ={}, {} clutter blobs r={}-{}",
            self.height,
            self.width,
            self.n_classes,
            self.n_frames,
            self.label_frame_index(),
            self.frames_after_label,
            self.min_objects,
            self.max_objects,
            self.min_size,
            self.max_size,
            self.max_speed,
            self.max_camera_speed,
            self.pixel_noise,
            self.clutter_blobs,
            self.clutter_min_radius,
            self.clutter_max_radius
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(GrfpError::contract(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
}

pub const DATASET_MANIFEST: &str = "manifest.txt";
pub const TEMPLATE_FILE: &str = "template.txt";

/// An opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub template: SceneTemplate,
    pub clips: Vec<ClipEntry>,
}

fn tensor_file(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.{EXTENSION}"))
}

/// Writes one clip directory: frames, both flow directions, occlusion masks,
/// the label map and a `meta.txt`.
pub fn write_clip(dir: &Path, clip: &VideoSample, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GrfpError::io(dir, e))?;
    for (k, f) in clip.frames.iter().enumerate() {
        save_tensor(f, &tensor_file(dir, &format!("frame_{k}")))?;
    }
    for k in 0..clip.flows.len() {
        save_flow_file(&clip.flows[k], &tensor_file(dir, &format!("flow_{k}")))?;
        save_flow_file(&clip.back_flows[k], &tensor_file(dir, &format!("bflow_{k}")))?;
        save_tensor(&clip.occlusions[k], &tensor_file(dir, &format!("occl_{k}")))?;
    }
    save_tensor(&clip.labels.to_tensor(), &tensor_file(dir, "label"))?;
    let meta = format!(
        "n_frames = {}\nlabel_frame_index = {}\nn_classes = {}\nseed = {}\n",
        clip.n_frames(),
        clip.label_index,
        clip.n_classes,
        seed
    );
    write_atomic(&dir.join("meta.txt"), meta.as_bytes())
}

fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn read_clip(dir: &Path) -> Result<VideoSample> {
    let meta_path = dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path).map_err(|e| GrfpError::io(&meta_path, e))?;
    let kv = parse_kv(&meta);
    let get = |key: &str| -> Result<usize> {
        kv.iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| GrfpError::contract(format!("{}: missing or bad {key}", meta_path.display())))
    };
    let n = get("n_frames")?;
    let mut clip = VideoSample {
        frames: Vec::with_capacity(n),
        flows: Vec::new(),
        back_flows: Vec::new(),
        occlusions: Vec::new(),
        labels: LabelMap::from_tensor(&load_tensor(&tensor_file(dir, "label"))?)?,
        label_index: get("label_frame_index")?,
        n_classes: get("n_classes")?,
    };
    for k in 0..n {
        clip.frames.push(load_tensor(&tensor_file(dir, &format!("frame_{k}")))?);
    }
    for k in 0..n.saturating_sub(1) {
        clip.flows.push(load_flow_file(&tensor_file(dir, &format!("flow_{k}")))?);
        clip.back_flows.push(load_flow_file(&tensor_file(dir, &format!("bflow_{k}")))?);
        clip.occlusions.push(load_tensor(&tensor_file(dir, &format!("occl_{k}")))?);
    }
    clip.validate()?;
    Ok(clip)
}

/// Writes PPM frames and a PGM label map next to a clip for inspection.
pub fn export_clip_images(dir: &Path, clip: &VideoSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GrfpError::io(dir, e))?;
    for (k, f) in clip.frames.iter().enumerate() {
        write_ppm(f, &dir.join(format!("frame_{k}.ppm")))?;
    }
    write_pgm(&clip.labels, &dir.join("label.pgm"))
}

/// Sizes of the three splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 20,
            val: 5,
            test: 5,
        }
    }
}

/// Generates and writes a full dataset. Clip seeds are distinct draws from
/// `master_seed`; the result depends on nothing else.
pub fn make_dataset(
    root: &Path,
    sizes: SplitSizes,
    template: &SceneTemplate,
    master_seed: u64,
    overwrite: bool,
) -> Result<Dataset> {
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(GrfpError::contract("every split needs at least one clip"));
    }
    template.validate()?;
    if root.exists() {
        let non_empty = fs::read_dir(root)
            .map_err(|e| GrfpError::io(root, e))?
            .next()
            .is_some();
        if non_empty {
            if !overwrite {
                return Err(GrfpError::contract(format!(
                    "{} exists and is not empty; pass overwrite to replace it",
                    root.display()
                )));
            }
            fs::remove_dir_all(root).map_err(|e| GrfpError::io(root, e))?;
        }
    }
    fs::create_dir_all(root.join("clips")).map_err(|e| GrfpError::io(root, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut seen = HashSet::new();
    let mut clips = Vec::new();
    let splits = [(Split::Train, sizes.train), (Split::Val, sizes.val), (Split::Test, sizes.test)];
    for (split, count) in splits {
        for _ in 0..count {
            let seed = loop {
                let s: u64 = rng.random();
                if seen.insert(s) {
                    break s;
                }
            };
            clips.push(ClipEntry {
                id: format!("clip_{:04}", clips.len()),
                seed,
                split,
            });
        }
    }

    clips.par_iter().try_for_each(|entry| -> Result<()> {
        let spec = template.sample(entry.seed)?;
        let clip = generate_clip(&spec, entry.seed)?;
        let tmp = root.join("clips").join(format!(".tmp_{}", entry.id));
        write_clip(&tmp, &clip, entry.seed)?;
        let dst = root.join("clips").join(&entry.id);
        fs::rename(&tmp, &dst).map_err(|e| GrfpError::io(&dst, e))
    })?;

    let mut manifest = String::new();
    for c in &clips {
        manifest.push_str(&format!("{} {} {}\n", c.id, c.seed, c.split.name()));
    }
    write_atomic(&root.join(DATASET_MANIFEST), manifest.as_bytes())?;
    for (split, _) in splits {
        let list: String = clips
            .iter()
            .filter(|c| c.split == split)
            .map(|c| format!("{}\n", c.id))
            .collect();
        write_atomic(&root.join(format!("{}.txt", split.name())), list.as_bytes())?;
    }
    write_atomic(&root.join(TEMPLATE_FILE), template.to_kv().as_bytes())?;
    Ok(Dataset {
        root: root.to_path_buf(),
        template: template.clone(),
        clips,
    })
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join(DATASET_MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| GrfpError::io(&mpath, e))?;
        let mut clips = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [id, seed, split] = parts[..] else {
                return Err(GrfpError::contract(format!("{}:{}: expected `id seed split`", mpath.display(), n + 1)));
            };
            clips.push(ClipEntry {
                id: id.to_string(),
                seed: seed
                    .parse()
                    .map_err(|_| GrfpError::contract(format!("{}:{}: bad seed", mpath.display(), n + 1)))?,
                split: Split::parse(split)?,
            });
        }
        let tpath = root.join(TEMPLATE_FILE);
        let template = SceneTemplate::from_kv(&fs::read_to_string(&tpath).map_err(|e| GrfpError::io(&tpath, e))?)?;
        Ok(Dataset {
            root: root.to_path_buf(),
            template,
            clips,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.template.n_classes
    }

    pub fn split(&self, split: Split) -> Vec<&ClipEntry> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }

    pub fn clip_dir(&self, entry: &ClipEntry) -> PathBuf {
        self.root.join("clips").join(&entry.id)
    }

    pub fn load(&self, entry: &ClipEntry) -> Result<VideoSample> {
        read_clip(&self.clip_dir(entry))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<VideoSample>> {
        self.split(split).into_iter().map(|e| self.load(e)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(objects: Vec<ObjectSpec>, frames: usize) -> SceneSpec {
        SceneSpec {
            height: 24,
            width: 24,
            n_classes: 3,
            n_frames: frames,
            label_frame_index: frames - 1,
            background_seed: 4,
            camera_velocity: (0, 0),
            objects,
            pixel_noise: 0.0,
            clutter_blobs: 0,
            clutter_radius: (1, 1),
        }
    }

    fn disk(class_id: u8, position: (i32, i32), velocity: (i32, i32), z: i32) -> ObjectSpec {
        ObjectSpec {
            shape: ShapeKind::Disk { radius: 4 },
            class_id,
            position,
            velocity,
            z_order: z,
            texture_phase: 0.3,
        }
    }

    #[test]
    fn static_disk_has_zero_flow() {
        let clip = generate_clip(&clean(vec![disk(1, (12, 12), (0, 0), 0)], 3), 1).unwrap();
        for f in &clip.flows {
            assert!(f.tensor().data().iter().all(|&v| v == 0.0));
        }
        assert!(clip.occlusions.iter().all(|o| o.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn moving_disk_flow_points_back_to_source() {
        let spec = clean(vec![disk(2, (8, 12), (2, 0), 0)], 2);
        let clip = generate_clip(&spec, 1).unwrap();
        let next = spec.render_labels(1);
        for i in 0..24 {
            for j in 0..24 {
                if next.get(i, j) == 2 {
                    assert_eq!(clip.flows[0].fx(i, j), -2.0);
                    assert_eq!(clip.flows[0].fy(i, j), 0.0);
                }
            }
        }
        assert_eq!(clip.back_flows[0].fx(12, 8), 2.0);
    }

    #[test]
    fn duplicate_z_orders_are_rejected() {
        let spec = clean(vec![disk(1, (5, 5), (0, 0), 1), disk(2, (15, 15), (0, 0), 1)], 2);
        assert!(matches!(generate_clip(&spec, 0), Err(GrfpError::Contract(_))));
    }

    #[test]
    fn excessive_velocity_is_rejected() {
        let spec = clean(vec![disk(1, (5, 5), (7, 0), 0)], 2);
        assert!(generate_clip(&spec, 0).is_err());
    }

    #[test]
    fn template_round_trips_through_text() {
        let t = SceneTemplate {
            frames_after_label: 4,
            pixel_noise: 0.125,
            ..SceneTemplate::default()
        };
        assert_eq!(SceneTemplate::from_kv(&t.to_kv()).unwrap(), t);
        assert!(SceneTemplate::from_kv("bogus = 1").is_err());
    }

    #[test]
    fn sampled_scene_is_valid_and_deterministic() {
        let t = SceneTemplate::default();
        let a = t.sample(17).unwrap();
        assert_eq!(a, t.sample(17).unwrap());
        a.validate().unwrap();
        assert_eq!((a.n_frames, a.label_frame_index), (5, 4));
    }
}
