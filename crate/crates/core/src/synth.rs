//! Procedural occlusion videos: static boxes and spheres packed on a ground
//! plane, a level camera orbiting them, and exact amodal ground truth from
//! per-object silhouettes.
//!
//! World coordinates are y-up with the ground at `y = 0`. Every frame is
//! ray-cast through pixel centers; the nearest hit wins. An object's full
//! mask is the set of pixels whose ray hits it at all, which is what a
//! render with only that object present would produce.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::mask::{BinaryMask, PixelBox};
use crate::rng::{derive_seed, stream, Purpose};
use crate::tensor::Tensor;

pub const MIN_OBJECTS: usize = 2;
pub const MAX_OBJECTS: usize = 8;
/// Hits closer than this along a ray are ignored.
const RAY_EPS: f64 = 1e-9;

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

/// Rotation about the world y axis.
fn rotate_y(p: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub dir: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        Self { origin, dir: normalize(dir) }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.dir, t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned in its local frame, then rotated by `yaw` about world y.
    Box { half_extents: Vec3, yaw: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub albedo: Vec3,
}

/// Nearest intersection with a sphere, by the quadratic formula.
pub fn ray_sphere(center: Vec3, radius: f64, ray: &Ray) -> Option<Hit> {
    let oc = sub(ray.origin, center);
    let b = dot(ray.dir, oc);
    let c = dot(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    let t = if -b - root > RAY_EPS { -b - root } else { -b + root };
    if t <= RAY_EPS {
        return None;
    }
    Some(Hit { t, normal: scale(sub(ray.at(t), center), 1.0 / radius) })
}

/// Nearest intersection with a yawed box, by the slab method in the box frame.
pub fn ray_box(center: Vec3, half: Vec3, yaw: f64, ray: &Ray) -> Option<Hit> {
    let o = rotate_y(sub(ray.origin, center), -yaw);
    let d = rotate_y(ray.dir, -yaw);
    let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut near_face, mut far_face) = ((0, 0.0), (0, 0.0));
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let t1 = (-half[a] - o[a]) / d[a];
        let t2 = (half[a] - o[a]) / d[a];
        // Entering through the face the ray points into.
        let (enter, exit, enter_sign) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
        if enter > t_near {
            t_near = enter;
            near_face = (a, enter_sign);
        }
        if exit < t_far {
            t_far = exit;
            far_face = (a, -enter_sign);
        }
    }
    if t_far < t_near || t_far <= RAY_EPS {
        return None;
    }
    let (t, (axis, sign)) = if t_near > RAY_EPS { (t_near, near_face) } else { (t_far, far_face) };
    let mut n = [0.0; 3];
    n[axis] = sign;
    Some(Hit { t, normal: rotate_y(n, yaw) })
}

impl Primitive {
    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        match self.shape {
            Shape::Sphere { radius } => ray_sphere(self.center, radius, ray),
            Shape::Box { half_extents, yaw } => ray_box(self.center, half_extents, yaw, ray),
        }
    }

    /// Radius of the footprint circle on the ground plane.
    pub fn footprint(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents: h, .. } => h[0].hypot(h[2]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraOrbit {
    pub radius: f64,
    pub height: f64,
    pub start: f64,
    pub step: f64,
}

/// World-space camera frame: `right × down = forward`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub position: Vec3,
    pub right: Vec3,
    pub down: Vec3,
    pub forward: Vec3,
}

impl CameraOrbit {
    /// Level camera at angle `start + t·step`, looking at the vertical axis.
    pub fn pose(&self, t: usize) -> CameraPose {
        let angle = self.start + t as f64 * self.step;
        let (s, c) = angle.sin_cos();
        let forward = [-c, 0.0, -s];
        let down = [0.0, -1.0, 0.0];
        CameraPose {
            position: [self.radius * c, self.height, self.radius * s],
            right: cross(down, forward),
            down,
            forward,
        }
    }
}

impl CameraPose {
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let q = sub(p, self.position);
        [dot(q, self.right), dot(q, self.down), dot(q, self.forward)]
    }

    /// Ray through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, k: &CameraIntrinsics, x: usize, y: usize) -> Ray {
        let cx = (x as f64 + 0.5 - k.cx) / k.fx;
        let cy = (y as f64 + 0.5 - k.cy) / k.fy;
        let dir = add(add(scale(self.right, cx), scale(self.down, cy)), self.forward);
        Ray::new(self.position, dir)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    /// 3-4 objects, loosely packed.
    B,
    /// 5-8 objects, tightly packed, lower camera.
    D,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" | "b" => Ok(Difficulty::B),
            "D" | "d" => Ok(Difficulty::D),
            other => Err(Error::Config(format!("unknown difficulty {other:?} (expected B or D)"))),
        }
    }
}

struct Layout {
    objects: (usize, usize),
    spread: f64,
    gap: f64,
    camera_height: f64,
}

impl Difficulty {
    fn layout(self) -> Layout {
        match self {
            Difficulty::B => Layout { objects: (3, 4), spread: 1.2, gap: 0.08, camera_height: 0.7 },
            Difficulty::D => Layout { objects: (5, 8), spread: 1.35, gap: 0.0, camera_height: 0.45 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub orbit: CameraOrbit,
    pub frames: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.primitives.len();
        if !(MIN_OBJECTS..=MAX_OBJECTS).contains(&n) {
            return Err(Error::Config(format!("scene has {n} objects, expected {MIN_OBJECTS}..={MAX_OBJECTS}")));
        }
        if self.frames == 0 || self.image_size == 0 {
            return Err(Error::Config("scene needs at least one frame and one pixel".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::for_image(self.image_size)
    }
}

/// Index and hit of the nearest primitive along `ray`.
fn nearest(primitives: &[Primitive], ray: &Ray) -> Option<(usize, Hit)> {
    primitives
        .iter()
        .enumerate()
        .filter_map(|(k, p)| p.intersect(ray).map(|h| (k, h)))
        .min_by(|a, b| a.1.t.total_cmp(&b.1.t))
}

const LIGHT: Vec3 = [-0.36, 0.86, -0.36];
const SKY: Vec3 = [0.74, 0.81, 0.9];
const GROUND: Vec3 = [0.52, 0.48, 0.43];

fn shade(albedo: Vec3, normal: Vec3) -> Vec3 {
    let lambert = dot(normalize(LIGHT), normal).max(0.0);
    scale(albedo, 0.3 + 0.7 * lambert)
}

fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB, interleaved, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; 3 * height * width] }
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[3, H, W]` with values in `[0, 1]`.
    /// Binary PPM (P6) bytes.
    pub fn to_ppm(&self) -> Vec<u8> {
        netpbm("P6", self.width, self.height, &self.data)
    }

    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; 3 * h * w];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * h * w + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(&[3, h, w], out).expect("non-empty image")
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub image: RgbImage,
    pub visible: Vec<BinaryMask>,
    pub full: Vec<BinaryMask>,
    /// Object indices sorted by camera depth of their centers, nearest first.
    pub depth_order: Vec<usize>,
}

/// Renders frame `t`: shaded image, visible and full masks of every object.
pub fn render_frame(spec: &SceneSpec, t: usize) -> Frame {
    let pose = spec.orbit.pose(t);
    let k = spec.intrinsics();
    let n = spec.image_size;
    let objs = &spec.primitives;
    let mut image = RgbImage::new(n, n);
    let mut visible = vec![BinaryMask::empty(n, n); objs.len()];
    let mut full = vec![BinaryMask::empty(n, n); objs.len()];
    for y in 0..n {
        for x in 0..n {
            let ray = pose.pixel_ray(&k, x, y);
            let mut best: Option<(usize, Hit)> = None;
            for (i, p) in objs.iter().enumerate() {
                if let Some(h) = p.intersect(&ray) {
                    full[i].set(y, x, true);
                    if best.is_none_or(|(_, b)| h.t < b.t) {
                        best = Some((i, h));
                    }
                }
            }
            let color = match best {
                Some((i, h)) => {
                    visible[i].set(y, x, true);
                    shade(objs[i].albedo, h.normal)
                }
                None if ray.dir[1] < 0.0 => shade(GROUND, [0.0, 1.0, 0.0]),
                None => SKY,
            };
            image.put(y, x, color.map(quantize));
        }
    }
    let mut depth_order: Vec<usize> = (0..objs.len()).collect();
    depth_order.sort_by(|&a, &b| pose.to_camera(objs[a].center)[2].total_cmp(&pose.to_camera(objs[b].center)[2]));
    Frame { image, visible, full, depth_order }
}

/// Silhouette of object `k` alone: its amodal mask in frame `t`.
pub fn render_solo(spec: &SceneSpec, t: usize, k: usize) -> BinaryMask {
    let pose = spec.orbit.pose(t);
    let intr = spec.intrinsics();
    let n = spec.image_size;
    let mut m = BinaryMask::empty(n, n);
    for y in 0..n {
        for x in 0..n {
            if spec.primitives[k].intersect(&pose.pixel_ray(&intr, x, y)).is_some() {
                m.set(y, x, true);
            }
        }
    }
    m
}

/// Object that pixel `(x, y)` of frame `t` sees first, if any.
pub fn first_hit(spec: &SceneSpec, t: usize, x: usize, y: usize) -> Option<usize> {
    let ray = spec.orbit.pose(t).pixel_ray(&spec.intrinsics(), x, y);
    nearest(&spec.primitives, &ray).map(|(k, _)| k)
}

/// An object counts as partially occluded when at least this share of its
/// silhouette is hidden and some of it is visible.
pub const MIN_OCCLUDED_SHARE: f64 = 0.1;

pub fn partially_occluded(full: &BinaryMask, visible: &BinaryMask) -> bool {
    let total = full.count();
    let hidden = full.minus(visible).count();
    total > 0 && !visible.is_empty() && hidden as f64 >= MIN_OCCLUDED_SHARE * total as f64
}

fn frame_has_partial_occlusion(frame: &Frame) -> bool {
    frame.full.iter().zip(&frame.visible).any(|(m, v)| partially_occluded(m, v))
}

const MAX_SCENE_ATTEMPTS: usize = 200;
const MAX_PLACEMENT_TRIES: usize = 400;

fn random_albedo(rng: &mut impl Rng) -> Vec3 {
    // Saturated hue on a fixed brightness so objects stay distinguishable.
    let hue: f64 = rng.random_range(0.0..6.0);
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let lo = 0.12;
    [lo + (0.92 - lo) * r, lo + (0.92 - lo) * g, lo + (0.92 - lo) * b]
}

fn place_objects(rng: &mut impl Rng, layout: &Layout) -> Option<Vec<Primitive>> {
    let count = rng.random_range(layout.objects.0..=layout.objects.1);
    let mut placed: Vec<Primitive> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = if rng.random_bool(0.5) {
            Shape::Sphere { radius: rng.random_range(0.25..0.45) }
        } else {
            let h = [rng.random_range(0.18..0.4), rng.random_range(0.18..0.45), rng.random_range(0.18..0.4)];
            Shape::Box { half_extents: h, yaw: rng.random_range(0.0..PI / 2.0) }
        };
        let lift = match shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents, .. } => half_extents[1],
        };
        let albedo = random_albedo(rng);
        let mut ok = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let r = layout.spread * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..2.0 * PI);
            let cand = Primitive { shape, center: [r * a.cos(), lift, r * a.sin()], albedo };
            let clear = placed.iter().all(|p| {
                let dx = p.center[0] - cand.center[0];
                let dz = p.center[2] - cand.center[2];
                dx.hypot(dz) >= p.footprint() + cand.footprint() + layout.gap
            });
            if clear {
                ok = Some(cand);
                break;
            }
        }
        placed.push(ok?);
    }
    Some(placed)
}

/// Seeded scene with enforced occlusion: frame 0 and at least half of all
/// frames contain a partially occluded object.
pub fn generate_scene(seed: u64, difficulty: Difficulty, image_size: usize, frames: usize) -> Result<SceneSpec> {
    let layout = difficulty.layout();
    let mut rng = stream(seed, Purpose::Data);
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let Some(primitives) = place_objects(&mut rng, &layout) else {
            continue;
        };
        let orbit = CameraOrbit {
            radius: 5.0,
            height: layout.camera_height,
            start: rng.random_range(0.0..2.0 * PI),
            step: 2.0 * PI / frames as f64,
        };
        let spec = SceneSpec { primitives, orbit, frames, image_size, seed };
        spec.validate()?;
        let occluded: Vec<bool> = (0..frames).map(|t| frame_has_partial_occlusion(&render_frame(&spec, t))).collect();
        let count = occluded.iter().filter(|&&o| o).count();
        if occluded[0] && 2 * count >= frames {
            return Ok(spec);
        }
    }
    Err(Error::Data(format!("no scene with enough occlusion after {MAX_SCENE_ATTEMPTS} attempts (seed {seed})")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSequence {
    pub seed: u64,
    pub frames: Vec<RgbImage>,
    /// `full[t][k]`: amodal mask of object `k` in frame `t`.
    pub full: Vec<Vec<BinaryMask>>,
    /// `visible[t][k]`.
    pub visible: Vec<Vec<BinaryMask>>,
    /// `boxes[t][k]`: bounding box of the visible mask, `None` when hidden.
    pub boxes: Vec<Vec<Option<PixelBox>>>,
    pub intrinsics: Vec<CameraIntrinsics>,
}

impl RenderedSequence {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn object_count(&self) -> usize {
        self.full.first().map_or(0, Vec::len)
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.frames[0].height, self.frames[0].width)
    }

    /// Mean hidden share over every (frame, object) with a nonempty silhouette.
    pub fn occlusion_ratio(&self) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for (ft, vt) in self.full.iter().zip(&self.visible) {
            for (m, v) in ft.iter().zip(vt) {
                let c = m.count();
                if c > 0 {
                    total += m.minus(v).count() as f64 / c as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }
}

pub fn render_sequence(spec: &SceneSpec) -> RenderedSequence {
    let rendered: Vec<Frame> = (0..spec.frames).map(|t| render_frame(spec, t)).collect();
    let boxes = rendered.iter().map(|f| f.visible.iter().map(BinaryMask::bounding_box).collect()).collect();
    RenderedSequence {
        seed: spec.seed,
        boxes,
        intrinsics: vec![spec.intrinsics(); spec.frames],
        full: rendered.iter().map(|f| f.full.clone()).collect(),
        visible: rendered.iter().map(|f| f.visible.clone()).collect(),
        frames: rendered.into_iter().map(|f| f.image).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub sequences: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub image_size: usize,
    pub frames: usize,
}

/// Sequence `i` uses scene seed `derive_seed(seed, i)`; rendering runs on
/// the rayon pool and the output order is fixed.
pub fn generate_dataset(params: &DatasetParams) -> Result<Vec<RenderedSequence>> {
    (0..params.sequences)
        .into_par_iter()
        .map(|i| {
            let spec = generate_scene(derive_seed(params.seed, i as u64), params.difficulty, params.image_size, params.frames)?;
            Ok(render_sequence(&spec))
        })
        .collect()
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    sequences: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    image_w: usize,
    image_h: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceMeta {
    seed: u64,
    frames: usize,
    objects: usize,
    intrinsics: IntrinsicsRecord,
    /// `tracks[k][t]`.
    tracks: Vec<Vec<Option<PixelBox>>>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn netpbm(magic: &str, w: usize, h: usize, body: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(body);
    out
}

/// Parses a binary PPM/PGM with maxval 255; returns `(width, height, body)`.
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    if fields[0] != magic {
        return Err(bad(&format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("maxval must be 255"));
    }
    let channels = if magic == "P6" { 3 } else { 1 };
    let body = bytes.get(pos..).ok_or_else(|| bad("missing body"))?;
    if body.len() != w * h * channels {
        return Err(bad("body length does not match header"));
    }
    Ok((w, h, body))
}

pub fn sequence_dir_name(i: usize) -> String {
    format!("seq_{i:04}")
}

/// Writes the directory layout: `manifest.json`, then per sequence
/// `seq_XXXX/meta.json`, `frame_TT.ppm`, `full_TT_K.pgm`, `vis_TT_K.pgm`.
pub fn write_dataset(sequences: &[RenderedSequence], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = (0..sequences.len()).map(sequence_dir_name).collect();
    let manifest = Manifest { schema_version: SCHEMA_VERSION, sequences: names.clone() };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), json.as_bytes())?;
    for (seq, name) in sequences.iter().zip(&names) {
        let sdir = dir.join(name);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let (h, w) = seq.image_dims();
        let k = seq.intrinsics[0];
        let meta = SequenceMeta {
            seed: seq.seed,
            frames: seq.frame_count(),
            objects: seq.object_count(),
            intrinsics: IntrinsicsRecord { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, image_w: w, image_h: h },
            tracks: (0..seq.object_count()).map(|o| seq.boxes.iter().map(|b| b[o]).collect()).collect(),
        };
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        write_file(&sdir.join("meta.json"), json.as_bytes())?;
        for t in 0..seq.frame_count() {
            write_file(&sdir.join(format!("frame_{t:02}.ppm")), &netpbm("P6", w, h, &seq.frames[t].data))?;
            for o in 0..seq.object_count() {
                write_file(&sdir.join(format!("full_{t:02}_{o}.pgm")), &netpbm("P5", w, h, &seq.full[t][o].to_bytes()))?;
                write_file(&sdir.join(format!("vis_{t:02}_{o}.pgm")), &netpbm("P5", w, h, &seq.visible[t][o].to_bytes()))?;
            }
        }
    }
    Ok(())
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_mask(path: &Path, h: usize, w: usize) -> Result<BinaryMask> {
    let bytes = read_file(path)?;
    let (pw, ph, body) = parse_netpbm(&bytes, "P5", path)?;
    if (ph, pw) != (h, w) {
        return Err(Error::Data(format!("{}: size {pw}x{ph}, expected {w}x{h}", path.display())));
    }
    BinaryMask::from_bytes(h, w, body).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_sequence(sdir: &Path) -> Result<RenderedSequence> {
    let meta: SequenceMeta = parse_json(&sdir.join("meta.json"))?;
    let r = &meta.intrinsics;
    let k = CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy).map_err(|e| Error::Data(e.to_string()))?;
    let (h, w) = (r.image_h, r.image_w);
    if meta.frames == 0 || meta.tracks.len() != meta.objects || meta.tracks.iter().any(|t| t.len() != meta.frames) {
        return Err(Error::Data(format!("{}: inconsistent frame/object counts", sdir.display())));
    }
    let mut seq = RenderedSequence {
        seed: meta.seed,
        frames: Vec::new(),
        full: Vec::new(),
        visible: Vec::new(),
        boxes: (0..meta.frames).map(|t| meta.tracks.iter().map(|tr| tr[t]).collect()).collect(),
        intrinsics: vec![k; meta.frames],
    };
    for t in 0..meta.frames {
        let path = sdir.join(format!("frame_{t:02}.ppm"));
        let bytes = read_file(&path)?;
        let (pw, ph, body) = parse_netpbm(&bytes, "P6", &path)?;
        if (ph, pw) != (h, w) {
            return Err(Error::Data(format!("{}: size {pw}x{ph}, expected {w}x{h}", path.display())));
        }
        seq.frames.push(RgbImage { height: h, width: w, data: body.to_vec() });
        let mut full = Vec::with_capacity(meta.objects);
        let mut vis = Vec::with_capacity(meta.objects);
        for o in 0..meta.objects {
            full.push(load_mask(&sdir.join(format!("full_{t:02}_{o}.pgm")), h, w)?);
            vis.push(load_mask(&sdir.join(format!("vis_{t:02}_{o}.pgm")), h, w)?);
        }
        seq.full.push(full);
        seq.visible.push(vis);
    }
    Ok(seq)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<RenderedSequence>> {
    let manifest: Manifest = parse_json(&dir.join("manifest.json"))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "{}: schema version {} (expected {SCHEMA_VERSION})",
            dir.display(),
            manifest.schema_version
        )));
    }
    if manifest.sequences.is_empty() {
        return Err(Error::Data(format!("{}: dataset has no sequences", dir.display())));
    }
    manifest.sequences.iter().map(|name| load_sequence(&dir.join(name))).collect()
}

/// Paths of every file a dataset directory holds, sorted; for comparisons.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(d: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(d).map_err(|e| Error::io(d, e))? {
            let p = entry.map_err(|e| Error::io(d, e))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, &mut out)?;
    out.sort();
    Ok(out)
}
