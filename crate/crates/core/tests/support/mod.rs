//! Oracles and gradient checks shared by the unit tests and the acceptance runner.
#![allow(dead_code)]

use std::rc::Rc;

use amodal_core::fusion::{Direction, FusionDims, FusionLayer, TokenSet};
use amodal_core::geometry::{build_volume, volume_sample_table, BevCompressor, CameraIntrinsics, VoxelGridSpec};
use amodal_core::gradcheck::{project, random_tensor, GradCheck, GradCheckReport};
use amodal_core::kernels::SampleTable;
use amodal_core::rng::{stream, Purpose};
use amodal_core::segnet::{total_loss, LossConfig, ModelConfig, SegNet, VideoInput};
use amodal_core::synth::Ray;
use amodal_core::{BinaryMask, ParameterStore, Tape, Tensor, Var};
use rand::Rng;

pub const SEEDS: u64 = 20;

/// Worst case of one gradient check over all seeds.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub skipped: usize,
    pub seconds: f64,
}

impl Check {
    fn new(name: &str, tol: f64) -> Self {
        Self { name: name.to_string(), max_rel_err: 0.0, tol, checked: 0, skipped: 0, seconds: 0.0 }
    }

    fn absorb(&mut self, r: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(r.max_rel_err);
        self.checked += r.coords_checked;
        self.skipped += r.coords_skipped;
    }

    /// Within tolerance, with at most a tenth of the coordinates skipped at kinks.
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol && self.skipped * 10 <= self.checked
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.2e} (tol {:.0e}), {} coords, {} skipped at kinks, {:.1} s",
            self.name, self.max_rel_err, self.tol, self.checked, self.skipped, self.seconds
        )
    }
}

fn op<F>(out: &mut Vec<Check>, name: &str, shapes: &[&[usize]], tol: f64, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> amodal_core::Result<Var<'t>>,
{
    let started = std::time::Instant::now();
    let mut c = Check::new(name, tol);
    for seed in 0..SEEDS {
        let mut rng = stream(seed, Purpose::Data);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        c.absorb(&GradCheck { seed, ..GradCheck::default() }.run(&inputs, &f).unwrap());
    }
    c.seconds = started.elapsed().as_secs_f64();
    out.push(c);
}

/// Every differentiable tape operation on small random shapes.
pub fn op_gradchecks() -> Vec<Check> {
    const TOL: f64 = 1e-4;
    let mut out = Vec::new();
    let o = &mut out;
    op(o, "add", &[&[3, 4], &[4]], TOL, |t, x| project(t, x[0].add(x[1])?, 1));
    op(o, "sub", &[&[3, 1], &[1, 4]], TOL, |t, x| project(t, x[0].sub(x[1])?, 1));
    op(o, "mul", &[&[2, 3], &[2, 3]], TOL, |t, x| project(t, x[0].mul(x[1])?, 1));
    op(o, "div", &[&[2, 3], &[3]], TOL, |t, x| project(t, x[0].div(x[1].mul(x[1])?.add_scalar(0.5))?, 1));
    op(o, "scalar ops", &[&[5]], TOL, |t, x| project(t, x[0].mul_scalar(-1.7).add_scalar(0.3), 1));
    op(o, "sigmoid", &[&[6]], TOL, |t, x| project(t, x[0].mul_scalar(3.0).sigmoid(), 1));
    op(o, "log", &[&[6]], TOL, |t, x| project(t, x[0].mul(x[0])?.add_scalar(0.2).log(), 1));
    op(o, "pow", &[&[6]], TOL, |t, x| project(t, x[0].mul(x[0])?.add_scalar(0.5).pow(1.7), 1));
    op(o, "exp", &[&[6]], TOL, |t, x| project(t, x[0].exp(), 1));
    op(o, "relu", &[&[6]], TOL, |t, x| project(t, x[0].relu(), 1));
    op(o, "gelu", &[&[6]], TOL, |t, x| project(t, x[0].mul_scalar(2.0).gelu(), 1));
    op(o, "tanh", &[&[6]], TOL, |t, x| project(t, x[0].tanh(), 1));

    op(o, "reshape", &[&[2, 6]], TOL, |t, x| project(t, x[0].reshape(&[3, 4])?, 1));
    op(o, "permute", &[&[2, 3, 4]], TOL, |t, x| project(t, x[0].permute(&[2, 0, 1])?, 1));
    op(o, "transpose", &[&[3, 5]], TOL, |t, x| project(t, x[0].transpose()?, 1));
    op(o, "concat", &[&[2, 3], &[2, 2]], TOL, |t, x| project(t, t.concat(&[x[0], x[1], x[0]], 1)?, 1));
    op(o, "slice", &[&[4, 5]], TOL, |t, x| project(t, x[0].slice(1, 1, 3)?, 1));
    op(o, "sum_axis", &[&[3, 4, 2]], TOL, |t, x| project(t, x[0].sum_axis(1)?, 1));
    op(o, "mean_axis", &[&[3, 4]], TOL, |t, x| project(t, x[0].mean_axis(0)?, 1));
    op(o, "mean_all", &[&[3, 4]], TOL, |_, x| Ok(x[0].mul(x[0])?.mean_all()));

    op(o, "matmul", &[&[3, 4], &[4, 2]], 1e-6, |t, x| project(t, x[0].matmul(x[1])?, 1));
    op(o, "batched matmul", &[&[2, 3, 4], &[4, 2]], TOL, |t, x| project(t, x[0].matmul(x[1])?, 1));
    op(o, "attention", &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 3]], TOL, |t, x| project(t, x[0].attention(x[1], x[2], 0.7)?, 1));
    op(o, "softmax", &[&[3, 5]], TOL, |t, x| project(t, x[0].mul_scalar(2.0).softmax(1)?, 1));
    op(o, "softmax axis0", &[&[4, 3]], TOL, |t, x| project(t, x[0].softmax(0)?, 1));
    op(o, "layer_norm", &[&[3, 5], &[5], &[5]], 1e-5, |t, x| project(t, x[0].layer_norm(1, x[1], x[2])?, 1));

    op(o, "conv2d", &[&[2, 3, 5, 5], &[4, 3, 3, 3]], 1e-6, |t, x| project(t, x[0].conv2d(x[1], 1, 1)?, 1));
    op(o, "conv2d stride", &[&[1, 2, 6, 6], &[3, 2, 3, 3]], TOL, |t, x| project(t, x[0].conv2d(x[1], 2, 1)?, 1));
    op(o, "conv_transpose2d", &[&[2, 3, 3, 3], &[3, 2, 4, 4]], 1e-6, |t, x| {
        project(t, x[0].conv_transpose2d(x[1], 2, 1)?, 1)
    });

    let mut rng = stream(99, Purpose::Data);
    let points: Vec<(f64, f64)> =
        (0..12).map(|_| (rng.random_range(-1.0..5.0), rng.random_range(-1.0..4.0))).collect();
    let table = Rc::new(SampleTable::new(4, 5, &points));
    op(o, "bilinear_sample", &[&[3, 4, 5]], TOL, |t, x| project(t, x[0].bilinear_sample(table.clone())?, 1));
    let target = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    op(o, "focal γ=0", &[&[2, 3]], TOL, |_, x| x[0].mul_scalar(3.0).focal_loss(&target, 0.0));
    op(o, "focal γ=2", &[&[2, 3]], TOL, |_, x| x[0].mul_scalar(3.0).focal_loss(&target, 2.0));
    out
}

/// Random values for every parameter in the store.
pub fn randomize(store: &mut ParameterStore, seed: u64) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut rng = stream(seed, Purpose::Data);
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        *store.get_mut(&n).unwrap() = random_tensor(&mut rng, &shape);
    }
}

pub fn volume_compress_gradcheck() -> Check {
    let grid = VoxelGridSpec::uniform(3, 3, 2, (-1.0, 1.0), (1.5, 3.0), (-0.6, 0.6)).unwrap();
    let k = CameraIntrinsics::for_image(24);
    let table = Rc::new(volume_sample_table(&k, &grid, (24, 24), (6, 6)));
    let comp = BevCompressor::new("bev", 2 * 2, 3, 2);
    let mut c = Check::new("build_volume + BEV compressor", 1e-4);
    for seed in 0..SEEDS {
        let mut store = ParameterStore::new();
        comp.init(&mut store, &mut stream(seed, Purpose::Init)).unwrap();
        store.insert("feat", random_tensor(&mut stream(seed, Purpose::Data), &[2, 6, 6])).unwrap();
        let report = GradCheck { seed, ..GradCheck::default() }
            .run_params(&store, |p| {
                let vol = build_volume(p.param("feat")?, table.clone(), &grid)?;
                project(p.tape(), comp.forward(p, vol)?, seed)
            })
            .unwrap();
        c.absorb(&report);
    }
    c
}

/// fuse_step at d=4, n_s=2, 4 tokens per provider.
pub fn fuse_step_gradcheck() -> Check {
    let d = FusionDims { n_slots: 2, dim: 4, heads: 2, layers: 1, ffn: 6, mlp_residual: true };
    let mut c = Check::new("fuse_step", 1e-4);
    for seed in 0..SEEDS {
        let mut store = ParameterStore::new();
        let l = FusionLayer::new(Direction::Forward, d).unwrap();
        l.init(&mut store, &mut stream(seed, Purpose::Init), true).unwrap();
        randomize(&mut store, seed + 50);
        let mut rng = stream(seed, Purpose::Data);
        store.insert("in.front", random_tensor(&mut rng, &[4, 4])).unwrap();
        store.insert("in.bev", random_tensor(&mut rng, &[4, 4])).unwrap();
        let fd = GradCheck { seed, step: 1e-3, fourth_order: true, ..GradCheck::default() };
        let report = fd
            .run_params(&store, |p| {
                let s0 = l.initial_slots(p)?;
                let front = TokenSet::slots(p.param("in.front")?);
                let bev = TokenSet::slots(p.param("in.bev")?);
                let (s, r) = l.fuse_step(p, &s0, Some(&bev), &front)?;
                let both = p.tape().concat(&[s.tokens, r.tokens], 0)?;
                project(p.tape(), both, seed)
            })
            .unwrap();
        c.absorb(&report);
    }
    c
}

pub fn encoder_gradcheck() -> Check {
    let net = SegNet::new(ModelConfig::micro()).unwrap();
    let mut c = Check::new("front-view encoder", 1e-4);
    for seed in 0..SEEDS {
        let mut store = net.init(&mut stream(seed, Purpose::Init)).unwrap();
        // nonzero biases so every bias gradient is exercised
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            if name.starts_with("enc.") && name.ends_with(".bias") {
                let shape = store.get(&name).unwrap().shape().to_vec();
                *store.get_mut(&name).unwrap() = random_tensor(&mut stream(seed + 50, Purpose::Data), &shape);
            }
        }
        let x = random_tensor(&mut stream(seed, Purpose::Data), &[2, 4, 16, 16]);
        let report = GradCheck { seed, max_coords: Some(30), ..GradCheck::default() }
            .run_params(&store, |p| {
                let (feat, _) = net.encode_front(p, p.tape().constant(x.clone()))?;
                project(p.tape(), feat, seed)
            })
            .unwrap();
        c.absorb(&report);
    }
    c
}

pub fn decoder_gradcheck() -> Check {
    let cfg = ModelConfig::micro();
    let net = SegNet::new(cfg.clone()).unwrap();
    let mut c = Check::new("decoder", 1e-4);
    for seed in 0..SEEDS {
        let store = net.init(&mut stream(seed, Purpose::Init)).unwrap();
        let mut rng = stream(seed, Purpose::Data);
        let z = random_tensor(&mut rng, &[2, 2 * cfg.dim, 2, 2]);
        let skip_shapes: [&[usize]; 3] = [&[2, 4, 16, 16], &[2, 3, 8, 8], &[2, 4, 4, 4]];
        let skips: Vec<Tensor> = skip_shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let report = GradCheck { seed, max_coords: Some(30), ..GradCheck::default() }
            .run_params(&store, |p| {
                let tape = p.tape();
                let s: Vec<_> = skips.iter().map(|t| tape.constant(t.clone())).collect();
                let y = net.decode(p, tape.constant(z.clone()), &s)?;
                project(tape, y, seed)
            })
            .unwrap();
        c.absorb(&report);
    }
    c
}

pub fn random_mask_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = stream(seed, Purpose::Data);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Whole model and loss at the micro configuration.
pub fn full_pipeline_gradcheck() -> Check {
    let net = SegNet::new(ModelConfig::micro()).unwrap();
    let mut c = Check::new("full pipeline (micro)", 1e-3);
    for seed in 0..SEEDS {
        let store = net.init(&mut stream(seed, Purpose::Init)).unwrap();
        let input = VideoInput {
            frames: random_tensor(&mut stream(seed, Purpose::Data), &[3, 4, 16, 16]),
            intrinsics: CameraIntrinsics::for_image(16),
            object: 0,
        };
        let full = random_mask_tensor(seed + 1, &[3, 1, 16, 16]);
        let vis = random_mask_tensor(seed + 2, &[3, 1, 16, 16]);
        let report = GradCheck { seed, max_coords: Some(6), ..GradCheck::default() }
            .run_params(&store, |p| {
                let logits = net.forward(p, &input)?;
                total_loss(logits, &full, &vis, &LossConfig::default())
            })
            .unwrap();
        c.absorb(&report);
    }
    c
}

fn timed(f: fn() -> Check) -> Check {
    let started = std::time::Instant::now();
    let mut c = f();
    c.seconds = started.elapsed().as_secs_f64();
    c
}

/// Module-level checks; the full pipeline comes last.
pub fn module_gradchecks() -> Vec<Check> {
    [volume_compress_gradcheck, fuse_step_gradcheck, encoder_gradcheck, decoder_gradcheck, full_pipeline_gradcheck]
        .into_iter()
        .map(timed)
        .collect()
}

// ---------------------------------------------------------------------------
// geometry

/// Zero outside `[0, W-1] × [0, H-1]`, otherwise the four-tap weighted sum.
pub fn bilinear_ref(feat: &Tensor, c: usize, u: f64, v: f64) -> f64 {
    let (h, w) = (feat.shape()[1], feat.shape()[2]);
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return 0.0;
    }
    let x0 = (u.floor() as usize).min(w.saturating_sub(2));
    let y0 = (v.floor() as usize).min(h.saturating_sub(2));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let at = |y: usize, x: usize| if y < h && x < w { feat.at(&[c, y, x]) } else { 0.0 };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
}

pub fn volume_ref(feat: &Tensor, k: &CameraIntrinsics, grid: &VoxelGridSpec, image: (usize, usize)) -> Tensor {
    let (c, hf, wf) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let (m, n, h) = grid.dims();
    let mut out = Tensor::zeros(&[c, m, n, h]);
    for i in 0..m {
        for j in 0..n {
            for kk in 0..h {
                let (x, y, z) = (grid.width[i], grid.height[kk], grid.depth[j]);
                let u_img = k.fx * x / z + k.cx;
                let v_img = k.fy * y / z + k.cy;
                let u = u_img * wf as f64 / image.1 as f64 - 0.5;
                let v = v_img * hf as f64 / image.0 as f64 - 0.5;
                for ch in 0..c {
                    out.set(&[ch, i, j, kk], bilinear_ref(feat, ch, u, v));
                }
            }
        }
    }
    out
}

pub fn volume(feat: &Tensor, k: &CameraIntrinsics, grid: &VoxelGridSpec, image: (usize, usize)) -> Tensor {
    let feature = (feat.shape()[1], feat.shape()[2]);
    let table = Rc::new(volume_sample_table(k, grid, image, feature));
    let tape = Tape::new();
    let v = build_volume(tape.constant(feat.clone()), table, grid).unwrap();
    (*v.value()).clone()
}

// ---------------------------------------------------------------------------
// renderer

/// Brute force over the six face planes of the box, in its local frame.
pub fn box_faces_ref(center: [f64; 3], half: [f64; 3], yaw: f64, ray: &Ray) -> Option<f64> {
    let (s, c) = (-yaw).sin_cos();
    let rot = |p: [f64; 3]| [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]];
    let o = rot([ray.origin[0] - center[0], ray.origin[1] - center[1], ray.origin[2] - center[2]]);
    let d = rot(ray.dir);
    let mut best: Option<f64> = None;
    for a in 0..3 {
        for sign in [-1.0, 1.0] {
            if d[a] == 0.0 {
                continue;
            }
            let t = (sign * half[a] - o[a]) / d[a];
            if t <= 1e-9 {
                continue;
            }
            let inside = (0..3).filter(|&b| b != a).all(|b| (o[b] + t * d[b]).abs() <= half[b] + 1e-12);
            if inside && best.is_none_or(|bt| t < bt) {
                best = Some(t);
            }
        }
    }
    best
}

/// Closest-approach construction, independent of the quadratic route.
pub fn sphere_geometric_ref(center: [f64; 3], r: f64, ray: &Ray) -> Option<f64> {
    let l = [center[0] - ray.origin[0], center[1] - ray.origin[1], center[2] - ray.origin[2]];
    let tca = l[0] * ray.dir[0] + l[1] * ray.dir[1] + l[2] * ray.dir[2];
    let d2 = l[0] * l[0] + l[1] * l[1] + l[2] * l[2] - tca * tca;
    if d2 > r * r {
        return None;
    }
    let thc = (r * r - d2).sqrt();
    [tca - thc, tca + thc].into_iter().find(|&t| t > 1e-9)
}

// ---------------------------------------------------------------------------
// attention

/// Attention written as explicit loops over heads, queries and keys.
pub fn attention_ref(store: &ParameterStore, prefix: &str, heads: usize, q_in: &Tensor, kv_in: &Tensor) -> Tensor {
    let lin = |name: &str, x: &Tensor| -> Vec<Vec<f64>> {
        let w = store.get(&format!("{prefix}.{name}.weight")).unwrap();
        let b = store.get(&format!("{prefix}.{name}.bias")).unwrap();
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        (0..x.shape()[0])
            .map(|r| (0..dout).map(|j| b.data()[j] + (0..din).map(|i| x.at(&[r, i]) * w.at(&[i, j])).sum::<f64>()).collect())
            .collect()
    };
    let (q, k, v) = (lin("q", q_in), lin("k", kv_in), lin("v", kv_in));
    let d = q[0].len();
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (qi, row) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kr| cols.clone().map(|c| row[c] * kr[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                ctx[qi][c] = e.iter().zip(&v).map(|(w, vr)| w / z * vr[c]).sum();
            }
        }
    }
    let ctx = Tensor::new(&[q.len(), d], ctx.concat()).unwrap();
    let out = lin("out", &ctx);
    Tensor::new(&[q.len(), d], out.concat()).unwrap()
}

pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let data = perm.iter().flat_map(|&r| t.data()[r * d..(r + 1) * d].to_vec()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// baselines and metrics

/// Hull vertices by the half-plane test: `(i, j)` is a hull edge when every
/// other point lies strictly left of `i → j` or on the segment between them.
/// O(n³); returns the sorted vertex set.
pub fn hull_vertices_oracle(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 2 {
        return pts;
    }
    let mut verts = Vec::new();
    for &a in &pts {
        for &b in &pts {
            if a == b {
                continue;
            }
            let edge = pts.iter().all(|&p| {
                let cr = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                let on_segment = cr == 0
                    && p.0 >= a.0.min(b.0)
                    && p.0 <= a.0.max(b.0)
                    && p.1 >= a.1.min(b.1)
                    && p.1 <= a.1.max(b.1);
                cr > 0 || on_segment
            });
            if edge {
                verts.push(a);
                verts.push(b);
            }
        }
    }
    verts.sort_unstable();
    verts.dedup();
    verts
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::from_bits(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect()).unwrap()
}

/// IoU by counting pixel by pixel through `get`.
pub fn iou_naive(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(y, x), b.get(y, x));
            if p && q {
                inter += 1;
            }
            if p || q {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean occluded-region IoU by explicit pixel loops.
pub fn miou_occ_naive(preds: &[BinaryMask], fulls: &[BinaryMask], visibles: &[BinaryMask]) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ((p, m), v) in preds.iter().zip(fulls).zip(visibles) {
        let (h, w) = m.dims();
        let mut hidden = BinaryMask::empty(h, w);
        let mut pred_hidden = BinaryMask::empty(h, w);
        let mut seen = 0;
        for y in 0..h {
            for x in 0..w {
                seen += v.get(y, x) as usize;
                hidden.set(y, x, m.get(y, x) && !v.get(y, x));
                pred_hidden.set(y, x, p.get(y, x) && !v.get(y, x));
            }
        }
        if seen > 0 && hidden.count() > 0 {
            total += iou_naive(&pred_hidden, &hidden);
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}
