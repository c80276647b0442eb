//! Camera geometry and the front-view → bird's-eye-view translation.
//!
//! Camera coordinates are x-right, y-down, z-forward. A voxel grid is laid
//! out along width (camera x), depth (camera z, the projective divisor) and
//! height (camera y). Every voxel center is projected through the intrinsics,
//! rescaled to the feature plane and bilinearly sampled; the resulting volume
//! `[c, m, n, h]` is folded to `[c·h, m, n]` and compressed by a small CNN.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::SampleTable;
use crate::nn::{Conv2d, RELU_GAIN};
use crate::params::{Bound, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Config(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Default for a square `size×size` image: `fx = fy = size`, principal point at the center.
    pub fn for_image(size: usize) -> Self {
        let s = size as f64;
        Self { fx: s, fy: s, cx: s / 2.0, cy: s / 2.0 }
    }

    /// The 3×3 matrix `K`, row-major.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    /// `(λu, λv, λ) = K·(x, y, z)`; `None` when the point is not in front of
    /// the camera (λ = z ≤ 0).
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let [x, y, z] = p;
        if z <= 0.0 {
            return None;
        }
        Some(((self.fx * x + self.cx * z) / z, (self.fy * y + self.cy * z) / z))
    }

    /// `K⁻¹·(u·λ, v·λ, λ)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        [(u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth]
    }
}

/// Continuous image-plane coordinates to feature-plane sample coordinates.
/// Pixel `i` spans `[i, i+1)`; feature cell `j` covers `stride` pixels and
/// is centered at `(j + 0.5)·stride`.
pub fn image_to_feature(u: f64, image_extent: usize, feature_extent: usize) -> f64 {
    u * feature_extent as f64 / image_extent as f64 - 0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    /// Camera-x samples (`m`).
    pub width: Vec<f64>,
    /// Camera-z samples (`n`), strictly positive.
    pub depth: Vec<f64>,
    /// Camera-y samples (`h`).
    pub height: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl VoxelGridSpec {
    pub fn uniform(m: usize, n: usize, h: usize, width: (f64, f64), depth: (f64, f64), height: (f64, f64)) -> Result<Self> {
        let g = Self {
            width: linspace(width.0, width.1, m),
            depth: linspace(depth.0, depth.1, n),
            height: linspace(height.0, height.1, h),
        };
        g.validate()?;
        Ok(g)
    }

    /// 16×16×8 grid over width [−4,4], depth [0.5,8.5], height [−2,2].
    pub fn toy_default() -> Self {
        Self::uniform(16, 16, 8, (-4.0, 4.0), (0.5, 8.5), (-2.0, 2.0)).expect("valid default grid")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width.len(), self.depth.len(), self.height.len())
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, g) in [("width", &self.width), ("depth", &self.depth), ("height", &self.height)] {
            if g.is_empty() {
                return Err(Error::Config(format!("voxel grid {axis} axis is empty")));
            }
            if g.iter().any(|v| !v.is_finite()) || g.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(format!("voxel grid {axis} axis is not strictly increasing")));
            }
        }
        if self.depth[0] <= 0.0 {
            return Err(Error::Config("voxel grid depth must be strictly positive".into()));
        }
        Ok(())
    }

    /// Voxel centers as camera-space points, ordered (width i, depth j, height k)
    /// with k fastest, the row-major order of a `[m, n, h]` block.
    pub fn points(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.width.len() * self.depth.len() * self.height.len());
        for &x in &self.width {
            for &z in &self.depth {
                for &y in &self.height {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }
}

/// Feature-plane sample coordinates of a camera-space point, or `None` when
/// it lies behind the camera.
pub fn project_to_feature(
    k: &CameraIntrinsics,
    p: [f64; 3],
    image: (usize, usize),
    feature: (usize, usize),
) -> Option<(f64, f64)> {
    let (u, v) = k.project(p)?;
    Some((image_to_feature(u, image.1, feature.1), image_to_feature(v, image.0, feature.0)))
}

/// Bilinear taps of every voxel on a `feature = (Hf, Wf)` plane, for an
/// image of size `image = (H, W)`.
pub fn volume_sample_table(
    k: &CameraIntrinsics,
    grid: &VoxelGridSpec,
    image: (usize, usize),
    feature: (usize, usize),
) -> SampleTable {
    let points: Vec<(f64, f64)> = grid
        .points()
        .into_iter()
        .map(|p| project_to_feature(k, p, image, feature).unwrap_or((f64::NAN, f64::NAN)))
        .collect();
    SampleTable::new(feature.0, feature.1, &points)
}

/// `feat [c, Hf, Wf]` → volume `[c, m, n, h]`.
pub fn build_volume<'t>(feat: Var<'t>, table: Rc<SampleTable>, grid: &VoxelGridSpec) -> Result<Var<'t>> {
    let c = feat.shape()[0];
    let (m, n, h) = grid.dims();
    if table.points() != m * n * h {
        return Err(Error::dim("build_volume", &[table.points()], &[m, n, h]));
    }
    feat.bilinear_sample(table)?.reshape(&[c, m, n, h])
}

/// `[c, m, n, h]` → `[c·h, m, n]`; channel `ci·h + k` holds height slice `k` of channel `ci`.
pub fn fold_height<'t>(vol: Var<'t>) -> Result<Var<'t>> {
    let s = vol.shape();
    if s.len() != 4 {
        return Err(Error::dim("fold_height", &s, &[4]));
    }
    vol.permute(&[0, 3, 1, 2])?.reshape(&[s[0] * s[3], s[1], s[2]])
}

/// Two 3×3 convolutions (ReLU between) compressing the folded volume.
#[derive(Clone, Debug)]
pub struct BevCompressor {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl BevCompressor {
    pub fn new(prefix: &str, in_channels: usize, hidden: usize, out_channels: usize) -> Self {
        Self {
            first: Conv2d::new(format!("{prefix}.compress0"), in_channels, hidden, 3, 1, 1),
            second: Conv2d::new(format!("{prefix}.compress1"), hidden, out_channels, 3, 1, 1),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        self.first.init(store, rng, RELU_GAIN)?;
        self.second.init(store, rng, 1.0)
    }

    /// `vol [c, m, n, h]` → BEV map `[c', m, n]`.
    pub fn forward<'t>(&self, p: &Bound<'_, 't>, vol: Var<'t>) -> Result<Var<'t>> {
        let folded = fold_height(vol)?;
        let s = folded.shape();
        let y = self.forward_folded(p, folded.reshape(&[1, s[0], s[1], s[2]])?)?;
        y.reshape(&[self.second.out_ch, s[1], s[2]])
    }

    /// Batched form on already folded volumes: `[B, c·h, m, n]` → `[B, c', m, n]`.
    pub fn forward_folded<'t>(&self, p: &Bound<'_, 't>, folded: Var<'t>) -> Result<Var<'t>> {
        let s = folded.shape();
        if s.len() != 4 || s[1] != self.first.in_ch {
            return Err(Error::dim("compress_to_bev", &s, &[self.first.in_ch]));
        }
        let y = self.first.forward(p, folded)?.relu();
        self.second.forward(p, y)
    }
}
