//! The full model: per-object front-view encoder, BEV branch, bidirectional
//! slot fusion and a deconvolution decoder with full/visible mask heads.
//!
//! All `T` frames of a sequence go through the convolutional parts as one
//! batch; only the slot recurrence runs frame by frame.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{concat_streams, Direction, FusionDims, FusionLayer, Provenance, TokenSet};
use crate::geometry::{volume_sample_table, BevCompressor, CameraIntrinsics, VoxelGridSpec};
use crate::mask::BinaryMask;
use crate::nn::{normal, Conv2d, Linear, RELU_GAIN};
use crate::params::{Bound, ParameterStore};
use crate::synth::RenderedSequence;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Hint channel is the object's track box.
    BoxChannel,
    /// Hint channel is the ground-truth visible mask.
    SgVisibleMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output widths of the stride-2 encoder convolutions.
    pub encoder_widths: Vec<usize>,
    /// Channels of the front-view feature map `c`.
    pub feature_channels: usize,
    pub dim: usize,
    pub n_slots: usize,
    /// Blocks per object-attention stack (`N`).
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub grid: VoxelGridSpec,
    /// Feature channels lifted into the voxel volume.
    pub bev_channels: usize,
    pub bev_hidden: usize,
    /// BEV map channels `c'`.
    pub bev_out: usize,
    /// Output widths of the transposed convolutions, coarse to fine.
    pub decoder_widths: Vec<usize>,
    /// Concatenate encoder activations into the decoder at matching resolution.
    pub skip_connections: bool,
    pub use_bev: bool,
    pub use_temporal: bool,
    pub use_bidirectional: bool,
    pub input_mode: InputMode,
    /// Drop the MLP residual of the attention blocks.
    pub strict_eq6: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            encoder_widths: vec![16, 32, 48],
            feature_channels: 48,
            dim: 32,
            n_slots: 8,
            layers: 2,
            heads: 4,
            ffn: 64,
            grid: VoxelGridSpec::toy_default(),
            bev_channels: 8,
            bev_hidden: 32,
            bev_out: 32,
            decoder_widths: vec![32, 24, 16],
            skip_connections: true,
            use_bev: true,
            use_temporal: true,
            use_bidirectional: true,
            input_mode: InputMode::BoxChannel,
            strict_eq6: false,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            encoder_widths: vec![3, 4, 5],
            feature_channels: 4,
            dim: 8,
            n_slots: 2,
            layers: 1,
            heads: 2,
            ffn: 8,
            grid: VoxelGridSpec::uniform(4, 4, 2, (-2.0, 2.0), (1.0, 5.0), (-1.0, 1.0)).expect("valid grid"),
            bev_channels: 2,
            bev_hidden: 3,
            bev_out: 4,
            decoder_widths: vec![4, 3, 3],
            ..Self::default()
        }
    }

    pub fn feature_size(&self) -> usize {
        self.image_size >> self.encoder_widths.len()
    }

    pub fn bev_active(&self) -> bool {
        self.use_temporal && self.use_bev
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.encoder_widths.len();
        let bad = |m: String| Err(Error::Config(m));
        if levels == 0 || self.decoder_widths.len() != levels {
            return bad(format!(
                "encoder has {levels} levels but decoder has {}; they must match and be nonzero",
                self.decoder_widths.len()
            ));
        }
        if self.image_size == 0 || self.image_size % (1 << levels) != 0 {
            return bad(format!("image size {} is not divisible by the encoder stride {}", self.image_size, 1 << levels));
        }
        let widths = [self.feature_channels, self.dim, self.n_slots, self.layers, self.ffn, self.bev_channels, self.bev_hidden, self.bev_out];
        if widths.contains(&0) || self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return bad("model widths must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("{} heads do not divide width {}", self.heads, self.dim));
        }
        self.grid.validate()
    }
}

/// Logits for one object in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub object: usize,
    pub frame: usize,
    /// `[H, W]`.
    pub full: Tensor,
    /// `[H, W]`.
    pub visible: Tensor,
}

impl MaskPrediction {
    pub fn full_mask(&self) -> BinaryMask {
        let s = self.full.shape();
        BinaryMask::from_logits(self.full.data(), s[0], s[1]).expect("logit shape")
    }

    pub fn visible_mask(&self) -> BinaryMask {
        let s = self.visible.shape();
        BinaryMask::from_logits(self.visible.data(), s[0], s[1]).expect("logit shape")
    }
}

/// Tensors for one `(sequence, object)` item.
#[derive(Clone, Debug)]
pub struct VideoInput {
    /// `[T, 4, H, W]`: RGB plus the hint channel.
    pub frames: Tensor,
    pub intrinsics: CameraIntrinsics,
    pub object: usize,
}

impl VideoInput {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// Builds the network input for object `k`; the hint follows `mode`.
pub fn video_input(seq: &RenderedSequence, k: usize, mode: InputMode) -> Result<VideoInput> {
    let t_len = seq.frame_count();
    if k >= seq.object_count() {
        return Err(Error::Data(format!("object {k} not in sequence with {} objects", seq.object_count())));
    }
    if seq.boxes.len() != t_len || seq.boxes.iter().any(|b| b.len() <= k) {
        return Err(Error::Data(format!("object {k} is missing track metadata")));
    }
    let k0 = seq.intrinsics[0];
    if seq.intrinsics.iter().any(|ki| *ki != k0) {
        return Err(Error::Data("intrinsics must be identical across frames".into()));
    }
    let (h, w) = seq.image_dims();
    let plane = h * w;
    let mut data = Vec::with_capacity(t_len * 4 * plane);
    for t in 0..t_len {
        data.extend_from_slice(seq.frames[t].to_tensor().data());
        let hint = match mode {
            InputMode::BoxChannel => BinaryMask::from_box(h, w, seq.boxes[t][k]),
            InputMode::SgVisibleMask => seq.visible[t][k].clone(),
        };
        data.extend_from_slice(hint.to_tensor().data());
    }
    Ok(VideoInput { frames: Tensor::new(&[t_len, 4, h, w], data)?, intrinsics: k0, object: k })
}

/// Ground truth `[T, 1, H, W]` stacks for object `k`.
pub fn video_targets(seq: &RenderedSequence, k: usize) -> (Tensor, Tensor) {
    let stack = |masks: &Vec<Vec<BinaryMask>>| {
        let (h, w) = seq.image_dims();
        let data = masks.iter().flat_map(|m| m[k].to_tensor().into_data()).collect();
        Tensor::new(&[masks.len(), 1, h, w], data).expect("mask stack")
    };
    (stack(&seq.full), stack(&seq.visible))
}

#[derive(Clone, Debug)]
pub struct SegNet {
    pub cfg: ModelConfig,
    encoder: Vec<Conv2d>,
    head: Conv2d,
    front_proj: Linear,
    bev_reduce: Conv2d,
    bev: BevCompressor,
    bev_proj: Linear,
    fwd: FusionLayer,
    bwd: FusionLayer,
    decoder: Vec<Conv2d>,
    /// 3×3 conv mixing the concatenated full-resolution skip; only with skip connections.
    fuse: Option<Conv2d>,
    out: Conv2d,
}

const FRONT_POS: &str = "front.pos";
const BEV_POS: &str = "bev.pos";

impl SegNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::new();
        let mut ch = 4;
        for (i, &w) in cfg.encoder_widths.iter().enumerate() {
            encoder.push(Conv2d::new(format!("enc.conv{i}"), ch, w, 3, 2, 1));
            ch = w;
        }
        let head = Conv2d::new("enc.head", ch, cfg.feature_channels, 3, 1, 1);
        let (_, _, h) = cfg.grid.dims();
        let dims = FusionDims {
            n_slots: cfg.n_slots,
            dim: cfg.dim,
            heads: cfg.heads,
            layers: cfg.layers,
            ffn: cfg.ffn,
            mlp_residual: !cfg.strict_eq6,
        };
        let levels = cfg.encoder_widths.len();
        let mut decoder = Vec::new();
        let mut ch = 2 * cfg.dim;
        for (i, &w) in cfg.decoder_widths.iter().enumerate() {
            decoder.push(Conv2d::transposed(format!("dec.up{i}"), ch, w, 4, 2, 1));
            ch = w + if cfg.skip_connections { Self::skip_channels(&cfg, levels - 1 - i) } else { 0 };
        }
        let last = *cfg.decoder_widths.last().expect("validated nonempty");
        Ok(Self {
            encoder,
            head,
            front_proj: Linear::new("front.proj", cfg.feature_channels, cfg.dim),
            bev_reduce: Conv2d::new("bev.reduce", cfg.feature_channels, cfg.bev_channels, 1, 1, 0),
            bev: BevCompressor::new("bev", cfg.bev_channels * h, cfg.bev_hidden, cfg.bev_out),
            bev_proj: Linear::new("bev.proj", cfg.bev_out, cfg.dim),
            fwd: FusionLayer::new(Direction::Forward, dims)?,
            bwd: FusionLayer::new(Direction::Backward, dims)?,
            decoder,
            fuse: cfg.skip_connections.then(|| Conv2d::new("dec.fuse", ch, last, 3, 1, 1)),
            out: Conv2d::new("dec.out", last, 2, 1, 1, 0),
            cfg,
        })
    }

    /// Channels joining the decoder at `level`'s resolution (level 0 = full
    /// resolution input, level i = output of encoder conv i−1).
    fn skip_channels(cfg: &ModelConfig, level: usize) -> usize {
        if level == 0 {
            4
        } else {
            cfg.encoder_widths[level - 1]
        }
    }

    /// Creates every parameter this configuration uses, and nothing else.
    pub fn init(&self, rng: &mut impl Rng) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let cfg = &self.cfg;
        for conv in &self.encoder {
            conv.init(&mut store, rng, RELU_GAIN)?;
        }
        self.head.init(&mut store, rng, 1.0)?;
        self.front_proj.init(&mut store, rng, 1.0)?;
        let fs = cfg.feature_size();
        let pos_std = 1.0 / (cfg.dim as f64).sqrt();
        store.insert(FRONT_POS, normal(rng, &[fs * fs, cfg.dim], pos_std))?;
        if cfg.use_temporal {
            if cfg.bev_active() {
                let (m, n, _) = cfg.grid.dims();
                self.bev_reduce.init(&mut store, rng, 1.0)?;
                self.bev.init(&mut store, rng)?;
                self.bev_proj.init(&mut store, rng, 1.0)?;
                store.insert(BEV_POS, normal(rng, &[m * n, cfg.dim], pos_std))?;
            }
            self.fwd.init(&mut store, rng, cfg.bev_active())?;
            if cfg.use_bidirectional {
                self.bwd.init(&mut store, rng, cfg.bev_active())?;
            }
        }
        for conv in &self.decoder {
            conv.init(&mut store, rng, RELU_GAIN)?;
        }
        if let Some(fuse) = &self.fuse {
            fuse.init(&mut store, rng, RELU_GAIN)?;
        }
        self.out.init(&mut store, rng, 1.0)?;
        Ok(store)
    }

    /// Parameters of the BEV stacks' output projections; zeroing them makes
    /// the BEV branch a no-op on the slots.
    pub fn bev_output_parameters(&self) -> Vec<String> {
        let mut names = self.fwd.bev.output_parameters();
        if self.cfg.use_bidirectional {
            names.extend(self.bwd.bev.output_parameters());
        }
        names
    }

    /// `[T, 2, H, W]` logits; channel 0 is the full mask, channel 1 the visible mask.
    pub fn forward<'t>(&self, p: &Bound<'_, 't>, input: &VideoInput) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        let tape = p.tape();
        let s = input.frames.shape();
        if s.len() != 4 || s[1] != 4 || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(Error::Config(format!(
                "input {s:?} does not match model image size {} with 4 channels",
                cfg.image_size
            )));
        }
        let t_len = s[0];
        let (feat, skips) = self.encode_front(p, tape.constant(input.frames.clone()))?;
        let fs = cfg.feature_size();
        let c = cfg.feature_channels;
        let front = feat
            .reshape(&[t_len, c, fs * fs])?
            .permute(&[0, 2, 1])?
            .matmul(p.param(&self.front_proj.weight())?)?
            .add(p.param(&self.front_proj.bias())?)?
            .add(p.param(FRONT_POS)?)?;

        let d = cfg.dim;
        let maps: Vec<Var<'t>> = if cfg.use_temporal {
            let bev = if cfg.bev_active() { Some(self.bev_tokens(p, feat, input.intrinsics, t_len)?) } else { None };
            let origins: Vec<(usize, usize)> = (0..fs).flat_map(|r| (0..fs).map(move |q| (r, q))).collect();
            let mut frames = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let ft = front.slice(0, t, 1)?.reshape(&[fs * fs, d])?;
                let ft = TokenSet { tokens: ft, provenance: Provenance::FrontView, origins: origins.clone() };
                let bt = match bev {
                    Some(b) => {
                        let bs = b.shape();
                        Some(TokenSet::from_map(b.slice(0, t, 1)?.reshape(&bs[1..])?, Provenance::Bev)?)
                    }
                    None => None,
                };
                frames.push((ft, bt));
            }
            let fwd = self.fwd.run_stream(p, &frames)?;
            let bwd = if cfg.use_bidirectional { self.bwd.run_stream(p, &frames)? } else { fwd.clone() };
            concat_streams(tape, &fwd, &bwd, fs, fs)?
        } else {
            (0..t_len)
                .map(|t| {
                    let m = front.slice(0, t, 1)?.reshape(&[fs * fs, d])?.transpose()?.reshape(&[d, fs, fs])?;
                    tape.concat(&[m, m], 0)
                })
                .collect::<Result<_>>()?
        };
        let z = tape.concat(&maps, 0)?.reshape(&[t_len, 2 * d, fs, fs])?;
        self.decode(p, z, &skips)
    }

    /// Encoder on `[T, 4, H, W]` frames: the `[T, c, H/2^L, W/2^L]` feature and
    /// the activations at every resolution (input first) for the decoder skips.
    pub fn encode_front<'t>(&self, p: &Bound<'_, 't>, x: Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 4 || s[2] != self.cfg.image_size || s[3] != self.cfg.image_size {
            return Err(Error::Config(format!("encoder input {s:?} is not [T, 4, {0}, {0}]", self.cfg.image_size)));
        }
        let mut skips = vec![x];
        let mut e = x;
        for conv in &self.encoder {
            e = conv.forward(p, e)?.relu();
            skips.push(e);
        }
        Ok((self.head.forward(p, e)?, skips))
    }

    /// BEV tokens of every frame, projected to width `d` and laid out as `[T, d, m, n]`.
    fn bev_tokens<'t>(&self, p: &Bound<'_, 't>, feat: Var<'t>, k: CameraIntrinsics, t_len: usize) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        let fs = cfg.feature_size();
        let (m, n, h) = cfg.grid.dims();
        let cb = cfg.bev_channels;
        let table = Rc::new(volume_sample_table(&k, &cfg.grid, (cfg.image_size, cfg.image_size), (fs, fs)));
        let reduced = self.bev_reduce.forward(p, feat)?.reshape(&[t_len * cb, fs, fs])?;
        let folded = reduced
            .bilinear_sample(table)?
            .reshape(&[t_len, cb, m, n, h])?
            .permute(&[0, 1, 4, 2, 3])?
            .reshape(&[t_len, cb * h, m, n])?;
        let bev = self.bev.forward_folded(p, folded)?;
        let tokens = bev
            .reshape(&[t_len, cfg.bev_out, m * n])?
            .permute(&[0, 2, 1])?
            .matmul(p.param(&self.bev_proj.weight())?)?
            .add(p.param(&self.bev_proj.bias())?)?
            .add(p.param(BEV_POS)?)?;
        // back to [T, d, m, n] so TokenSet::from_map records the raster origins
        tokens.permute(&[0, 2, 1])?.reshape(&[t_len, cfg.dim, m, n])
    }

    /// Decoder from `[T, 2d, Hf, Wf]` refined features to `[T, 2, H, W]` logits.
    /// `skips` is the second output of [`SegNet::encode_front`].
    pub fn decode<'t>(&self, p: &Bound<'_, 't>, z: Var<'t>, skips: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = p.tape();
        let levels = self.decoder.len();
        let mut y = z;
        for (i, up) in self.decoder.iter().enumerate() {
            y = up.forward(p, y)?.relu();
            if self.cfg.skip_connections {
                y = tape.concat(&[y, skips[levels - 1 - i]], 1)?;
            }
        }
        let y = match &self.fuse {
            Some(fuse) => fuse.forward(p, y)?.relu(),
            None => y,
        };
        self.out.forward(p, y)
    }

    /// Per-frame predictions for one object, without recording gradients.
    pub fn predict(&self, store: &ParameterStore, input: &VideoInput) -> Result<Vec<MaskPrediction>> {
        let tape = Tape::new();
        let p = Bound::frozen(store, &tape);
        let logits = self.forward(&p, input)?.value();
        let s = logits.shape().to_vec();
        let (h, w) = (s[2], s[3]);
        let plane = h * w;
        let preds = (0..s[0])
            .map(|t| {
                let base = t * 2 * plane;
                let full = Tensor::new(&[h, w], logits.data()[base..base + plane].to_vec())?;
                let visible = Tensor::new(&[h, w], logits.data()[base + plane..base + 2 * plane].to_vec())?;
                if !full.all_finite() || !visible.all_finite() {
                    return Err(Error::Numeric(format!("non-finite logits for object {} frame {t}", input.object)));
                }
                Ok(MaskPrediction { object: input.object, frame: t, full, visible })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(preds)
    }

    /// Predictions for every frame of object `k`.
    pub fn forward_video(&self, store: &ParameterStore, seq: &RenderedSequence, k: usize) -> Result<Vec<MaskPrediction>> {
        self.predict(store, &video_input(seq, k, self.cfg.input_mode)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Literal sums over frames (and batch items) instead of means.
    pub strict_sum: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 2.0, lambda: 1.0, strict_sum: false }
    }
}

/// Loss of one item from `[T, 2, H, W]` logits: focal over the full-mask
/// channel plus `λ` times focal over the visible-mask channel, each a mean
/// over frames and pixels (or a sum over frames when `strict_sum`).
pub fn total_loss<'t>(logits: Var<'t>, full: &Tensor, visible: &Tensor, cfg: &LossConfig) -> Result<Var<'t>> {
    let t_len = logits.shape()[0];
    let lf = logits.slice(1, 0, 1)?.focal_loss(full, cfg.gamma)?;
    let lv = logits.slice(1, 1, 1)?.focal_loss(visible, cfg.gamma)?;
    let l = lf.add(lv.mul_scalar(cfg.lambda))?;
    Ok(if cfg.strict_sum { l.mul_scalar(t_len as f64) } else { l })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { image_size: 44, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { heads: 3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { decoder_widths: vec![8, 8], ..ModelConfig::default() }.validate().is_err());
        assert_eq!(ModelConfig::default().feature_size(), 6);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ModelConfig { input_mode: InputMode::SgVisibleMask, ..ModelConfig::micro() };
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("sg_visible_mask"));
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn ablated_configs_create_only_used_parameters() {
        let rng = &mut stream(0, Purpose::Init);
        let full = SegNet::new(ModelConfig::micro()).unwrap().init(rng).unwrap();
        assert!(full.contains("bev.pos") && full.contains("fusion.bwd.slots"));
        let cfg = ModelConfig { use_bev: false, use_bidirectional: false, ..ModelConfig::micro() };
        let store = SegNet::new(cfg).unwrap().init(rng).unwrap();
        assert!(!store.names().any(|n| n.starts_with("bev.") || n.starts_with("fusion.bwd") || n.contains(".bev.")));
        let cfg = ModelConfig { use_temporal: false, ..ModelConfig::micro() };
        let store = SegNet::new(cfg).unwrap().init(rng).unwrap();
        assert!(!store.names().any(|n| n.starts_with("fusion.")));
    }
}
