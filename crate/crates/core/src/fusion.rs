//! Object-slot fusion of front-view and BEV tokens across time.
//!
//! An [`ObjAttentionBlock`] updates a *receiver* token set with information
//! from a read-only *provider* set: self-attention on the receiver, then
//! cross-attention whose queries come from the receiver and whose keys and
//! values come from the provider, then a two-layer MLP. Every sub-layer is
//! pre-normalized.
//!
//! Per frame, [`FusionLayer::fuse_step`] lets the slots absorb the BEV tokens,
//! then the front-view tokens, and finally uses the updated slots to refine
//! the front-view tokens. The three stacks are shared over time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{normal, LayerNorm, Linear};
use crate::params::{Bound, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    FrontView,
    Bev,
    Slots,
}

/// Tokens `[L, d]` plus where they came from. Spatial sources record the
/// `(row, col)` of each token so they can be folded back into a map.
#[derive(Clone, Debug)]
pub struct TokenSet<'t> {
    pub tokens: Var<'t>,
    pub provenance: Provenance,
    pub origins: Vec<(usize, usize)>,
}

impl<'t> TokenSet<'t> {
    /// Flattens a `[c, H, W]` map into `H·W` tokens of width `c`, row-major.
    pub fn from_map(map: Var<'t>, provenance: Provenance) -> Result<Self> {
        let s = map.shape();
        if s.len() != 3 {
            return Err(Error::dim("TokenSet::from_map", &s, &[3]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let tokens = map.reshape(&[c, h * w])?.transpose()?;
        let origins = (0..h).flat_map(|r| (0..w).map(move |col| (r, col))).collect();
        Ok(Self { tokens, provenance, origins })
    }

    pub fn slots(tokens: Var<'t>) -> Self {
        Self { tokens, provenance: Provenance::Slots, origins: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Same provenance and origins, new token values.
    pub fn with_tokens(&self, tokens: Var<'t>) -> Self {
        Self { tokens, provenance: self.provenance, origins: self.origins.clone() }
    }

    /// Folds the tokens back into a `[d, H, W]` map using the recorded origins.
    pub fn to_map(&self, h: usize, w: usize) -> Result<Var<'t>> {
        if self.origins.len() != h * w {
            return Err(Error::dim("TokenSet::to_map", &[self.origins.len()], &[h, w]));
        }
        let row_major = self.origins.iter().enumerate().all(|(i, &(r, c))| r * w + c == i);
        if !row_major {
            return Err(Error::Data("token origins are not a row-major raster".into()));
        }
        let d = self.width();
        self.tokens.transpose()?.reshape(&[d, h, w])
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            q: Linear::new(format!("{prefix}.q"), dim, dim),
            k: Linear::new(format!("{prefix}.k"), dim, dim),
            v: Linear::new(format!("{prefix}.v"), dim, dim),
            out: Linear::new(format!("{prefix}.out"), dim, dim),
            heads,
            dim,
        })
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, rng, 1.0)?;
        }
        Ok(())
    }

    fn split_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let l = x.shape()[0];
        x.reshape(&[l, self.heads, self.dim / self.heads])?.permute(&[1, 0, 2])
    }

    /// Scaled dot-product attention; `keys` and `values` have equal length.
    pub fn forward<'t>(&self, p: &Bound<'_, 't>, queries: Var<'t>, keys: Var<'t>, values: Var<'t>) -> Result<Var<'t>> {
        let lq = queries.shape()[0];
        let q = self.split_heads(self.q.forward(p, queries)?)?;
        let k = self.split_heads(self.k.forward(p, keys)?)?;
        let v = self.split_heads(self.v.forward(p, values)?)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let ctx = q.attention(k, v, scale)?.permute(&[1, 0, 2])?.reshape(&[lq, self.dim])?;
        self.out.forward(p, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct ObjAttentionBlock {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_query: LayerNorm,
    pub norm_provider: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_mlp: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    /// Adds the input of the MLP to its output. Off reproduces a bare
    /// `output = MLP(·)` block.
    pub mlp_residual: bool,
}

impl ObjAttentionBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize, ffn: usize, mlp_residual: bool) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(format!("{prefix}.norm_self"), dim),
            self_attn: MultiHeadAttention::new(&format!("{prefix}.self_attn"), dim, heads)?,
            norm_query: LayerNorm::new(format!("{prefix}.norm_query"), dim),
            norm_provider: LayerNorm::new(format!("{prefix}.norm_provider"), dim),
            cross_attn: MultiHeadAttention::new(&format!("{prefix}.cross_attn"), dim, heads)?,
            norm_mlp: LayerNorm::new(format!("{prefix}.norm_mlp"), dim),
            mlp_in: Linear::new(format!("{prefix}.mlp_in"), dim, ffn),
            mlp_out: Linear::new(format!("{prefix}.mlp_out"), ffn, dim),
            mlp_residual,
        })
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        for n in [&self.norm_self, &self.norm_query, &self.norm_provider, &self.norm_mlp] {
            n.init(store)?;
        }
        self.self_attn.init(store, rng)?;
        self.cross_attn.init(store, rng)?;
        self.mlp_in.init(store, rng, 2.0)?;
        self.mlp_out.init(store, rng, 1.0)
    }

    /// Names of the parameters whose zeroing turns the block into the
    /// identity on its receiver (attention output projections and the MLP
    /// output layer). Only meaningful with `mlp_residual` on.
    pub fn output_parameters(&self) -> Vec<String> {
        [&self.self_attn.out, &self.cross_attn.out, &self.mlp_out]
            .iter()
            .flat_map(|l| [l.weight(), l.bias()])
            .collect()
    }

    /// Updates `receiver [Lr, d]` from `provider [Lp, d]`.
    pub fn forward<'t>(&self, p: &Bound<'_, 't>, provider: Var<'t>, receiver: Var<'t>) -> Result<Var<'t>> {
        let d = self.self_attn.dim;
        let (ps, rs) = (provider.shape(), receiver.shape());
        if ps.len() != 2 || rs.len() != 2 || ps[1] != d || rs[1] != d {
            return Err(Error::Config(format!(
                "object attention width mismatch: provider {ps:?}, receiver {rs:?}, model width {d}"
            )));
        }
        let h = self.norm_self.forward(p, receiver)?;
        let x = receiver.add(self.self_attn.forward(p, h, h, h)?)?;
        let q = self.norm_query.forward(p, x)?;
        let kv = self.norm_provider.forward(p, provider)?;
        let x = x.add(self.cross_attn.forward(p, q, kv, kv)?)?;
        let m = self.norm_mlp.forward(p, x)?;
        let m = self.mlp_out.forward(p, self.mlp_in.forward(p, m)?.gelu())?;
        if self.mlp_residual {
            x.add(m)
        } else {
            Ok(m)
        }
    }
}

/// `N` object-attention blocks sharing one provider.
#[derive(Clone, Debug)]
pub struct ObjAttentionStack {
    pub blocks: Vec<ObjAttentionBlock>,
}

impl ObjAttentionStack {
    pub fn new(prefix: &str, layers: usize, dim: usize, heads: usize, ffn: usize, mlp_residual: bool) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| ObjAttentionBlock::new(&format!("{prefix}.layer{i}"), dim, heads, ffn, mlp_residual))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        self.blocks.iter().try_for_each(|b| b.init(store, rng))
    }

    pub fn output_parameters(&self) -> Vec<String> {
        self.blocks.iter().flat_map(ObjAttentionBlock::output_parameters).collect()
    }

    pub fn forward<'t>(&self, p: &Bound<'_, 't>, provider: Var<'t>, receiver: Var<'t>) -> Result<Var<'t>> {
        self.blocks.iter().try_fold(receiver, |sr, b| b.forward(p, provider, sr))
    }
}

/// Object attention on token sets; the provider is read-only.
pub fn obj_attention<'t>(
    p: &Bound<'_, 't>,
    stack: &ObjAttentionStack,
    provider: &TokenSet<'t>,
    receiver: &TokenSet<'t>,
) -> Result<TokenSet<'t>> {
    if provider.width() != receiver.width() {
        return Err(Error::Config(format!(
            "provider width {} differs from receiver width {}",
            provider.width(),
            receiver.width()
        )));
    }
    Ok(receiver.with_tokens(stack.forward(p, provider.tokens, receiver.tokens)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

/// One temporal direction: learnable initial slots and the three stacks.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub direction: Direction,
    pub slots_name: String,
    pub n_slots: usize,
    pub dim: usize,
    pub bev: ObjAttentionStack,
    pub front: ObjAttentionStack,
    pub refine: ObjAttentionStack,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionDims {
    pub n_slots: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub mlp_residual: bool,
}

impl FusionLayer {
    pub fn new(direction: Direction, dims: FusionDims) -> Result<Self> {
        let prefix = format!("fusion.{}", direction.tag());
        let stack = |name: &str| {
            ObjAttentionStack::new(&format!("{prefix}.{name}"), dims.layers, dims.dim, dims.heads, dims.ffn, dims.mlp_residual)
        };
        Ok(Self {
            direction,
            slots_name: format!("{prefix}.slots"),
            n_slots: dims.n_slots,
            dim: dims.dim,
            bev: stack("bev")?,
            front: stack("front")?,
            refine: stack("refine")?,
        })
    }

    /// `with_bev` controls whether the BEV stack gets parameters at all.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng, with_bev: bool) -> Result<()> {
        let std = 1.0 / (self.dim as f64).sqrt();
        store.insert(self.slots_name.clone(), normal(rng, &[self.n_slots, self.dim], std))?;
        if with_bev {
            self.bev.init(store, rng)?;
        }
        self.front.init(store, rng)?;
        self.refine.init(store, rng)
    }

    pub fn initial_slots<'t>(&self, p: &Bound<'_, 't>) -> Result<TokenSet<'t>> {
        Ok(TokenSet::slots(p.param(&self.slots_name)?))
    }

    /// One frame: slots absorb BEV (when given) then front-view evidence, then
    /// refine the front-view tokens. Returns `(S_t, refined front)`.
    pub fn fuse_step<'t>(
        &self,
        p: &Bound<'_, 't>,
        prev: &TokenSet<'t>,
        bev: Option<&TokenSet<'t>>,
        front: &TokenSet<'t>,
    ) -> Result<(TokenSet<'t>, TokenSet<'t>)> {
        let absorbed = match bev {
            Some(b) => obj_attention(p, &self.bev, b, prev)?,
            None => prev.clone(),
        };
        let slots = obj_attention(p, &self.front, front, &absorbed)?;
        let refined = obj_attention(p, &self.refine, &slots, front)?;
        Ok((slots, refined))
    }

    /// Runs the stream over all frames in this layer's direction and returns
    /// refined front-view tokens in the original temporal order.
    pub fn run_stream<'t>(
        &self,
        p: &Bound<'_, 't>,
        frames: &[(TokenSet<'t>, Option<TokenSet<'t>>)],
    ) -> Result<Vec<TokenSet<'t>>> {
        if frames.is_empty() {
            return Err(Error::Usage("run_stream needs at least one frame".into()));
        }
        let order: Vec<usize> = match self.direction {
            Direction::Forward => (0..frames.len()).collect(),
            Direction::Backward => (0..frames.len()).rev().collect(),
        };
        let mut slots = self.initial_slots(p)?;
        let mut out: Vec<Option<TokenSet<'t>>> = vec![None; frames.len()];
        for t in order {
            let (front, bev) = &frames[t];
            let (next, refined) = self.fuse_step(p, &slots, bev.as_ref(), front)?;
            slots = next;
            out[t] = Some(refined);
        }
        Ok(out.into_iter().map(|o| o.expect("every frame visited")).collect())
    }
}

/// Per frame, folds both streams back to maps and concatenates channels:
/// `[d, H, W] ‖ [d, H, W] → [2d, H, W]`.
pub fn concat_streams<'t>(
    tape: &'t Tape,
    fwd: &[TokenSet<'t>],
    bwd: &[TokenSet<'t>],
    h: usize,
    w: usize,
) -> Result<Vec<Var<'t>>> {
    if fwd.len() != bwd.len() {
        return Err(Error::dim("concat_streams", &[fwd.len()], &[bwd.len()]));
    }
    fwd.iter()
        .zip(bwd)
        .map(|(f, b)| tape.concat(&[f.to_map(h, w)?, b.to_map(h, w)?], 0))
        .collect()
}
