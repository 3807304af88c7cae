//! The frozen generative prior: a small 3D-UNet predicting v for all frames.
//!
//! Spatial and temporal layers interleave: every spatial stage (ResBlock or
//! attention pair) is followed by a temporal stage (1-D convolution over the
//! frame axis, or 1-D attention over frames per spatial location). Output
//! layers of all temporal stages are zero-initialized and wrapped as residual
//! branches, so a freshly initialized network treats frames independently.
//! Encoder features are skipped to the decoder by channel concatenation; the
//! condition branch later adds its residuals onto exactly those skips and
//! onto the middle-block output.

pub mod text;

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{register_store, Graph, GraphParams, ParamStore, Var};
use crate::num::Scalar;
use crate::rng::SeededRng;

pub use text::{embed_text, text_context_graph, tokenize, TextEmbedding};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Resolution levels with self/cross/temporal attention.
    pub attn_levels: Vec<usize>,
    pub temporal_kernel: usize,
    pub text_dim: usize,
    pub text_tokens: usize,
    pub text_buckets: usize,
    pub frame_capacity: usize,
    pub latent_channels: usize,
    /// Width of the sinusoidal position encoding.
    pub time_dim: usize,
    /// Width of the time embedding after the MLP.
    pub emb_dim: usize,
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    /// Desk-scale default: 3 levels at channels (32, 64, 96), attention on
    /// the two lowest-resolution levels.
    pub fn toy() -> Self {
        Self {
            levels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 3],
            attn_levels: vec![1, 2],
            temporal_kernel: 3,
            text_dim: 64,
            text_tokens: 8,
            text_buckets: 1024,
            frame_capacity: 25,
            latent_channels: crate::autoencoder::LATENT_CHANNELS,
            time_dim: 64,
            emb_dim: 128,
            norm_groups: 8,
        }
    }

    /// Smallest config that still exercises every layer kind; used by tests
    /// and the overfit gates.
    pub fn micro() -> Self {
        Self {
            levels: 2,
            base_channels: 16,
            channel_mults: vec![1, 2],
            attn_levels: vec![1],
            temporal_kernel: 3,
            text_dim: 32,
            text_tokens: 8,
            text_buckets: 1024,
            frame_capacity: 16,
            latent_channels: crate::autoencoder::LATENT_CHANNELS,
            time_dim: 32,
            emb_dim: 64,
            norm_groups: 8,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn has_attn(&self, level: usize) -> bool {
        self.attn_levels.contains(&level)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("need at least one resolution level".into()));
        }
        if self.channel_mults.len() != self.levels {
            return Err(Error::Config(format!(
                "channel_mults has {} entries for {} levels",
                self.channel_mults.len(),
                self.levels
            )));
        }
        if self.temporal_kernel != 3 {
            return Err(Error::Config(format!(
                "temporal kernel is fixed to 3, got {}",
                self.temporal_kernel
            )));
        }
        if !self.has_attn(self.levels - 1) {
            return Err(Error::Config(
                "the lowest-resolution level must carry attention".into(),
            ));
        }
        if self.attn_levels.iter().any(|&l| l >= self.levels) {
            return Err(Error::Config("attention level out of range".into()));
        }
        for l in 0..self.levels {
            if self.channels(l) % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "channels {} at level {l} not divisible by norm groups {}",
                    self.channels(l),
                    self.norm_groups
                )));
            }
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        if self.text_tokens < 2 {
            return Err(Error::Config("text context needs at least 2 slots".into()));
        }
        Ok(())
    }

    /// Minimum latent side length the UNet accepts.
    pub fn min_latent_side(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Backbone parameters plus their config.
#[derive(Debug, Clone)]
pub struct BackboneParams<T: Scalar> {
    pub cfg: BackboneConfig,
    pub store: ParamStore<T>,
}

/// Name suffixes whose tensors are zero-initialized: temporal output layers
/// and the final output convolution.
pub fn is_zero_init_name(name: &str) -> bool {
    name.ends_with("tconv.w")
        || name.ends_with("tconv.b")
        || name.ends_with("tconv1.w")
        || name.ends_with("tconv1.b")
        || name.ends_with("tconv2.w")
        || name.ends_with("tconv2.b")
        || name.ends_with("tattn.o.w")
        || name.ends_with("tattn.o.b")
        || name.starts_with("out.conv.")
}

/// Temporal-layer output tensors (zero at init per the architecture).
pub fn is_temporal_output_name(name: &str) -> bool {
    (name.contains(".tconv") && (name.ends_with(".w") || name.ends_with(".b"))
        && !name.contains("norm"))
        || (name.contains(".tattn.o."))
}

fn init_res_block<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    emb_dim: usize,
) {
    store.ones(format!("{prefix}norm1.g"), &[c_in]);
    store.zeros(format!("{prefix}norm1.b"), &[c_in]);
    store.normal(
        format!("{prefix}conv1.w"),
        &[c_out, c_in, 3, 3],
        1.0 / ((c_in * 9) as f64).sqrt(),
        rng,
    );
    store.zeros(format!("{prefix}conv1.b"), &[c_out]);
    store.normal(
        format!("{prefix}emb.w"),
        &[emb_dim, c_out],
        1.0 / (emb_dim as f64).sqrt(),
        rng,
    );
    store.zeros(format!("{prefix}emb.b"), &[c_out]);
    store.ones(format!("{prefix}norm2.g"), &[c_out]);
    store.zeros(format!("{prefix}norm2.b"), &[c_out]);
    store.normal(
        format!("{prefix}conv2.w"),
        &[c_out, c_out, 3, 3],
        1.0 / ((c_out * 9) as f64).sqrt(),
        rng,
    );
    store.zeros(format!("{prefix}conv2.b"), &[c_out]);
    if c_in != c_out {
        store.normal(
            format!("{prefix}skip.w"),
            &[c_out, c_in, 1, 1],
            1.0 / (c_in as f64).sqrt(),
            rng,
        );
        store.zeros(format!("{prefix}skip.b"), &[c_out]);
    }
}

fn init_temporal_conv<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.ones(format!("{prefix}norm.g"), &[c]);
    store.zeros(format!("{prefix}norm.b"), &[c]);
    store.zeros(format!("{prefix}w"), &[c, c, 3]);
    store.zeros(format!("{prefix}b"), &[c]);
}

fn init_attn_stack<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
    prefix: &str,
    c: usize,
    text_dim: usize,
) {
    let sc = 1.0 / (c as f64).sqrt();
    // Spatial self-attention.
    store.ones(format!("{prefix}attn.norm.g"), &[c]);
    store.zeros(format!("{prefix}attn.norm.b"), &[c]);
    for proj in ["q", "k", "v"] {
        store.normal(format!("{prefix}attn.{proj}.w"), &[c, c], sc, rng);
    }
    store.normal(format!("{prefix}attn.o.w"), &[c, c], sc, rng);
    store.zeros(format!("{prefix}attn.o.b"), &[c]);
    // Text cross-attention.
    store.ones(format!("{prefix}xattn.norm.g"), &[c]);
    store.zeros(format!("{prefix}xattn.norm.b"), &[c]);
    store.normal(format!("{prefix}xattn.q.w"), &[c, c], sc, rng);
    store.normal(
        format!("{prefix}xattn.k.w"),
        &[text_dim, c],
        1.0 / (text_dim as f64).sqrt(),
        rng,
    );
    store.normal(
        format!("{prefix}xattn.v.w"),
        &[text_dim, c],
        1.0 / (text_dim as f64).sqrt(),
        rng,
    );
    store.normal(format!("{prefix}xattn.o.w"), &[c, c], sc, rng);
    store.zeros(format!("{prefix}xattn.o.b"), &[c]);
    // Temporal attention; output layer zero.
    store.ones(format!("{prefix}tattn.norm.g"), &[c]);
    store.zeros(format!("{prefix}tattn.norm.b"), &[c]);
    for proj in ["q", "k", "v"] {
        store.normal(format!("{prefix}tattn.{proj}.w"), &[c, c], sc, rng);
    }
    store.zeros(format!("{prefix}tattn.o.w"), &[c, c]);
    store.zeros(format!("{prefix}tattn.o.b"), &[c]);
}

/// Initialize backbone parameters; deterministic in `seed`.
pub fn init_backbone<T: Scalar>(cfg: &BackboneConfig, seed: u64) -> Result<BackboneParams<T>> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::<T>::new();
    let c0 = cfg.channels(0);
    let c_lat = cfg.latent_channels;

    store.normal(
        "conv_in.w",
        &[c0, c_lat, 3, 3],
        1.0 / ((c_lat * 9) as f64).sqrt(),
        &mut rng,
    );
    store.zeros("conv_in.b", &[c0]);

    store.normal(
        "temb.l1.w",
        &[cfg.time_dim, cfg.emb_dim],
        1.0 / (cfg.time_dim as f64).sqrt(),
        &mut rng,
    );
    store.zeros("temb.l1.b", &[cfg.emb_dim]);
    store.normal(
        "temb.l2.w",
        &[cfg.emb_dim, cfg.emb_dim],
        1.0 / (cfg.emb_dim as f64).sqrt(),
        &mut rng,
    );
    store.zeros("temb.l2.b", &[cfg.emb_dim]);

    store.normal("text.table", &[cfg.text_buckets, cfg.text_dim], 0.5, &mut rng);
    store.normal("text.null", &[cfg.text_dim], 0.5, &mut rng);

    // Encoder.
    let mut c_in = c0;
    for level in 0..cfg.levels {
        let c = cfg.channels(level);
        let p = format!("enc{level}.");
        init_res_block(&mut store, &mut rng, &format!("{p}res."), c_in, c, cfg.emb_dim);
        init_temporal_conv(&mut store, &format!("{p}tconv."), c);
        if cfg.has_attn(level) {
            init_attn_stack(&mut store, &mut rng, &p, c, cfg.text_dim);
        }
        if level + 1 < cfg.levels {
            store.normal(
                format!("{p}down.w"),
                &[c, c, 3, 3],
                1.0 / ((c * 9) as f64).sqrt(),
                &mut rng,
            );
            store.zeros(format!("{p}down.b"), &[c]);
        }
        c_in = c;
    }

    // Middle block.
    let cm = cfg.channels(cfg.levels - 1);
    init_res_block(&mut store, &mut rng, "mid.res1.", cm, cm, cfg.emb_dim);
    init_temporal_conv(&mut store, "mid.tconv1.", cm);
    init_attn_stack(&mut store, &mut rng, "mid.", cm, cfg.text_dim);
    init_res_block(&mut store, &mut rng, "mid.res2.", cm, cm, cfg.emb_dim);
    init_temporal_conv(&mut store, "mid.tconv2.", cm);

    // Decoder.
    for level in (0..cfg.levels).rev() {
        let c = cfg.channels(level);
        let p = format!("dec{level}.");
        init_res_block(&mut store, &mut rng, &format!("{p}res."), 2 * c, c, cfg.emb_dim);
        init_temporal_conv(&mut store, &format!("{p}tconv."), c);
        if cfg.has_attn(level) {
            init_attn_stack(&mut store, &mut rng, &p, c, cfg.text_dim);
        }
        if level > 0 {
            let c_prev = cfg.channels(level - 1);
            store.normal(
                format!("{p}up.w"),
                &[c_prev, c, 3, 3],
                1.0 / ((c * 9) as f64).sqrt(),
                &mut rng,
            );
            store.zeros(format!("{p}up.b"), &[c_prev]);
        }
    }

    // Output head; conv zero-initialized so an untrained model predicts 0.
    store.ones("out.norm.g", &[c0]);
    store.zeros("out.norm.b", &[c0]);
    store.zeros("out.conv.w", &[c_lat, c0, 3, 3]);
    store.zeros("out.conv.b", &[c_lat]);

    Ok(BackboneParams {
        cfg: cfg.clone(),
        store,
    })
}

/// Interleaved `[sin, cos]` positional encoding of a (real) position.
pub fn sinusoidal(pos: f64, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    out
}

/// Run a sinusoidal vector through a two-layer SiLU MLP stored under
/// `l1`/`l2` names with the given prefix; returns a `(emb_dim,)` node.
pub fn position_mlp_graph<T: Scalar>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    prefix: &str,
    pos: &Array1<f64>,
    emb_dim: usize,
) -> Var {
    let dim = pos.len();
    let data: Vec<T> = pos.iter().map(|&v| T::from_f64(v)).collect();
    let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, dim]), data).unwrap());
    let l1w = gp.get(&format!("{prefix}l1.w"));
    let l1b = gp.get(&format!("{prefix}l1.b"));
    let h = g.linear(x, l1w, Some(l1b));
    let h = g.silu(h);
    let l2w = gp.get(&format!("{prefix}l2.w"));
    let l2b = gp.get(&format!("{prefix}l2.b"));
    let e = g.linear(h, l2w, Some(l2b));
    g.reshape(e, &[emb_dim])
}

/// Per-frame timestep embedding sequence `(f, emb_dim)`: sinusoid → MLP →
/// repeat over frames.
pub fn timestep_embedding_graph<T: Scalar>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    cfg: &BackboneConfig,
    t: f64,
    frames: usize,
) -> Var {
    let pos = sinusoidal(t, cfg.time_dim);
    let e = position_mlp_graph(g, gp, "temb.", &pos, cfg.emb_dim);
    g.repeat_rows(e, frames)
}

fn pv(gp: &GraphParams, prefix: &str, name: &str) -> Var {
    gp.get(&format!("{prefix}{name}"))
}

fn res_block_graph<T: Scalar>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    prefix: &str,
    x: Var,
    temb_seq: Var,
    groups: usize,
) -> Var {
    let c_in = g.shape(x)[1];
    let n1g = pv(gp, prefix, "norm1.g");
    let n1b = pv(gp, prefix, "norm1.b");
    let xn = g.group_norm(x, n1g, n1b, groups, NORM_EPS);
    let xa = g.silu(xn);
    let c1w = pv(gp, prefix, "conv1.w");
    let c1b = pv(gp, prefix, "conv1.b");
    let mut h = g.conv2d(xa, c1w, c1b, 1, 1);
    let c_out = g.shape(h)[1];
    // Per-frame timestep injection.
    let ts = g.silu(temb_seq);
    let ew = pv(gp, prefix, "emb.w");
    let eb = pv(gp, prefix, "emb.b");
    let proj = g.linear(ts, ew, Some(eb));
    h = g.per_frame_bias(h, proj);
    let n2g = pv(gp, prefix, "norm2.g");
    let n2b = pv(gp, prefix, "norm2.b");
    let hn = g.group_norm(h, n2g, n2b, groups, NORM_EPS);
    let ha = g.silu(hn);
    let c2w = pv(gp, prefix, "conv2.w");
    let c2b = pv(gp, prefix, "conv2.b");
    let h2 = g.conv2d(ha, c2w, c2b, 1, 1);
    let skip = if c_in != c_out {
        let sw = pv(gp, prefix, "skip.w");
        let sb = pv(gp, prefix, "skip.b");
        g.conv2d(x, sw, sb, 1, 0)
    } else {
        x
    };
    g.add(h2, skip)
}

fn temporal_conv_graph<T: Scalar>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    prefix: &str,
    x: Var,
    groups: usize,
) -> Var {
    let ng = pv(gp, prefix, "norm.g");
    let nb = pv(gp, prefix, "norm.b");
    let xn = g.group_norm(x, ng, nb, groups, NORM_EPS);
    let xa = g.silu(xn);
    let w = pv(gp, prefix, "w");
    let b = pv(gp, prefix, "b");
    let t = g.temporal_conv(xa, w, b);
    g.add(x, t)
}

fn to_spatial_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> (Var, [usize; 4]) {
    let sh = g.shape(x).to_vec();
    let (f, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let r = g.reshape(x, &[f, c, h * w]);
    (g.permute(r, &[0, 2, 1]), [f, c, h, w])
}

fn from_spatial_tokens<T: Scalar>(g: &mut Graph<T>, tokens: Var, dims: [usize; 4]) -> Var {
    let [f, c, h, w] = dims;
    let p = g.permute(tokens, &[0, 2, 1]);
    g.reshape(p, &[f, c, h, w])
}

/// Single-head attention over `tokens (B, N, C)` with keys/values from
/// `context`; `context` is either rank 3 `(B, M, C)` or rank 2 `(M, C_ctx)`
/// shared across the batch.
fn attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    prefix: &str,
    tokens: Var,
    context: Var,
) -> Var {
    let tsh = g.shape(tokens).to_vec();
    let (b, n, c) = (tsh[0], tsh[1], tsh[2]);
    let flat = g.reshape(tokens, &[b * n, c]);
    let qw = pv(gp, prefix, "q.w");
    let q = g.linear(flat, qw, None);
    let q3 = g.reshape(q, &[b, n, c]);

    let csh = g.shape(context).to_vec();
    let kw = pv(gp, prefix, "k.w");
    let vw = pv(gp, prefix, "v.w");
    let (k, v) = if csh.len() == 3 {
        let m = csh[1];
        let cflat = g.reshape(context, &[b * m, csh[2]]);
        let k = g.linear(cflat, kw, None);
        let v = g.linear(cflat, vw, None);
        (g.reshape(k, &[b, m, c]), g.reshape(v, &[b, m, c]))
    } else {
        (g.linear(context, kw, None), g.linear(context, vw, None))
    };

    let scores = g.bmm(q3, k, true);
    let scaled = g.scale(scores, 1.0 / (c as f64).sqrt());
    let attn = g.softmax(scaled);
    let out = g.bmm(attn, v, false);
    let oflat = g.reshape(out, &[b * n, c]);
    let ow = pv(gp, prefix, "o.w");
    let ob = pv(gp, prefix, "o.b");
    let proj = g.linear(oflat, ow, Some(ob));
    g.reshape(proj, &[b, n, c])
}

fn spatial_self_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    prefix: &str,
    x: Var,
    groups: usize,
) -> Var {
    let ng = pv(gp, prefix, "norm.g");
    let nb = pv(gp, prefix, "norm.b");
    let xn = g.group_norm(x, ng, nb, groups, NORM_EPS);
    let (tokens, dims) = to_spatial_tokens(g, xn);
    let out = attention_graph(g, gp, prefix, tokens, tokens);
    let spat = from_spatial_tokens(g, out, dims);
    g.add(x, spat)
}

fn cross_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    prefix: &str,
    x: Var,
    ctx: Var,
    groups: usize,
) -> Var {
    let ng = pv(gp, prefix, "norm.g");
    let nb = pv(gp, prefix, "norm.b");
    let xn = g.group_norm(x, ng, nb, groups, NORM_EPS);
    let (tokens, dims) = to_spatial_tokens(g, xn);
    let out = attention_graph(g, gp, prefix, tokens, ctx);
    let spat = from_spatial_tokens(g, out, dims);
    g.add(x, spat)
}

fn temporal_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    prefix: &str,
    x: Var,
    groups: usize,
) -> Var {
    let sh = g.shape(x).to_vec();
    let (f, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let ng = pv(gp, prefix, "norm.g");
    let nb = pv(gp, prefix, "norm.b");
    let xn = g.group_norm(x, ng, nb, groups, NORM_EPS);
    let r = g.reshape(xn, &[f, c, h * w]);
    let tokens = g.permute(r, &[2, 0, 1]); // (hw, f, c)
    let out = attention_graph(g, gp, prefix, tokens, tokens);
    let back = g.permute(out, &[1, 2, 0]); // (f, c, hw)
    let spat = g.reshape(back, &[f, c, h, w]);
    g.add(x, spat)
}

/// One spatial stage of attention (self + cross) followed by its temporal
/// attention, under a shared level prefix.
fn attention_stack_graph<T: Scalar>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    level_prefix: &str,
    x: Var,
    ctx: Var,
    groups: usize,
) -> Var {
    let h = spatial_self_attention_graph(g, gp, &format!("{level_prefix}attn."), x, groups);
    let h = cross_attention_graph(g, gp, &format!("{level_prefix}xattn."), h, ctx, groups);
    temporal_attention_graph(g, gp, &format!("{level_prefix}tattn."), h, groups)
}

/// Residuals injected into the skip connections and the middle block.
pub struct Injection {
    pub enc: Vec<Var>,
    pub mid: Var,
}

/// Full UNet forward on the tape. `z_t: (F, C_lat, H, W)`,
/// `temb_seq: (F, emb_dim)`, `ctx: (text_tokens, text_dim)`.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    gp: &GraphParams,
    cfg: &BackboneConfig,
    z_t: Var,
    temb_seq: Var,
    ctx: Var,
    inject: Option<&Injection>,
) -> Var {
    let groups = cfg.norm_groups;
    let ciw = gp.get("conv_in.w");
    let cib = gp.get("conv_in.b");
    let mut h = g.conv2d(z_t, ciw, cib, 1, 1);

    let mut skips: Vec<Var> = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let p = format!("enc{level}.");
        h = res_block_graph(g, gp, &format!("{p}res."), h, temb_seq, groups);
        h = temporal_conv_graph(g, gp, &format!("{p}tconv."), h, groups);
        if cfg.has_attn(level) {
            h = attention_stack_graph(g, gp, &p, h, ctx, groups);
        }
        skips.push(h);
        if level + 1 < cfg.levels {
            let dw = pv(gp, &p, "down.w");
            let db = pv(gp, &p, "down.b");
            h = g.conv2d(h, dw, db, 2, 1);
        }
    }

    h = res_block_graph(g, gp, "mid.res1.", h, temb_seq, groups);
    h = temporal_conv_graph(g, gp, "mid.tconv1.", h, groups);
    h = attention_stack_graph(g, gp, "mid.", h, ctx, groups);
    h = res_block_graph(g, gp, "mid.res2.", h, temb_seq, groups);
    h = temporal_conv_graph(g, gp, "mid.tconv2.", h, groups);
    if let Some(inj) = inject {
        h = g.add(h, inj.mid);
    }

    for level in (0..cfg.levels).rev() {
        let p = format!("dec{level}.");
        let mut skip = skips[level];
        if let Some(inj) = inject {
            skip = g.add(skip, inj.enc[level]);
        }
        h = g.concat(h, skip, 1);
        h = res_block_graph(g, gp, &format!("{p}res."), h, temb_seq, groups);
        h = temporal_conv_graph(g, gp, &format!("{p}tconv."), h, groups);
        if cfg.has_attn(level) {
            h = attention_stack_graph(g, gp, &p, h, ctx, groups);
        }
        if level > 0 {
            let target = g.shape(skips[level - 1]).to_vec();
            h = g.upsample_nearest(h, target[2], target[3]);
            let uw = pv(gp, &p, "up.w");
            let ub = pv(gp, &p, "up.b");
            h = g.conv2d(h, uw, ub, 1, 1);
        }
    }

    let ong = gp.get("out.norm.g");
    let onb = gp.get("out.norm.b");
    let hn = g.group_norm(h, ong, onb, groups, NORM_EPS);
    let ha = g.silu(hn);
    let ow = gp.get("out.conv.w");
    let ob = gp.get("out.conv.b");
    g.conv2d(ha, ow, ob, 1, 1)
}

/// Validate a latent batch against the config.
pub fn validate_latent_input(cfg: &BackboneConfig, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::Shape(format!("expected rank-4 latents, got {shape:?}")));
    }
    let (f, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if f == 0 || f > cfg.frame_capacity {
        return Err(Error::Shape(format!(
            "frame count {f} outside capacity 1..={}",
            cfg.frame_capacity
        )));
    }
    if c != cfg.latent_channels {
        return Err(Error::Shape(format!(
            "latent channels {c} != configured {}",
            cfg.latent_channels
        )));
    }
    let min = cfg.min_latent_side();
    if h < min || w < min {
        return Err(Error::Shape(format!(
            "latent size {h}x{w} below minimum {min}x{min}"
        )));
    }
    Ok(())
}

/// Value-level denoiser forward: predicts v for all frames.
///
/// `t_emb_seq` is the per-frame time embedding `(f, emb_dim)`; `text` is the
/// caption context `(text_tokens, text_dim)`.
pub fn denoise_base<T: Scalar>(
    params: &BackboneParams<T>,
    z_t: &Array4<T>,
    t_emb_seq: &Array2<T>,
    text: &Array2<T>,
) -> Result<Array4<T>> {
    validate_latent_input(&params.cfg, z_t.shape())?;
    let f = z_t.shape()[0];
    if t_emb_seq.shape() != [f, params.cfg.emb_dim] {
        return Err(Error::Shape(format!(
            "time embedding shape {:?}, expected ({f}, {})",
            t_emb_seq.shape(),
            params.cfg.emb_dim
        )));
    }
    if text.shape() != [params.cfg.text_tokens, params.cfg.text_dim] {
        return Err(Error::Shape(format!(
            "text context shape {:?}, expected ({}, {})",
            text.shape(),
            params.cfg.text_tokens,
            params.cfg.text_dim
        )));
    }
    let mut g = Graph::<T>::new();
    let gp = register_store(&mut g, &params.store, false, "");
    let z = g.constant(z_t.clone().into_dyn());
    let te = g.constant(t_emb_seq.clone().into_dyn());
    let ctx = g.constant(text.clone().into_dyn());
    let out = forward_graph(&mut g, &gp, &params.cfg, z, te, ctx, None);
    Ok(g.value(out)
        .clone()
        .into_dimensionality()
        .expect("rank-4 output"))
}

/// Value-level timestep embedding sequence for step `t` over `f` frames.
pub fn timestep_embedding<T: Scalar>(
    params: &BackboneParams<T>,
    t: f64,
    frames: usize,
) -> Array2<T> {
    let mut g = Graph::<T>::new();
    let gp = register_store(&mut g, &params.store, false, "");
    let e = timestep_embedding_graph(&mut g, &gp, &params.cfg, t, frames);
    g.value(e).clone().into_dimensionality().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::register_store;

    fn micro() -> BackboneConfig {
        BackboneConfig::micro()
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_backbone::<f32>(&micro(), 42).unwrap();
        let b = init_backbone::<f32>(&micro(), 42).unwrap();
        assert_eq!(a.store, b.store);
        let c = init_backbone::<f32>(&micro(), 43).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn temporal_outputs_zero_at_init() {
        let params = init_backbone::<f32>(&micro(), 1).unwrap();
        let mut seen = 0;
        for (name, tensor) in params.store.iter() {
            if is_temporal_output_name(name) {
                seen += 1;
                assert!(
                    tensor.iter().all(|&v| v == 0.0),
                    "temporal output {name} not zero at init"
                );
            }
        }
        assert!(seen >= 8, "expected several temporal output tensors, saw {seen}");
    }

    #[test]
    fn config_validation_rejects_bad_setups() {
        let mut cfg = micro();
        cfg.temporal_kernel = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = micro();
        cfg.attn_levels = vec![0];
        assert!(cfg.validate().is_err(), "lowest level must carry attention");
        let mut cfg = micro();
        cfg.channel_mults = vec![1];
        assert!(cfg.validate().is_err());
    }

    /// Closed-form parameter count from the config, written out separately
    /// from the init code's enumeration.
    fn expected_param_count(cfg: &BackboneConfig) -> usize {
        let cl = cfg.latent_channels;
        let ed = cfg.emb_dim;
        let td = cfg.text_dim;
        let res = |cin: usize, cout: usize| {
            let mut n = 2 * cin; // norm1
            n += cout * cin * 9 + cout; // conv1
            n += ed * cout + cout; // emb proj
            n += 2 * cout; // norm2
            n += cout * cout * 9 + cout; // conv2
            if cin != cout {
                n += cout * cin + cout; // 1x1 skip
            }
            n
        };
        let tconv = |c: usize| 2 * c + c * c * 3 + c;
        let attn_stack = |c: usize| {
            let self_attn = 2 * c + 3 * c * c + c * c + c;
            let cross = 2 * c + c * c + 2 * (td * c) + c * c + c;
            let temporal = 2 * c + 3 * c * c + c * c + c;
            self_attn + cross + temporal
        };

        let c0 = cfg.channels(0);
        let mut total = c0 * cl * 9 + c0; // conv_in
        total += cfg.time_dim * ed + ed + ed * ed + ed; // time MLP
        total += cfg.text_buckets * td + td; // text table + null
        let mut cin = c0;
        for l in 0..cfg.levels {
            let c = cfg.channels(l);
            total += res(cin, c) + tconv(c);
            if cfg.has_attn(l) {
                total += attn_stack(c);
            }
            if l + 1 < cfg.levels {
                total += c * c * 9 + c; // downsample
            }
            cin = c;
        }
        let cm = cfg.channels(cfg.levels - 1);
        total += 2 * (res(cm, cm) + tconv(cm)) + attn_stack(cm);
        for l in 0..cfg.levels {
            let c = cfg.channels(l);
            total += res(2 * c, c) + tconv(c);
            if cfg.has_attn(l) {
                total += attn_stack(c);
            }
            if l > 0 {
                let cp = cfg.channels(l - 1);
                total += cp * c * 9 + cp; // upsample conv
            }
        }
        total += 2 * c0 + cl * c0 * 9 + cl; // out head
        total
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [micro(), BackboneConfig::toy()] {
            let params = init_backbone::<f32>(&cfg, 0).unwrap();
            assert_eq!(
                params.store.total_elements(),
                expected_param_count(&cfg),
                "parameter count mismatch for {cfg:?}"
            );
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = micro();
        let params = init_backbone::<f32>(&cfg, 7).unwrap();
        let mut rng = SeededRng::new(3);
        let z: Array4<f32> = rng
            .normal_array::<f32>(&[5, 48, 8, 8])
            .into_dimensionality()
            .unwrap();
        let temb = timestep_embedding(&params, 500.0, 5);
        let text = embed_text("a red square moving left", &params.store, &cfg);
        let v = denoise_base(&params, &z, &temb, &text.vectors).unwrap();
        assert_eq!(v.dim(), (5, 48, 8, 8));
    }

    #[test]
    fn rejects_capacity_and_channel_violations() {
        let cfg = micro();
        let params = init_backbone::<f32>(&cfg, 7).unwrap();
        let temb = timestep_embedding(&params, 0.0, 2);
        let text = embed_text("", &params.store, &cfg);
        let bad_channels = Array4::<f32>::zeros((2, 47, 8, 8));
        assert!(denoise_base(&params, &bad_channels, &temb, &text.vectors).is_err());
        let too_many = Array4::<f32>::zeros((cfg.frame_capacity + 1, 48, 8, 8));
        let temb_many = timestep_embedding(&params, 0.0, cfg.frame_capacity + 1);
        assert!(denoise_base(&params, &too_many, &temb_many, &text.vectors).is_err());
    }

    #[test]
    fn init_commutes_with_frame_permutation() {
        // With zero temporal outputs the network treats frames independently,
        // so permuting input frames (together with their embeddings) permutes
        // the output bitwise.
        let cfg = micro();
        let params = init_backbone::<f32>(&cfg, 9).unwrap();
        let mut rng = SeededRng::new(5);
        let z: Array4<f32> = rng
            .normal_array::<f32>(&[4, 48, 8, 8])
            .into_dimensionality()
            .unwrap();
        // Distinct per-frame embeddings make this a strict test.
        let temb: Array2<f32> = rng
            .normal_array::<f32>(&[4, cfg.emb_dim])
            .into_dimensionality()
            .unwrap();
        let text = embed_text("a blue circle", &params.store, &cfg);
        let base = denoise_base(&params, &z, &temb, &text.vectors).unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut zp = z.clone();
        let mut tp = temb.clone();
        for (dst, &src) in perm.iter().enumerate() {
            zp.index_axis_mut(ndarray::Axis(0), dst)
                .assign(&z.index_axis(ndarray::Axis(0), src));
            tp.index_axis_mut(ndarray::Axis(0), dst)
                .assign(&temb.index_axis(ndarray::Axis(0), src));
        }
        let permuted = denoise_base(&params, &zp, &tp, &text.vectors).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                permuted.index_axis(ndarray::Axis(0), dst),
                base.index_axis(ndarray::Axis(0), src),
                "frame {dst} mismatch"
            );
        }
    }

    #[test]
    fn captions_change_output_through_cross_attention() {
        // The zero-initialized output head hides everything at init; give it
        // small nonzero weights so caption influence is observable.
        let cfg = micro();
        let mut params = init_backbone::<f32>(&cfg, 11).unwrap();
        let mut rng = SeededRng::new(6);
        let head = rng.normal_array::<f32>(&[48, cfg.channels(0), 3, 3]);
        *params.store.get_mut("out.conv.w") = head * 0.05;
        let z: Array4<f32> = rng
            .normal_array::<f32>(&[2, 48, 8, 8])
            .into_dimensionality()
            .unwrap();
        let temb = timestep_embedding(&params, 300.0, 2);
        let a = embed_text("a red circle moving left", &params.store, &cfg);
        let b = embed_text("a blue square moving right", &params.store, &cfg);
        let va = denoise_base(&params, &z, &temb, &a.vectors).unwrap();
        let vb = denoise_base(&params, &z, &temb, &b.vectors).unwrap();
        let diff = (&va - &vb).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(diff > 0.0, "captions had no effect");
    }

    #[test]
    fn sinusoid_alternates_at_zero() {
        let s = sinusoidal(0.0, 16);
        for i in 0..8 {
            assert_eq!(s[2 * i], 0.0, "sin(0) at slot {i}");
            assert_eq!(s[2 * i + 1], 1.0, "cos(0) at slot {i}");
        }
        let a = sinusoidal(0.0, 32);
        let b = sinusoidal(500.0, 32);
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        // Probe a few parameters of every kind on a tiny f64 model.
        let mut cfg = micro();
        cfg.base_channels = 8;
        cfg.text_dim = 16;
        cfg.time_dim = 16;
        cfg.emb_dim = 32;
        cfg.text_buckets = 64;
        let params = init_backbone::<f64>(&cfg, 21).unwrap();
        let mut rng = SeededRng::new(22);
        let z: Array4<f64> = rng
            .normal_array::<f64>(&[3, 48, 4, 4])
            .into_dimensionality()
            .unwrap();
        let target: Array4<f64> = rng
            .normal_array::<f64>(&[3, 48, 4, 4])
            .into_dimensionality()
            .unwrap();
        let tokens = vec![3usize, 17, 31];

        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::<f64>::new();
            let gp = register_store(&mut g, store, false, "");
            let zv = g.constant(z.clone().into_dyn());
            let ctx = text_context_graph(&mut g, &gp, &tokens, &cfg);
            let te = timestep_embedding_graph(&mut g, &gp, &cfg, 420.0, 3);
            let out = forward_graph(&mut g, &gp, &cfg, zv, te, ctx, None);
            let tv = g.constant(target.clone().into_dyn());
            let loss = g.mse_loss(out, tv);
            g.scalar_value(loss)
        };

        // Analytic gradients.
        let mut g = Graph::<f64>::new();
        let gp = register_store(&mut g, &params.store, true, "");
        let zv = g.constant(z.clone().into_dyn());
        let ctx = text_context_graph(&mut g, &gp, &tokens, &cfg);
        let te = timestep_embedding_graph(&mut g, &gp, &cfg, 420.0, 3);
        let out = forward_graph(&mut g, &gp, &cfg, zv, te, ctx, None);
        let tv = g.constant(target.clone().into_dyn());
        let loss = g.mse_loss(out, tv);
        let grads = g.backward(loss);
        let named = g.trainable_grads(&grads);

        let probes = [
            ("enc0.res.conv1.w", 5),
            ("enc1.tconv.w", 3),
            ("enc1.attn.q.w", 4),
            ("enc1.xattn.k.w", 4),
            ("enc1.tattn.o.w", 3),
            ("mid.res1.emb.w", 4),
            ("temb.l1.w", 3),
            ("dec0.res.conv2.w", 3),
            ("out.norm.g", 2),
            ("text.table", 2),
        ];
        let h = 1e-5;
        for (name, count) in probes {
            let tensor = params.store.get(name);
            let len = tensor.len();
            let analytic = &named[name];
            for probe in 0..count {
                let idx = (probe * 997) % len;
                let mut plus = params.store.clone();
                plus.get_mut(name).as_slice_mut().unwrap()[idx] += h;
                let mut minus = params.store.clone();
                minus.get_mut(name).as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-3,
                    "{name}[{idx}]: fd={fd:.9} analytic={an:.9}"
                );
            }
        }
    }
}
