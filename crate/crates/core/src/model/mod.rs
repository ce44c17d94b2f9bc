//! The conditional denoiser: a 1D U-Net context encoder over the history
//! window plus a noise predictor that fuses the noisy future sequence with
//! the encoded context.
//!
//! Encoder down path, per stage: two residual convolutional blocks, a
//! stride-2 convolution that halves the sequence, then a self-attention
//! block (variant permitting). The up path mirrors it with 2x upsampling and
//! skip connections concatenated channel-wise. The predictor embeds the noisy
//! sequence into tokens, adds the timestep embedding to the context map, and
//! fuses via cross-attention (noisy tokens query the context) or, for the
//! ablated variants, via a mean-pooled context bias.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::config::{ModelConfig, ModelVariant, UpsampleMode};
use crate::error::{CoreError, Result};
use crate::nn::{
    checkpoint, sinusoidal_encoding, timestep_encoding, NodeId, ParamStore, Tape, Tensor,
};

const GN_GROUPS: usize = 8;
const GN_EPS: f64 = 1e-5;

/// Full architectural description; `feature_dim` is the number of selected
/// conditioning features per history week.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CduaConfig {
    pub history_len: usize,
    pub horizon: usize,
    pub feature_dim: usize,
    pub condition_on_capacity: bool,
    pub channels: Vec<usize>,
    pub heads: usize,
    pub time_embed_dim: usize,
    pub variant: ModelVariant,
    pub upsample: UpsampleMode,
}

impl CduaConfig {
    pub fn from_model_config(mc: &ModelConfig, feature_dim: usize) -> Self {
        Self {
            history_len: mc.history_len,
            horizon: mc.horizon,
            feature_dim,
            condition_on_capacity: mc.condition_on_capacity,
            channels: mc.channels.clone(),
            heads: mc.heads,
            time_embed_dim: mc.time_embed_dim,
            variant: mc.variant,
            upsample: mc.upsample,
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len() - 1
    }

    /// Conditioning channels per history week.
    pub fn in_channels(&self) -> usize {
        self.feature_dim + usize::from(self.condition_on_capacity)
    }

    /// History length rounded up so every stage halves evenly.
    pub fn padded_len(&self) -> usize {
        let unit = 1 << self.stages();
        self.history_len.div_ceil(unit) * unit
    }

    /// Token width of the context map.
    pub fn ctx_dim(&self) -> usize {
        self.channels[0]
    }

    /// Token width inside the noise predictor.
    pub fn predictor_dim(&self) -> usize {
        self.channels[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(CoreError::Config("channels needs >= 2 entries".into()));
        }
        if !self.channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::Config("channels must be strictly increasing".into()));
        }
        for &c in &self.channels {
            if c % GN_GROUPS != 0 || c % self.heads != 0 {
                return Err(CoreError::Config(format!(
                    "channel width {c} must be divisible by {GN_GROUPS} groups and {} heads",
                    self.heads
                )));
            }
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(CoreError::Config("time_embed_dim must be even".into()));
        }
        if self.feature_dim == 0 && !self.condition_on_capacity {
            return Err(CoreError::Config("model needs at least one input channel".into()));
        }
        Ok(())
    }
}

fn init_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let draw: f64 = rng.sample(StandardNormal);
        *v = draw * std;
    }
    t
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, zero: bool) -> Result<()> {
        let std = if zero { 0.0 } else { (1.0 / (c_in * k) as f64).sqrt() };
        self.store
            .insert(&format!("{name}.w"), init_tensor(&[c_out, c_in, k], std, self.rng))?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[c_out]))
    }

    fn conv_t(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<()> {
        let std = (1.0 / c_in as f64).sqrt();
        self.store
            .insert(&format!("{name}.w"), init_tensor(&[c_in, c_out, 2], std, self.rng))?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[c_out]))
    }

    fn linear(&mut self, name: &str, d_out: usize, d_in: usize) -> Result<()> {
        let std = (1.0 / d_in as f64).sqrt();
        self.store
            .insert(&format!("{name}.w"), init_tensor(&[d_out, d_in], std, self.rng))?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[d_out]))
    }

    fn group_norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.store.insert(&format!("{name}.g"), Tensor::filled(&[c], 1.0))?;
        self.store.insert(&format!("{name}.be"), Tensor::zeros(&[c]))
    }

    /// gn -> gelu -> conv3 -> gn -> gelu -> conv3(zero) plus skip. The
    /// zero-initialized final conv makes the block the skip map at init.
    fn res_block(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<()> {
        self.group_norm(&format!("{name}.gn1"), c_in)?;
        self.conv(&format!("{name}.conv1"), c_out, c_in, 3, false)?;
        self.group_norm(&format!("{name}.gn2"), c_out)?;
        self.conv(&format!("{name}.conv2"), c_out, c_out, 3, true)?;
        if c_in != c_out {
            self.conv(&format!("{name}.skip"), c_out, c_in, 1, false)?;
        }
        Ok(())
    }

    fn attn_block(&mut self, name: &str, c: usize) -> Result<()> {
        self.group_norm(&format!("{name}.gn"), c)?;
        self.linear(&format!("{name}.q"), c, c)?;
        self.linear(&format!("{name}.k"), c, c)?;
        self.linear(&format!("{name}.v"), c, c)?;
        self.linear(&format!("{name}.o"), c, c)?;
        Ok(())
    }
}

/// The assembled model: config plus a named parameter store.
#[derive(Debug, Clone)]
pub struct CduaModel {
    pub config: CduaConfig,
    pub params: ParamStore,
    /// Test hook: disabling feeds zeros into the decoder skip fusion.
    skips_enabled: bool,
}

impl CduaModel {
    pub fn new(config: CduaConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let ch = &config.channels;
        let stages = config.stages();

        // context encoder
        b.conv("ctx.stem", ch[0], config.in_channels(), 3, false)?;
        for s in 0..stages {
            b.res_block(&format!("ctx.down{s}.res1"), ch[s], ch[s])?;
            b.res_block(&format!("ctx.down{s}.res2"), ch[s], ch[s])?;
            b.conv(&format!("ctx.down{s}.pool"), ch[s + 1], ch[s], 3, false)?;
            if config.variant.self_attention() {
                b.attn_block(&format!("ctx.down{s}.attn"), ch[s + 1])?;
            }
        }
        b.res_block("ctx.mid.res1", ch[stages], ch[stages])?;
        b.res_block("ctx.mid.res2", ch[stages], ch[stages])?;
        for s in (0..stages).rev() {
            match config.upsample {
                UpsampleMode::TransposedConv => {
                    b.conv_t(&format!("ctx.up{s}.up"), ch[s + 1], ch[s])?;
                }
                UpsampleMode::LinearInterp => {
                    b.conv(&format!("ctx.up{s}.up"), ch[s], ch[s + 1], 1, false)?;
                }
            }
            b.res_block(&format!("ctx.up{s}.res1"), 2 * ch[s], ch[s])?;
            b.res_block(&format!("ctx.up{s}.res2"), ch[s], ch[s])?;
        }
        b.conv("ctx.head", config.ctx_dim(), ch[0], 3, false)?;

        // noise predictor
        let dm = config.predictor_dim();
        let dc = config.ctx_dim();
        b.linear("den.embed", dm, 1)?;
        b.linear("den.time.fc1", config.time_embed_dim, config.time_embed_dim)?;
        b.linear("den.time.fc2", dc, config.time_embed_dim)?;
        b.res_block("den.res1", dm, dm)?;
        if config.variant.cross_attention() {
            b.linear("den.cross.q", dm, dm)?;
            b.linear("den.cross.k", dm, dc)?;
            b.linear("den.cross.v", dm, dc)?;
            b.linear("den.cross.o", dm, dm)?;
        } else {
            b.linear("den.pool.proj", dm, dc)?;
        }
        b.res_block("den.res2", dm, dm)?;
        b.group_norm("den.head.gn", dm)?;
        b.conv("den.head.conv", 1, dm, 3, false)?;

        Ok(Self {
            config,
            params: store,
            skips_enabled: true,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.n_scalars()
    }

    /// Structural count of self-attention blocks in the encoder.
    pub fn self_attention_blocks(&self) -> usize {
        self.params
            .names()
            .filter(|n| n.starts_with("ctx.") && n.ends_with(".attn.q.w"))
            .count()
    }

    pub fn uses_cross_attention(&self) -> bool {
        self.params.names().any(|n| n.starts_with("den.cross."))
    }

    pub fn set_skips_enabled(&mut self, enabled: bool) {
        self.skips_enabled = enabled;
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        Ok(tape.param(name, self.params.get(name)?.clone()))
    }

    fn conv(
        &self,
        tape: &mut Tape,
        name: &str,
        x: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let w = self.p(tape, &format!("{name}.w"))?;
        let b = self.p(tape, &format!("{name}.b"))?;
        tape.conv1d(x, w, b, stride)
    }

    fn linear(&self, tape: &mut Tape, name: &str, x: NodeId) -> Result<NodeId> {
        let w = self.p(tape, &format!("{name}.w"))?;
        let b = self.p(tape, &format!("{name}.b"))?;
        tape.linear(x, w, b)
    }

    fn group_norm(&self, tape: &mut Tape, name: &str, x: NodeId) -> Result<NodeId> {
        let g = self.p(tape, &format!("{name}.g"))?;
        let be = self.p(tape, &format!("{name}.be"))?;
        tape.group_norm(x, g, be, GN_GROUPS, GN_EPS)
    }

    fn res_block(&self, tape: &mut Tape, name: &str, x: NodeId) -> Result<NodeId> {
        let h = self.group_norm(tape, &format!("{name}.gn1"), x)?;
        let h = tape.gelu(h);
        let h = self.conv(tape, &format!("{name}.conv1"), h, 1)?;
        let h = self.group_norm(tape, &format!("{name}.gn2"), h)?;
        let h = tape.gelu(h);
        let h = self.conv(tape, &format!("{name}.conv2"), h, 1)?;
        let skip_name = format!("{name}.skip.w");
        let skip = if self.params.get(&skip_name).is_ok() {
            self.conv(tape, &format!("{name}.skip"), x, 1)?
        } else {
            x
        };
        tape.add(h, skip)
    }

    fn attn_block(&self, tape: &mut Tape, name: &str, x: NodeId) -> Result<NodeId> {
        let h = self.group_norm(tape, &format!("{name}.gn"), x)?;
        let tok = tape.swap_axes_12(h)?;
        let q = self.linear(tape, &format!("{name}.q"), tok)?;
        let k = self.linear(tape, &format!("{name}.k"), tok)?;
        let v = self.linear(tape, &format!("{name}.v"), tok)?;
        let a = tape.attention(q, k, v, self.config.heads)?;
        let o = self.linear(tape, &format!("{name}.o"), a)?;
        let o = tape.swap_axes_12(o)?;
        tape.add(x, o)
    }

    /// Pad `[B, L, C]` histories with leading zeros up to the padded length.
    pub fn pad_history(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.config.in_channels() {
            return Err(CoreError::Shape(format!(
                "history must be [B, L, {}], got {:?}",
                self.config.in_channels(),
                s
            )));
        }
        let (b, l, c) = (s[0], s[1], s[2]);
        let target = self.config.padded_len();
        if l == target {
            return Ok(x.clone());
        }
        if l > target {
            return Err(CoreError::Shape(format!(
                "history length {l} exceeds padded length {target}"
            )));
        }
        let mut out = Tensor::zeros(&[b, target, c]);
        let pad = target - l;
        for bi in 0..b {
            let src = bi * l * c;
            let dst = (bi * target + pad) * c;
            out.data_mut()[dst..dst + l * c].copy_from_slice(&x.data()[src..src + l * c]);
        }
        Ok(out)
    }

    /// Encode a padded history block `[B, L_pad, C_in]` into context tokens
    /// `[B, L_pad, ctx_dim]`.
    pub fn encode_context_on(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let s = tape.value(x).shape().to_vec();
        let l = self.config.padded_len();
        if s.len() != 3 || s[1] != l || s[2] != self.config.in_channels() {
            return Err(CoreError::Shape(format!(
                "encoder expects [B, {l}, {}], got {s:?}",
                self.config.in_channels()
            )));
        }
        if !tape.value(x).all_finite() {
            return Err(CoreError::Validation("encoder input contains NaN/Inf".into()));
        }
        let stages = self.config.stages();
        let ch = tape.swap_axes_12(x)?;
        let mut h = self.conv(tape, "ctx.stem", ch, 1)?;
        // positional encoding over the sequence, in channel layout
        let pe = sinusoidal_encoding(
            &(0..l).map(|p| p as f64).collect::<Vec<_>>(),
            self.config.channels[0],
        )?;
        let mut pe_ch = Tensor::zeros(&[self.config.channels[0], l]);
        for p in 0..l {
            for d in 0..self.config.channels[0] {
                pe_ch.data_mut()[d * l + p] = pe.data()[p * self.config.channels[0] + d];
            }
        }
        let pe_id = tape.constant(pe_ch);
        h = tape.add_batch_bcast(h, pe_id)?;

        let mut skips = Vec::with_capacity(stages);
        for s in 0..stages {
            h = self.res_block(tape, &format!("ctx.down{s}.res1"), h)?;
            h = self.res_block(tape, &format!("ctx.down{s}.res2"), h)?;
            skips.push(h);
            h = self.conv(tape, &format!("ctx.down{s}.pool"), h, 2)?;
            if self.config.variant.self_attention() {
                h = self.attn_block(tape, &format!("ctx.down{s}.attn"), h)?;
            }
        }
        h = self.res_block(tape, "ctx.mid.res1", h)?;
        h = self.res_block(tape, "ctx.mid.res2", h)?;
        for s in (0..stages).rev() {
            h = match self.config.upsample {
                UpsampleMode::TransposedConv => {
                    let w = self.p(tape, &format!("ctx.up{s}.up.w"))?;
                    let b = self.p(tape, &format!("ctx.up{s}.up.b"))?;
                    tape.conv_transpose_2x(h, w, b)?
                }
                UpsampleMode::LinearInterp => {
                    let up = tape.upsample_linear_2x(h)?;
                    self.conv(tape, &format!("ctx.up{s}.up"), up, 1)?
                }
            };
            let skip = if self.skips_enabled {
                skips[s]
            } else {
                let shape = tape.value(skips[s]).shape().to_vec();
                tape.constant(Tensor::zeros(&shape))
            };
            h = tape.concat_channels(h, skip)?;
            h = self.res_block(tape, &format!("ctx.up{s}.res1"), h)?;
            h = self.res_block(tape, &format!("ctx.up{s}.res2"), h)?;
        }
        let out = self.conv(tape, "ctx.head", h, 1)?;
        tape.swap_axes_12(out)
    }

    /// Predict the noise component of `y_t` given timesteps and context.
    /// `y_t` is `[B, H]`, `ctx` is `[B, T_ctx, ctx_dim]`.
    pub fn predict_noise_on(
        &self,
        tape: &mut Tape,
        y_t: NodeId,
        timesteps: &[usize],
        ctx: NodeId,
    ) -> Result<NodeId> {
        let h = self.config.horizon;
        let dm = self.config.predictor_dim();
        let ys = tape.value(y_t).shape().to_vec();
        if ys.len() != 2 || ys[1] != h {
            return Err(CoreError::Shape(format!("y_t must be [B, {h}], got {ys:?}")));
        }
        let batch = ys[0];
        if timesteps.len() != batch {
            return Err(CoreError::Shape(format!(
                "got {} timesteps for batch {batch}",
                timesteps.len()
            )));
        }
        if timesteps.iter().any(|&t| t == 0) {
            return Err(CoreError::InvalidParam("timestep 0 is out of range".into()));
        }
        let cs = tape.value(ctx).shape().to_vec();
        if cs.len() != 3 || cs[0] != batch || cs[2] != self.config.ctx_dim() {
            return Err(CoreError::Shape(format!(
                "ctx must be [B, T, {}], got {cs:?}",
                self.config.ctx_dim()
            )));
        }

        // timestep embedding joins the context map
        let temb = timestep_encoding(timesteps, self.config.time_embed_dim)?;
        let temb = tape.constant(temb);
        let temb = self.linear(tape, "den.time.fc1", temb)?;
        let temb = tape.gelu(temb);
        let temb = self.linear(tape, "den.time.fc2", temb)?;
        let ctx_t = tape.add_seq_bcast(ctx, temb)?;

        // embed the noisy sequence into tokens with positions
        let y3 = tape.reshape(y_t, vec![batch, h, 1])?;
        let mut tok = self.linear(tape, "den.embed", y3)?;
        let pe = sinusoidal_encoding(&(0..h).map(|p| p as f64).collect::<Vec<_>>(), dm)?;
        let pe_id = tape.constant(pe);
        tok = tape.add_batch_bcast(tok, pe_id)?;
        let mut x = tape.swap_axes_12(tok)?;
        x = self.res_block(tape, "den.res1", x)?;

        let fused = if self.config.variant.cross_attention() {
            let q_tok = tape.swap_axes_12(x)?;
            let q = self.linear(tape, "den.cross.q", q_tok)?;
            let k = self.linear(tape, "den.cross.k", ctx_t)?;
            let v = self.linear(tape, "den.cross.v", ctx_t)?;
            let a = tape.attention(q, k, v, self.config.heads)?;
            let o = self.linear(tape, "den.cross.o", a)?;
            let o = tape.swap_axes_12(o)?;
            tape.add(x, o)?
        } else {
            let pooled = tape.mean_axis1(ctx_t)?;
            let pooled = self.linear(tape, "den.pool.proj", pooled)?;
            let x_tok = tape.swap_axes_12(x)?;
            let biased = tape.add_seq_bcast(x_tok, pooled)?;
            tape.swap_axes_12(biased)?
        };

        let mut out = self.res_block(tape, "den.res2", fused)?;
        out = self.group_norm(tape, "den.head.gn", out)?;
        out = tape.gelu(out);
        out = self.conv(tape, "den.head.conv", out, 1)?;
        tape.reshape(out, vec![batch, h])
    }

    /// Convenience forward on a throwaway tape (no gradients retained).
    pub fn encode_context(&self, x: &Tensor) -> Result<Tensor> {
        let padded = self.pad_history(x)?;
        let mut tape = Tape::new();
        let id = tape.constant(padded);
        let out = self.encode_context_on(&mut tape, id)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict_noise(&self, y_t: &Tensor, timesteps: &[usize], ctx: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = tape.constant(y_t.clone());
        let c = tape.constant(ctx.clone());
        let out = self.predict_noise_on(&mut tape, y, timesteps, c)?;
        Ok(tape.value(out).clone())
    }

    /// Round parameters to f32 so the in-memory model matches its checkpoint
    /// bit for bit.
    pub fn quantize_f32(&mut self) {
        self.params.quantize_f32();
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save_params(&self.params, dir)?;
        let cfg = serde_json::to_string_pretty(&self.config)
            .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("config.json"), cfg)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        if !cfg_path.exists() {
            return Err(CoreError::Checkpoint(format!(
                "missing config.json in {}",
                dir.display()
            )));
        }
        let config: CduaConfig = serde_json::from_str(&std::fs::read_to_string(cfg_path)?)
            .map_err(|e| CoreError::Checkpoint(format!("bad config.json: {e}")))?;
        config.validate()?;
        let params = checkpoint::load_params(dir)?;
        Ok(Self {
            config,
            params,
            skips_enabled: true,
        })
    }
}
