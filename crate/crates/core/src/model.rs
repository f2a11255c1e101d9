//! Toy dual-tower diffusion transformer.
//!
//! Each tower is a stack of adaptive-norm transformer layers (self-attention
//! with the tower's own rotary positions, text cross-attention, MLP). After
//! every interaction layer a bridge block exchanges hidden states in both
//! directions through cross-attention on the shared time grid. Running with
//! `bridge_enabled = false` skips the bridge blocks entirely.

use std::collections::BTreeSet;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{self, DType};
use crate::autodiff::{concat_cols, concat_rows, timestep_embedding, Tape, Tensor, Var};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::guidance::VelocityPair;
use crate::rope::{rotary_var, RotaryBasis, TimeGrid, DEFAULT_ROPE_BASE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Audio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub seq_len: usize,
    /// Latent channels per token.
    pub channels: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub interaction_layers: Vec<usize>,
    pub width: usize,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Effective-time boundary between the low- and high-noise video experts.
    pub t_split: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub video: TowerConfig,
    pub audio: TowerConfig,
    pub bridge: BridgeConfig,
    #[serde(default)]
    pub grid: TimeGrid,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Prompt vocabulary size (event classes).
    pub vocab: usize,
    pub max_prompt: usize,
    pub text_width: usize,
    pub time_dim: usize,
    #[serde(default)]
    pub experts: Option<ExpertConfig>,
    /// Zero-initialize residual gates and output projections (bridge outputs
    /// included), making every block an identity at initialization.
    #[serde(default = "default_true")]
    pub zero_init: bool,
}

fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            video: TowerConfig {
                depth: 4,
                width: 32,
                heads: 2,
                seq_len: 12,
                channels: 4,
                mlp_ratio: 2,
            },
            audio: TowerConfig {
                depth: 4,
                width: 32,
                heads: 2,
                seq_len: 48,
                channels: 4,
                mlp_ratio: 2,
            },
            bridge: BridgeConfig {
                interaction_layers: vec![0, 2],
                width: 32,
                heads: 2,
            },
            grid: TimeGrid::default(),
            rope_base: DEFAULT_ROPE_BASE,
            vocab: 4,
            max_prompt: 4,
            text_width: 32,
            time_dim: 32,
            experts: None,
            zero_init: true,
        }
    }
}

impl ModelConfig {
    /// Depth-2, width-32 configuration used by the composed gradient checks.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        for t in [&mut c.video, &mut c.audio] {
            t.depth = 2;
        }
        c.bridge.interaction_layers = vec![0, 1];
        c
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("video", &self.video), ("audio", &self.audio)] {
            if t.depth == 0 || t.heads == 0 || t.width % t.heads != 0 || (t.width / t.heads) % 2 != 0
            {
                return Err(contract_err!(
                    "{name} tower: width {} must split into an even head size over {} heads",
                    t.width,
                    t.heads
                ));
            }
            if t.channels == 0 || t.seq_len == 0 || t.mlp_ratio == 0 {
                return Err(contract_err!("{name} tower has an empty extent"));
            }
        }
        if self.video.depth != self.audio.depth {
            return Err(contract_err!("towers must have equal depth"));
        }
        let b = &self.bridge;
        if b.heads == 0 || !b.width.is_multiple_of(b.heads) || !(b.width / b.heads).is_multiple_of(2) {
            return Err(contract_err!("bridge width {} / heads {} invalid", b.width, b.heads));
        }
        if b.interaction_layers.iter().any(|&l| l >= self.video.depth) {
            return Err(contract_err!("interaction layer outside [0, depth)"));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(contract_err!("time_dim must be even"));
        }
        let (nv, na) = self.grid.token_counts(self.video.seq_len as f64 / self.grid.f_v);
        if nv != self.video.seq_len || na != self.audio.seq_len {
            return Err(contract_err!(
                "seq lens {}/{} do not describe the same duration on grid {:?}",
                self.video.seq_len,
                self.audio.seq_len,
                self.grid
            ));
        }
        if let Some(e) = self.experts {
            if !(e.t_split > 0.0 && e.t_split < 1.0) {
                return Err(contract_err!("t_split must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Bridge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expert {
    High,
    Low,
}

/// High-noise expert iff `t >= t_split`.
pub fn select_expert(t_split: f64, t: f64) -> Expert {
    if t >= t_split {
        Expert::High
    } else {
        Expert::Low
    }
}

/// Named parameter tensors with optimizer-group metadata.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
    groups: Vec<ParamGroup>,
    experts: Vec<Option<Expert>>,
}

/// One line of the parameter audit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub group: ParamGroup,
    pub expert: Option<Expert>,
}

impl ParamStore {
    /// Appends a standalone parameter and returns its id.
    pub fn push(&mut self, name: &str, value: Tensor, group: ParamGroup) -> usize {
        self.add(name.to_string(), value, group, None)
    }

    fn add(&mut self, name: String, value: Tensor, group: ParamGroup, expert: Option<Expert>) -> usize {
        self.names.push(name);
        self.values.push(Rc::new(value));
        self.groups.push(group);
        self.experts.push(expert);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn group(&self, id: usize) -> ParamGroup {
        self.groups[id]
    }

    pub fn expert(&self, id: usize) -> Option<Expert> {
        self.experts[id]
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    /// Mutable access; clones the buffer only if a tape still shares it.
    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id])
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn total(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn audit(&self) -> Vec<ParamInfo> {
        (0..self.len())
            .map(|i| ParamInfo {
                name: self.names[i].clone(),
                shape: self.values[i].shape().to_vec(),
                count: self.values[i].len(),
                group: self.groups[i],
                expert: self.experts[i],
            })
            .collect()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf_shared(Rc::clone(v)))
                .collect(),
        }
    }

    /// Like [`bind`](Self::bind) but substitutes `var` for parameter `id`.
    pub fn bind_with<'t>(&self, tape: &'t Tape, id: usize, var: Var<'t>) -> Result<Bound<'t>> {
        if var.shape() != self.values[id].shape() {
            return Err(dim_err!("override shape {:?} for {}", var.shape(), self.names[id]));
        }
        let mut b = self.bind(tape);
        b.vars[id] = var;
        Ok(b)
    }

    pub fn to_checkpoint(&self, path: &Path, dtype: DType) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes(dtype)?)?;
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        let entries: Vec<(String, &Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.values.iter().map(|v| v.as_ref()))
            .collect();
        checkpoint::to_bytes(&entries, dtype)
    }

    /// Overwrites values from a checkpoint; names and shapes must match.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries = checkpoint::load(path)?;
        if entries.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model has {}",
                entries.len(),
                self.len()
            )));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(Error::Format(format!("checkpoint entry {name} does not match")));
            }
            self.values[i] = Rc::new(t);
        }
        Ok(())
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: usize) -> Var<'t> {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    group: ParamGroup,
    expert: Option<Expert>,
    zero_init: bool,
}

impl<R: Rng> Init<'_, R> {
    fn tensor(&mut self, name: String, t: Tensor) -> usize {
        self.store.add(name, t, self.group, self.expert)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Linear {
        let w = if zero && self.zero_init {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), self.rng)
        };
        let w = self.tensor(format!("{name}.w"), w);
        let b = self.tensor(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> usize {
        let t = Tensor::randn(shape, std, self.rng);
        self.tensor(name.into(), t)
    }

    fn gain(&mut self, name: &str, width: usize) -> usize {
        self.tensor(format!("{name}.g"), Tensor::ones(&[width]))
    }

    fn attention(
        &mut self,
        name: &str,
        q_width: usize,
        kv_width: usize,
        inner: usize,
        out_width: usize,
        heads: usize,
    ) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), q_width, inner, false),
            k: self.linear(&format!("{name}.k"), kv_width, inner, false),
            v: self.linear(&format!("{name}.v"), kv_width, inner, false),
            o: self.linear(&format!("{name}.o"), inner, out_width, true),
            heads,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.var(self.w))?.add_row(p.var(self.b))
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

struct RotaryArgs<'a> {
    basis: &'a RotaryBasis,
    q_pos: &'a [f64],
    k_pos: &'a [f64],
}

impl Attention {
    fn apply<'t>(
        &self,
        p: &Bound<'t>,
        xq: Var<'t>,
        xkv: Var<'t>,
        rotary: Option<RotaryArgs<'_>>,
    ) -> Result<Var<'t>> {
        let mut q = self.q.apply(p, xq)?;
        let mut k = self.k.apply(p, xkv)?;
        let v = self.v.apply(p, xkv)?;
        if let Some(r) = rotary {
            q = rotary_var(q, r.q_pos, r.basis)?;
            k = rotary_var(k, r.k_pos, r.basis)?;
        }
        let inner = q.value().cols();
        let d = inner / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * d, d)?;
            let kh = k.slice_cols(h * d, d)?;
            let vh = v.slice_cols(h * d, d)?;
            let attn = qh.matmul_t(kh)?.scale(scale).softmax_rows()?;
            outs.push(attn.matmul(vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            concat_cols(&outs)?
        };
        self.o.apply(p, merged)
    }
}

struct TowerLayer {
    modulation: Linear,
    norm_attn: usize,
    self_attn: Attention,
    norm_text: usize,
    text_attn: Attention,
    norm_mlp: usize,
    mlp_in: Linear,
    mlp_out: Linear,
}

struct Tower {
    width: usize,
    in_proj: Linear,
    frame_proj: Option<Linear>,
    time_in: Linear,
    time_out: Linear,
    layers: Vec<TowerLayer>,
    final_mod: Linear,
    norm_out: usize,
    out_proj: Linear,
}

struct BridgeBlock {
    norm_v: usize,
    norm_a: usize,
    /// Audio queries over video keys; writes into the audio stream.
    video_to_audio: Attention,
    /// Video queries over audio keys; writes into the video stream.
    audio_to_video: Attention,
}

struct TextEncoder {
    table: usize,
    slots: usize,
    null: usize,
}

/// Conditioning for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    /// Prompt token ids; `None` selects the learned null embedding.
    pub text: Option<Vec<usize>>,
    pub bridge_enabled: bool,
    /// Clean first video frame `[1, channels]`; `None` uses the constant
    /// white placeholder.
    pub first_frame: Option<Tensor>,
}

impl ConditionSet {
    pub fn text(ids: Vec<usize>) -> Self {
        Self {
            text: Some(ids),
            bridge_enabled: true,
            first_frame: None,
        }
    }

    pub fn null() -> Self {
        Self {
            text: None,
            bridge_enabled: true,
            first_frame: None,
        }
    }

    pub fn with_bridge(mut self, on: bool) -> Self {
        self.bridge_enabled = on;
        self
    }
}

/// The dual-tower network and its parameters.
pub struct DualTower {
    cfg: ModelConfig,
    params: ParamStore,
    text: TextEncoder,
    /// One video tower, or `[high, low]` experts.
    video: Vec<Tower>,
    audio: Tower,
    bridges: Vec<(usize, BridgeBlock)>,
    video_basis: RotaryBasis,
    audio_basis: RotaryBasis,
    bridge_basis: RotaryBasis,
}

impl DualTower {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::default();
        let mut init = Init {
            store: &mut params,
            rng,
            group: ParamGroup::Backbone,
            expert: None,
            zero_init: cfg.zero_init,
        };
        let text = TextEncoder {
            table: init.randn("text.table", &[cfg.vocab, cfg.text_width], 1.0),
            slots: init.randn("text.slots", &[cfg.max_prompt, cfg.text_width], 0.5),
            null: init.randn("text.null", &[1, cfg.text_width], 1.0),
        };
        let video = match cfg.experts {
            None => vec![build_tower(&mut init, "video", &cfg.video, &cfg, true)],
            Some(_) => {
                init.expert = Some(Expert::High);
                let high = build_tower(&mut init, "video_high", &cfg.video, &cfg, true);
                init.expert = Some(Expert::Low);
                let low = build_tower(&mut init, "video_low", &cfg.video, &cfg, true);
                init.expert = None;
                vec![high, low]
            }
        };
        let audio = build_tower(&mut init, "audio", &cfg.audio, &cfg, false);
        init.group = ParamGroup::Bridge;
        let layers: BTreeSet<usize> = cfg.bridge.interaction_layers.iter().copied().collect();
        let mut bridges = Vec::new();
        for l in layers {
            let name = format!("bridge.{l}");
            let b = &cfg.bridge;
            bridges.push((
                l,
                BridgeBlock {
                    norm_v: init.gain(&format!("{name}.norm_v"), cfg.video.width),
                    norm_a: init.gain(&format!("{name}.norm_a"), cfg.audio.width),
                    video_to_audio: init.attention(
                        &format!("{name}.v2a"),
                        cfg.audio.width,
                        cfg.video.width,
                        b.width,
                        cfg.audio.width,
                        b.heads,
                    ),
                    audio_to_video: init.attention(
                        &format!("{name}.a2v"),
                        cfg.video.width,
                        cfg.audio.width,
                        b.width,
                        cfg.video.width,
                        b.heads,
                    ),
                },
            ));
        }
        Ok(Self {
            video_basis: RotaryBasis::new(cfg.video.width / cfg.video.heads, cfg.rope_base)?,
            audio_basis: RotaryBasis::new(cfg.audio.width / cfg.audio.heads, cfg.rope_base)?,
            bridge_basis: RotaryBasis::new(cfg.bridge.width / cfg.bridge.heads, cfg.rope_base)?,
            cfg,
            params,
            text,
            video,
            audio,
            bridges,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.params.total()
    }

    pub fn parameters(&self) -> Vec<ParamInfo> {
        self.params.audit()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.params.bind(tape)
    }

    /// Expert used for a given video effective time when none is forced.
    pub fn expert_for(&self, tau_v: f64) -> Option<Expert> {
        self.cfg.experts.map(|e| select_expert(e.t_split, tau_v))
    }

    fn video_tower(&self, expert: Option<Expert>) -> &Tower {
        match expert {
            Some(Expert::Low) if self.video.len() == 2 => &self.video[1],
            _ => &self.video[0],
        }
    }

    /// Text context rows for a prompt (or the null embedding).
    pub fn text_context<'t>(&self, p: &Bound<'t>, text: Option<&[usize]>) -> Result<Var<'t>> {
        let tape = p.var(0).tape();
        match text {
            None => Ok(p.var(self.text.null)),
            Some(ids) => {
                if ids.is_empty() || ids.len() > self.cfg.max_prompt {
                    return Err(contract_err!(
                        "prompt length {} outside 1..={}",
                        ids.len(),
                        self.cfg.max_prompt
                    ));
                }
                let tok = tape.gather(p.var(self.text.table), ids)?;
                let slots: Vec<usize> = (0..ids.len()).collect();
                let pos = tape.gather(p.var(self.text.slots), &slots)?;
                tok.add(pos)
            }
        }
    }

    /// Predicted velocities for both streams.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        z_v: Var<'t>,
        z_a: Var<'t>,
        tau_v: f64,
        tau_a: f64,
        cond: &ConditionSet,
        expert: Option<Expert>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let ctx = self.text_context(p, cond.text.as_deref())?;
        self.forward_with_context(p, z_v, z_a, tau_v, tau_a, ctx, cond, expert)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_context<'t>(
        &self,
        p: &Bound<'t>,
        z_v: Var<'t>,
        z_a: Var<'t>,
        tau_v: f64,
        tau_a: f64,
        ctx: Var<'t>,
        cond: &ConditionSet,
        expert: Option<Expert>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (vz, az) = (z_v.value(), z_a.value());
        let want_v = [self.cfg.video.seq_len, self.cfg.video.channels];
        let want_a = [self.cfg.audio.seq_len, self.cfg.audio.channels];
        if vz.shape() != want_v || az.shape() != want_a {
            return Err(dim_err!(
                "latents {:?}/{:?}, expected {:?}/{:?}",
                vz.shape(),
                az.shape(),
                want_v,
                want_a
            ));
        }
        if !(vz.is_finite() && az.is_finite() && tau_v.is_finite() && tau_a.is_finite()) {
            return Err(Error::Numeric("non-finite model input".into()));
        }
        let tape = z_v.tape();
        let expert = expert.or_else(|| self.expert_for(tau_v));
        let vt = self.video_tower(expert);
        let at = &self.audio;

        let frame = match &cond.first_frame {
            Some(f) => {
                if f.len() != self.cfg.video.channels {
                    return Err(dim_err!("first frame has {} values", f.len()));
                }
                tape.leaf(f.clone().reshape(&[1, self.cfg.video.channels])?)
            }
            None => tape.leaf(Tensor::ones(&[1, self.cfg.video.channels])),
        };
        let frame_tok = vt
            .frame_proj
            .as_ref()
            .expect("video tower has a frame projection")
            .apply(p, frame)?;
        let mut h_v = concat_rows(&[frame_tok, vt.in_proj.apply(p, z_v)?])?;
        let mut h_a = at.in_proj.apply(p, z_a)?;

        let e_v = vt.time_embed(p, tape, tau_v, self.cfg.time_dim)?;
        let e_a = at.time_embed(p, tape, tau_a, self.cfg.time_dim)?;

        let grid = self.cfg.grid;
        let n_v = self.cfg.video.seq_len;
        let n_a = self.cfg.audio.seq_len;
        // frame token shares position 0 with the first video token
        let self_pos_v: Vec<f64> = std::iter::once(0.0).chain((0..n_v).map(|i| i as f64)).collect();
        let self_pos_a = grid.audio_positions(n_a);
        let cross_pos_v: Vec<f64> = std::iter::once(0.0)
            .chain(grid.video_positions(n_v))
            .collect();

        for l in 0..self.cfg.video.depth {
            h_v = vt.layers[l].apply(p, h_v, e_v, ctx, &self_pos_v, &self.video_basis)?;
            h_a = at.layers[l].apply(p, h_a, e_a, ctx, &self_pos_a, &self.audio_basis)?;
            if cond.bridge_enabled {
                if let Some(idx) = self.bridges.iter().position(|(bl, _)| *bl == l) {
                    (h_v, h_a) = self.bridge_apply(p, idx, h_v, h_a, &cross_pos_v, &self_pos_a)?;
                }
            }
        }
        let out_v = vt.head(p, h_v, e_v)?.slice_rows(1, n_v)?;
        let out_a = at.head(p, h_a, e_a)?;
        Ok((out_v, out_a))
    }

    /// Number of bridge blocks.
    pub fn bridge_count(&self) -> usize {
        self.bridges.len()
    }

    /// Applies bridge block `index` to hidden states laid out as the towers
    /// produce them (video rows include the leading frame token).
    pub fn bridge_block<'t>(
        &self,
        p: &Bound<'t>,
        index: usize,
        h_v: Var<'t>,
        h_a: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n_v = h_v.value().rows();
        let n_a = h_a.value().rows();
        let grid = self.cfg.grid;
        let pos_v: Vec<f64> = std::iter::once(0.0)
            .chain(grid.video_positions(n_v.saturating_sub(1)))
            .collect();
        self.bridge_apply(p, index, h_v, h_a, &pos_v, &grid.audio_positions(n_a))
    }

    fn bridge_apply<'t>(
        &self,
        p: &Bound<'t>,
        index: usize,
        h_v: Var<'t>,
        h_a: Var<'t>,
        pos_v: &[f64],
        pos_a: &[f64],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (_, b) = self
            .bridges
            .get(index)
            .ok_or_else(|| contract_err!("no bridge block {index}"))?;
        let nv = h_v.rms_norm(p.var(b.norm_v))?;
        let na = h_a.rms_norm(p.var(b.norm_a))?;
        let basis = &self.bridge_basis;
        let into_a = b.video_to_audio.apply(
            p,
            na,
            nv,
            Some(RotaryArgs {
                basis,
                q_pos: pos_a,
                k_pos: pos_v,
            }),
        )?;
        let into_v = b.audio_to_video.apply(
            p,
            nv,
            na,
            Some(RotaryArgs {
                basis,
                q_pos: pos_v,
                k_pos: pos_a,
            }),
        )?;
        Ok((h_v.add(into_v)?, h_a.add(into_a)?))
    }

    /// Untracked prediction on plain tensors.
    pub fn predict(
        &self,
        z_v: &Tensor,
        z_a: &Tensor,
        tau_v: f64,
        tau_a: f64,
        cond: &ConditionSet,
    ) -> Result<VelocityPair> {
        let tape = Tape::new();
        let p = self.bind(&tape);
        let (v, a) = self.forward(
            &p,
            tape.leaf(z_v.clone()),
            tape.leaf(z_a.clone()),
            tau_v,
            tau_a,
            cond,
            None,
        )?;
        Ok(VelocityPair::new((*v.value()).clone(), (*a.value()).clone()))
    }

    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        self.params.to_checkpoint(path, dtype)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.params.load_checkpoint(path)
    }
}

/// Inputs of one composed gradient check.
#[derive(Clone, Debug)]
pub struct GradProbe {
    pub x_v: Tensor,
    pub x_a: Tensor,
    pub target_v: Tensor,
    pub target_a: Tensor,
    pub tau_v: f64,
    pub tau_a: f64,
    pub cond: ConditionSet,
}

impl GradProbe {
    pub fn random<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (nv, na) = (
            [cfg.video.seq_len, cfg.video.channels],
            [cfg.audio.seq_len, cfg.audio.channels],
        );
        let prompt = (0..cfg.max_prompt.min(2)).map(|_| rng.random_range(0..cfg.vocab)).collect();
        Self {
            x_v: Tensor::randn(&nv, 1.0, rng),
            x_a: Tensor::randn(&na, 1.0, rng),
            target_v: Tensor::randn(&nv, 1.0, rng),
            target_a: Tensor::randn(&na, 1.0, rng),
            tau_v: rng.random_range(0.05..0.95),
            tau_a: rng.random_range(0.05..0.95),
            cond: ConditionSet::text(prompt),
        }
    }
}

/// Finite-difference check of `fm_loss(forward(..))` against backprop.
///
/// Checks up to `per_param` coordinates (spread evenly) of every parameter
/// plus the video latent; returns the worst relative error and its parameter
/// name (`"x_v"` for the latent).
pub fn composed_grad_check(
    model: &DualTower,
    probe: &GradProbe,
    weights: crate::schedule::LossWeights,
    per_param: usize,
    eps: f64,
) -> Result<(f64, String)> {
    let coords_for = |len: usize| -> Vec<usize> {
        let n = per_param.min(len).max(1);
        (0..n).map(|k| k * len / n).collect()
    };
    let mut worst = (0.0_f64, String::new());
    let ps = model.params();
    for id in 0..ps.len() {
        let point = ps.value(id).clone();
        let r = crate::autodiff::grad_check_coords(
            |tape, x| {
                let p = ps.bind_with(tape, id, x)?;
                probe_loss(model, &p, tape, probe, tape.leaf(probe.x_v.clone()), weights)
            },
            &point,
            eps,
            &coords_for(point.len()),
        )?;
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, ps.name(id).to_string());
        }
    }
    let r = crate::autodiff::grad_check_coords(
        |tape, x| {
            let p = ps.bind(tape);
            probe_loss(model, &p, tape, probe, x, weights)
        },
        &probe.x_v,
        eps,
        &coords_for(probe.x_v.len()),
    )?;
    if r.max_rel_err >= worst.0 {
        worst = (r.max_rel_err, "x_v".into());
    }
    Ok(worst)
}

fn probe_loss<'t>(
    model: &DualTower,
    p: &Bound<'t>,
    tape: &'t Tape,
    probe: &GradProbe,
    x_v: Var<'t>,
    weights: crate::schedule::LossWeights,
) -> Result<Var<'t>> {
    let (v, a) = model.forward(
        p,
        x_v,
        tape.leaf(probe.x_a.clone()),
        probe.tau_v,
        probe.tau_a,
        &probe.cond,
        None,
    )?;
    crate::schedule::fm_loss(
        v,
        a,
        tape.leaf(probe.target_v.clone()),
        tape.leaf(probe.target_a.clone()),
        weights,
    )
}

fn build_tower<R: Rng>(
    init: &mut Init<'_, R>,
    name: &str,
    t: &TowerConfig,
    cfg: &ModelConfig,
    with_frame: bool,
) -> Tower {
    let w = t.width;
    let layers = (0..t.depth)
        .map(|l| {
            let n = format!("{name}.layers.{l}");
            let modulation = init.linear(&format!("{n}.mod"), w, 6 * w, true);
            // scale slots start at one so the modulation is an identity
            for k in [1, 4] {
                let b = init.store.value_mut(modulation.b);
                b.data_mut()[k * w..(k + 1) * w].iter_mut().for_each(|x| *x = 1.0);
            }
            if !init.zero_init {
                for k in [2, 5] {
                    let b = init.store.value_mut(modulation.b);
                    b.data_mut()[k * w..(k + 1) * w].iter_mut().for_each(|x| *x = 1.0);
                }
            }
            TowerLayer {
                modulation,
                norm_attn: init.gain(&format!("{n}.norm_attn"), w),
                self_attn: init.attention(&format!("{n}.self"), w, w, w, w, t.heads),
                norm_text: init.gain(&format!("{n}.norm_text"), w),
                text_attn: init.attention(&format!("{n}.text"), w, cfg.text_width, w, w, t.heads),
                norm_mlp: init.gain(&format!("{n}.norm_mlp"), w),
                mlp_in: init.linear(&format!("{n}.mlp_in"), w, t.mlp_ratio * w, false),
                mlp_out: init.linear(&format!("{n}.mlp_out"), t.mlp_ratio * w, w, true),
            }
        })
        .collect();
    let final_mod = init.linear(&format!("{name}.final_mod"), w, 2 * w, true);
    {
        let b = init.store.value_mut(final_mod.b);
        b.data_mut()[w..].iter_mut().for_each(|x| *x = 1.0);
    }
    Tower {
        width: w,
        in_proj: init.linear(&format!("{name}.in"), t.channels, w, false),
        frame_proj: with_frame.then(|| init.linear(&format!("{name}.frame"), t.channels, w, false)),
        time_in: init.linear(&format!("{name}.time_in"), cfg.time_dim, w, false),
        time_out: init.linear(&format!("{name}.time_out"), w, w, false),
        layers,
        final_mod,
        norm_out: init.gain(&format!("{name}.norm_out"), w),
        out_proj: init.linear(&format!("{name}.out"), w, t.channels, true),
    }
}

impl Tower {
    /// `silu(MLP(sinusoid(tau)))`, the shared input of every modulation.
    fn time_embed<'t>(&self, p: &Bound<'t>, tape: &'t Tape, tau: f64, dim: usize) -> Result<Var<'t>> {
        let e = tape.leaf(timestep_embedding(tau, dim));
        let h = self.time_in.apply(p, e)?.silu();
        Ok(self.time_out.apply(p, h)?.silu())
    }

    fn head<'t>(&self, p: &Bound<'t>, h: Var<'t>, temb: Var<'t>) -> Result<Var<'t>> {
        let m = self.final_mod.apply(p, temb)?;
        let w = self.width;
        let (shift, scale) = (m.slice_cols(0, w)?, m.slice_cols(w, w)?);
        let x = h.rms_norm(p.var(self.norm_out))?.mul_row(scale)?.add_row(shift)?;
        self.out_proj.apply(p, x)
    }
}

impl TowerLayer {
    fn apply<'t>(
        &self,
        p: &Bound<'t>,
        h: Var<'t>,
        temb: Var<'t>,
        ctx: Var<'t>,
        pos: &[f64],
        basis: &RotaryBasis,
    ) -> Result<Var<'t>> {
        let w = h.value().cols();
        let m = self.modulation.apply(p, temb)?;
        let part = |k: usize| m.slice_cols(k * w, w);
        let (shift1, scale1, gate1) = (part(0)?, part(1)?, part(2)?);
        let (shift2, scale2, gate2) = (part(3)?, part(4)?, part(5)?);

        let x = h
            .rms_norm(p.var(self.norm_attn))?
            .mul_row(scale1)?
            .add_row(shift1)?;
        let a = self.self_attn.apply(
            p,
            x,
            x,
            Some(RotaryArgs {
                basis,
                q_pos: pos,
                k_pos: pos,
            }),
        )?;
        let h = h.add(a.mul_row(gate1)?)?;

        let x = h.rms_norm(p.var(self.norm_text))?;
        let h = h.add(self.text_attn.apply(p, x, ctx, None)?)?;

        let x = h
            .rms_norm(p.var(self.norm_mlp))?
            .mul_row(scale2)?
            .add_row(shift2)?;
        let y = self.mlp_out.apply(p, self.mlp_in.apply(p, x)?.silu())?;
        h.add(y.mul_row(gate2)?)
    }
}
