//! Attention Res-UNet noise predictor.
//!
//! The network is described by a flat plan of steps (residual block,
//! attention block, down/upsample, skip push/pop) produced once from a
//! [`NetConfig`]. The same plan drives parameter allocation, the layer table
//! printed by `describe-net`, and the forward pass.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Float, Graph, NodeId, ParamId, ParamStore};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// 2 for the diffusion model (noisy target and condition), 1 for the
    /// deterministic baseline.
    pub in_channels: usize,
    pub base_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Spatial sizes at which an attention block follows the last residual
    /// block of a stage, on both the down and the up path.
    pub attention_resolutions: Vec<usize>,
    pub bottleneck_attention: bool,
    pub norm_groups: usize,
    pub dropout: f64,
    pub time_embed_dim: usize,
    pub heads: usize,
    /// Input height and width.
    pub image_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            base_channels: 128,
            stage_channels: vec![128, 256, 256, 256],
            blocks_per_stage: 2,
            attention_resolutions: vec![32],
            bottleneck_attention: true,
            norm_groups: 32,
            dropout: 0.1,
            time_embed_dim: 512,
            heads: 4,
            image_size: 64,
        }
    }
}

impl NetConfig {
    /// The desk-scale configuration used for 32x32 experiments.
    pub fn reduced() -> Self {
        Self {
            in_channels: 2,
            base_channels: 32,
            stage_channels: vec![32, 64, 64],
            blocks_per_stage: 2,
            attention_resolutions: vec![16],
            bottleneck_attention: true,
            norm_groups: 8,
            dropout: 0.1,
            time_embed_dim: 128,
            heads: 4,
            image_size: 32,
        }
    }

    /// Same backbone with a single input channel.
    pub fn baseline(&self) -> Self {
        Self {
            in_channels: 1,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.in_channels == 0 || self.base_channels == 0 || self.time_embed_dim == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad("stage_channels must be non-empty and positive".into());
        }
        if self.stage_channels.len() > 16 {
            return bad("at most 16 stages are supported".into());
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be >= 1".into());
        }
        if !self.base_channels.is_multiple_of(2) {
            return bad("base_channels must be even for the sinusoidal embedding".into());
        }
        if self.norm_groups == 0 || self.heads == 0 {
            return bad("norm_groups and heads must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let factor = 1usize << (self.stage_channels.len() - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return bad(format!(
                "image size {} is not divisible by 2^{}",
                self.image_size,
                self.stage_channels.len() - 1
            ));
        }
        Ok(())
    }

    fn has_attention(&self, res: usize) -> bool {
        self.attention_resolutions.contains(&res)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Diffusion,
    Deterministic,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Diffusion => "diffusion",
            ModelKind::Deterministic => "deterministic",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(ModelKind::Diffusion),
            "deterministic" | "baseline" => Ok(ModelKind::Deterministic),
            _ => Err(Error::InvalidConfig(format!("unknown model kind {s:?}"))),
        }
    }
}

/// One row of the layer table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub stage: &'static str,
    pub layer: String,
    pub output_shape: [usize; 4],
    pub kernel: String,
    pub in_channels: String,
    pub out_channels: String,
    pub params: usize,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Conv,
    norm2: Norm,
    conv2: Conv,
    shortcut: Option<Conv>,
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: Norm,
    qkv: ParamId,
    proj: Conv,
}

#[derive(Debug, Clone)]
enum Step {
    Res(ResBlock),
    Attn(AttnBlock),
    Down(Conv),
    Up(Conv),
    PushSkip,
    PopSkip,
}

/// Skip-stack activity recorded by [`UNet::forward_traced`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipEvent {
    Push([usize; 4]),
    /// Shapes of the running activation and the popped skip.
    Pop { current: [usize; 4], skip: [usize; 4] },
}

/// Network structure; the weights live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct UNet {
    config: NetConfig,
    time1: Conv,
    time2: Conv,
    input_conv: Conv,
    steps: Vec<Step>,
    output_conv: Conv,
    rows: Vec<LayerRow>,
}

struct Builder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: rand_chacha::ChaCha8Rng,
    cfg: &'a NetConfig,
}

impl<T: Float> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> (ParamId, Option<ParamId>) {
        let fan = cin * k * k;
        let w = self
            .store
            .add_uniform(format!("{name}.weight"), &[cout, cin, k, k], fan, &mut self.rng);
        let b = bias.then(|| self.store.add_uniform(format!("{name}.bias"), &[cout], fan, &mut self.rng));
        (w, b)
    }

    fn conv_b(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let (w, b) = self.conv(name, cin, cout, k, true);
        Conv { w, b: b.unwrap() }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Conv {
        let w = self
            .store
            .add_uniform(format!("{name}.weight"), &[fout, fin], fin, &mut self.rng);
        let b = self
            .store
            .add_uniform(format!("{name}.bias"), &[fout], fin, &mut self.rng);
        Conv { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        if !c.is_multiple_of(self.cfg.norm_groups) {
            return Err(Error::InvalidConfig(format!(
                "{name}: {c} channels not divisible by {} groups",
                self.cfg.norm_groups
            )));
        }
        Ok(Norm {
            gamma: self.store.add_const(format!("{name}.weight"), &[c], 1.0),
            beta: self.store.add_const(format!("{name}.bias"), &[c], 0.0),
        })
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin)?,
            conv1: self.conv_b(&format!("{name}.conv1"), cin, cout, 3),
            temb: self.linear(&format!("{name}.time_emb"), self.cfg.time_embed_dim, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout)?,
            conv2: self.conv_b(&format!("{name}.conv2"), cout, cout, 3),
            shortcut: (cin != cout).then(|| self.conv_b(&format!("{name}.shortcut"), cin, cout, 1)),
        })
    }

    fn attn(&mut self, name: &str, c: usize) -> Result<AttnBlock> {
        if !c.is_multiple_of(self.cfg.heads) {
            return Err(Error::InvalidConfig(format!(
                "{name}: {c} channels not divisible by {} heads",
                self.cfg.heads
            )));
        }
        Ok(AttnBlock {
            norm: self.norm(&format!("{name}.norm"), c)?,
            qkv: self.conv(&format!("{name}.qkv"), c, 3 * c, 1, false).0,
            proj: self.conv_b(&format!("{name}.proj"), c, c, 1),
        })
    }

    fn count_since(&self, start: usize) -> usize {
        self.store.params[start..].iter().map(|p| p.numel()).sum()
    }
}

impl UNet {
    /// Allocates and initialises parameters for `config`. Initial values are
    /// drawn in `f64` from a stream seeded by `seed`, so `f32` and `f64`
    /// builds agree up to rounding.
    pub fn build<T: Float>(config: &NetConfig, seed: u64) -> Result<(UNet, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::<T>::new();
        let mut b = Builder {
            store: &mut store,
            rng: rng::stream(seed),
            cfg: config,
        };
        let mut rows = Vec::new();
        let mut row = |b: &Builder<T>, start: usize, stage, layer: &str, shape, kernel: &str, cin: String, cout: String| {
            rows.push(LayerRow {
                stage,
                layer: layer.to_string(),
                output_shape: shape,
                kernel: kernel.to_string(),
                in_channels: cin,
                out_channels: cout,
                params: b.count_since(start),
            });
        };
        let (base, temb) = (config.base_channels, config.time_embed_dim);
        let s0 = b.store.len();
        let time1 = b.linear("time_embed.0", base, temb);
        let time2 = b.linear("time_embed.2", temb, temb);
        row(&b, s0, "Input", "Time Embedding", [1, temb, 1, 1], "2xLinear + SiLU", format!("{base} -> {temb}"), format!("{temb} -> {temb}"));

        let s0 = b.store.len();
        let input_conv = b.conv_b("input_conv", config.in_channels, base, 3);
        let mut size = config.image_size;
        row(&b, s0, "Input", "Conv2d (input conv)", [1, base, size, size], "3x3", config.in_channels.to_string(), base.to_string());

        let mut steps = Vec::new();
        let mut ch = base;
        let mut skips = Vec::new();
        let n_stages = config.stage_channels.len();
        for (si, &sc) in config.stage_channels.iter().enumerate() {
            for bi in 0..config.blocks_per_stage {
                let s0 = b.store.len();
                let blk = b.res(&format!("down.{si}.res.{bi}"), ch, sc)?;
                row(&b, s0, "Down", "ResidualBlock", [1, sc, size, size], "3x3", ch.to_string(), sc.to_string());
                steps.push(Step::Res(blk));
                ch = sc;
                if bi + 1 == config.blocks_per_stage && config.has_attention(size) {
                    let s0 = b.store.len();
                    let blk = b.attn(&format!("down.{si}.attn"), ch)?;
                    row(&b, s0, "Down", "AttentionBlock", [1, ch, size, size], "1x1(QKV)+1x1(Proj)", ch.to_string(), ch.to_string());
                    steps.push(Step::Attn(blk));
                }
                steps.push(Step::PushSkip);
                skips.push(ch);
            }
            if si + 1 < n_stages {
                let s0 = b.store.len();
                let conv = b.conv_b(&format!("down.{si}.downsample"), ch, ch, 3);
                size /= 2;
                row(&b, s0, "Down", "Downsample", [1, ch, size, size], "3x3 (stride=2)", ch.to_string(), ch.to_string());
                steps.push(Step::Down(conv));
            }
        }

        let s0 = b.store.len();
        let blk = b.res("mid.res.0", ch, ch)?;
        row(&b, s0, "Bottleneck", "ResidualBlock", [1, ch, size, size], "3x3", ch.to_string(), ch.to_string());
        steps.push(Step::Res(blk));
        if config.bottleneck_attention {
            let s0 = b.store.len();
            let blk = b.attn("mid.attn", ch)?;
            row(&b, s0, "Bottleneck", "AttentionBlock", [1, ch, size, size], "1x1(QKV)+1x1(Proj)", ch.to_string(), ch.to_string());
            steps.push(Step::Attn(blk));
        }
        let s0 = b.store.len();
        let blk = b.res("mid.res.1", ch, ch)?;
        row(&b, s0, "Bottleneck", "ResidualBlock", [1, ch, size, size], "3x3", ch.to_string(), ch.to_string());
        steps.push(Step::Res(blk));

        for si in (0..n_stages).rev() {
            let sc = config.stage_channels[si];
            for bi in 0..config.blocks_per_stage {
                let skip = skips.pop().expect("one skip per down block");
                steps.push(Step::PopSkip);
                let s0 = b.store.len();
                let blk = b.res(&format!("up.{si}.res.{bi}"), ch + skip, sc)?;
                let label = if bi == 0 { "ResidualBlock (skip)" } else { "ResidualBlock" };
                row(&b, s0, "Up", label, [1, sc, size, size], "3x3", format!("{ch}+{skip}"), sc.to_string());
                steps.push(Step::Res(blk));
                ch = sc;
                if bi + 1 == config.blocks_per_stage && config.has_attention(size) {
                    let s0 = b.store.len();
                    let blk = b.attn(&format!("up.{si}.attn"), ch)?;
                    row(&b, s0, "Up", "AttentionBlock", [1, ch, size, size], "1x1(QKV)+1x1(Proj)", ch.to_string(), ch.to_string());
                    steps.push(Step::Attn(blk));
                }
            }
            if si > 0 {
                let s0 = b.store.len();
                let conv = b.conv_b(&format!("up.{si}.upsample"), ch, ch, 3);
                size *= 2;
                row(&b, s0, "Up", "Upsample", [1, ch, size, size], "nearest + 3x3", ch.to_string(), ch.to_string());
                steps.push(Step::Up(conv));
            }
        }

        let s0 = b.store.len();
        let (w, bias) = b.conv("output_conv", ch, 1, 3, true);
        let output_conv = Conv { w, b: bias.unwrap() };
        for id in [output_conv.w, output_conv.b] {
            b.store.get_mut(id).value.iter_mut().for_each(|v| *v = T::zero());
        }
        row(&b, s0, "Output", "GN + SiLU + Conv2d", [1, 1, size, size], "3x3", ch.to_string(), "1".into());

        let net = UNet {
            config: config.clone(),
            time1,
            time2,
            input_conv,
            steps,
            output_conv,
            rows,
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn rows(&self) -> &[LayerRow] {
        &self.rows
    }

    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// The layer table as aligned text, ending with the total.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:<11} {:<22} {:<20} {:<20} {:>11} {:>11} {:>12}",
            "Stage", "Layer Type", "Output Shape", "Kernel", "In_Channels", "Out_Channels", "Param #"
        )
        .unwrap();
        for r in &self.rows {
            let shape = if r.output_shape[2] == 1 && r.output_shape[3] == 1 {
                format!("({}, {})", r.output_shape[0], r.output_shape[1])
            } else {
                format!("{:?}", r.output_shape).replace('[', "(").replace(']', ")")
            };
            writeln!(
                s,
                "{:<11} {:<22} {:<20} {:<20} {:>11} {:>11} {:>12}",
                r.stage,
                r.layer,
                shape,
                r.kernel,
                r.in_channels,
                r.out_channels,
                group_thousands(r.params)
            )
            .unwrap();
        }
        writeln!(s, "Total Param # {}", group_thousands(self.total_params())).unwrap();
        s
    }

    /// Sinusoidal timestep features of width `base_channels` for each entry
    /// of `t`, laid out as `(n, base, 1, 1)`.
    pub fn timestep_features<T: Float>(&self, t: &[f64]) -> Vec<T> {
        timestep_embedding(t, self.config.base_channels)
    }

    /// Predicts one output channel from `x` of shape `(n, in_channels, H, W)`
    /// and per-sample timesteps `t`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: NodeId, t: &[f64]) -> Result<NodeId> {
        self.forward_inner(g, x, t, None)
    }

    /// As [`forward`](Self::forward), also recording every skip push/pop.
    pub fn forward_traced<T: Float>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        t: &[f64],
    ) -> Result<(NodeId, Vec<SkipEvent>)> {
        let mut trace = Vec::new();
        let out = self.forward_inner(g, x, t, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn forward_inner<T: Float>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        t: &[f64],
        mut trace: Option<&mut Vec<SkipEvent>>,
    ) -> Result<NodeId> {
        let [n, c, h, w] = g.shape(x);
        let cfg = &self.config;
        if c != cfg.in_channels || h != cfg.image_size || w != cfg.image_size || t.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "network expects ({n}, {}, {s}, {s}) with {n} timesteps, got ({n}, {c}, {h}, {w}) with {} timesteps",
                cfg.in_channels,
                t.len(),
                s = cfg.image_size
            )));
        }
        let temb = g.input([n, cfg.base_channels, 1, 1], self.timestep_features(t));
        let temb = g.linear(temb, self.time1.w, Some(self.time1.b));
        let temb = g.silu(temb);
        let temb = g.linear(temb, self.time2.w, Some(self.time2.b));
        // every residual block applies SiLU to the embedding before its projection
        let temb_act = g.silu(temb);

        let mut hcur = g.conv2d(x, self.input_conv.w, Some(self.input_conv.b), 1, 1);
        let mut skips: Vec<NodeId> = Vec::new();
        for step in &self.steps {
            hcur = match step {
                Step::Res(blk) => self.res_block(g, blk, hcur, temb_act),
                Step::Attn(blk) => self.attn_block(g, blk, hcur),
                Step::Down(conv) => g.conv2d(hcur, conv.w, Some(conv.b), 2, 1),
                Step::Up(conv) => {
                    let u = g.upsample2x(hcur);
                    g.conv2d(u, conv.w, Some(conv.b), 1, 1)
                }
                Step::PushSkip => {
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.push(SkipEvent::Push(g.shape(hcur)));
                    }
                    skips.push(hcur);
                    hcur
                }
                Step::PopSkip => {
                    let skip = skips.pop().expect("balanced skip plan");
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.push(SkipEvent::Pop {
                            current: g.shape(hcur),
                            skip: g.shape(skip),
                        });
                    }
                    g.concat(hcur, skip)
                }
            };
        }
        let hcur = g.group_norm(hcur, cfg.norm_groups, None);
        let hcur = g.silu(hcur);
        Ok(g.conv2d(hcur, self.output_conv.w, Some(self.output_conv.b), 1, 1))
    }

    fn res_block<T: Float>(&self, g: &mut Graph<T>, blk: &ResBlock, x: NodeId, temb: NodeId) -> NodeId {
        let groups = self.config.norm_groups;
        let h = g.group_norm(x, groups, Some((blk.norm1.gamma, blk.norm1.beta)));
        let h = g.silu(h);
        let h = g.conv2d(h, blk.conv1.w, Some(blk.conv1.b), 1, 1);
        let tproj = g.linear(temb, blk.temb.w, Some(blk.temb.b));
        let h = g.add_bias(h, tproj);
        let h = g.group_norm(h, groups, Some((blk.norm2.gamma, blk.norm2.beta)));
        let h = g.silu(h);
        let h = g.dropout(h, self.config.dropout);
        let h = g.conv2d(h, blk.conv2.w, Some(blk.conv2.b), 1, 1);
        let skip = match &blk.shortcut {
            Some(sc) => g.conv2d(x, sc.w, Some(sc.b), 1, 0),
            None => x,
        };
        g.add(h, skip)
    }

    fn attn_block<T: Float>(&self, g: &mut Graph<T>, blk: &AttnBlock, x: NodeId) -> NodeId {
        let h = g.group_norm(x, self.config.norm_groups, Some((blk.norm.gamma, blk.norm.beta)));
        let qkv = g.conv2d(h, blk.qkv, None, 1, 0);
        let a = g.attention(qkv, self.config.heads);
        let p = g.conv2d(a, blk.proj.w, Some(blk.proj.b), 1, 0);
        g.add(p, x)
    }
}

/// Sinusoidal position encoding with frequency base 10,000: the first half
/// holds sines, the second cosines.
pub fn timestep_embedding<T: Float>(t: &[f64], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti * f).collect();
        out.extend(args.iter().map(|a| T::lit(a.sin())));
        out.extend(args.iter().map(|a| T::lit(a.cos())));
    }
    out
}

fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}
