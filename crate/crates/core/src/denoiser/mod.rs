//! The conditional denoising network.
//!
//! A U-shaped encoder/decoder over the channel-concatenation of three source
//! images and the noised target. Treatment/day pairs and the diffusion step
//! are embedded and combined into a conditioning vector that every block
//! adds (after a learned projection) to its normalized features; the
//! bottleneck only sees the target+timestep sum. A 1x1 head emits the noise
//! estimate (C channels) and four mask logit maps (s1, s2, s3, f).
//!
//! Gradients are computed by hand: [`Denoiser::forward`] optionally records
//! an [`ActivationCache`], which [`Denoiser::backward`] consumes.

mod checkpoint;
mod embedding;
pub mod layers;
mod pair;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, CKPT_MAGIC};
pub use embedding::{sinusoidal_embed, Conditioning};
pub use pair::{Treatment, TreatmentDayPair};

use std::ops::Range;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffusion::{ImageTensor, Shape};
use crate::rng::seeded;
use crate::{Error, Result};
use layers::Feat;

/// Number of mask maps: three sources plus the future session.
pub const MASK_SESSIONS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Image channels C; the network input has 4C channels.
    pub channels: usize,
    /// Feature width per resolution level; the last level is the bottleneck.
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub embed_dim: usize,
    pub groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            widths: vec![16, 32, 64],
            blocks_per_level: 2,
            embed_dim: 64,
            groups: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("model.channels", "must be positive"));
        }
        if self.widths.is_empty() {
            return Err(Error::config("model.widths", "needs at least one level"));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::config("model.blocks_per_level", "must be positive"));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::config("model.embed_dim", "must be even and positive"));
        }
        if self.groups == 0 || self.widths.iter().any(|w| *w == 0 || w % self.groups != 0) {
            return Err(Error::config(
                "model.groups",
                "must divide every entry of model.widths",
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn input_channels(&self) -> usize {
        4 * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Names, shapes and offsets of every tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn(usize),
    Zeros,
    Ones,
    Embedding,
}

#[derive(Default)]
struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> Range<usize> {
        let entry = ParamEntry {
            name,
            shape,
            offset: self.total,
        };
        let r = entry.range();
        self.total = r.end;
        self.entries.push(entry);
        self.inits.push(init);
        r
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize) -> Lin {
        Lin {
            w: self.add(format!("{name}.weight"), vec![n_out, n_in], Init::FanIn(n_in)),
            b: self.add(format!("{name}.bias"), vec![n_out], Init::Zeros),
        }
    }

    fn block(&mut self, name: &str, in_c: usize, out_c: usize, cond_dim: usize, mid: bool) -> Block {
        Block {
            conv_w: self.add(
                format!("{name}.conv.weight"),
                vec![out_c, in_c, 3, 3],
                Init::FanIn(in_c * 9),
            ),
            conv_b: self.add(format!("{name}.conv.bias"), vec![out_c], Init::Zeros),
            gamma: self.add(format!("{name}.norm.weight"), vec![out_c], Init::Ones),
            beta: self.add(format!("{name}.norm.bias"), vec![out_c], Init::Zeros),
            proj: self.linear(&format!("{name}.cond_proj"), cond_dim, out_c),
            out_c,
            mid,
        }
    }
}

#[derive(Debug, Clone)]
struct Lin {
    w: Range<usize>,
    b: Range<usize>,
}

#[derive(Debug, Clone)]
struct Block {
    conv_w: Range<usize>,
    conv_b: Range<usize>,
    gamma: Range<usize>,
    beta: Range<usize>,
    proj: Lin,
    out_c: usize,
    /// Conditioned on `mid` instead of `full`.
    mid: bool,
}

#[derive(Debug, Clone)]
struct Plan {
    treat_table: Range<usize>,
    treat_mlp: Lin,
    day_mlp: Lin,
    time_mlp: Lin,
    enc: Vec<Vec<Block>>,
    bottleneck: Vec<Block>,
    dec: Vec<Vec<Block>>,
    head_w: Range<usize>,
    head_b: Range<usize>,
}

fn plan(cfg: &ModelConfig) -> (Plan, LayoutBuilder) {
    let e = cfg.embed_dim;
    let full = 4 * e;
    let mut b = LayoutBuilder::default();
    let treat_table = b.add("treatment_table".into(), vec![2, e], Init::Embedding);
    let treat_mlp = b.linear("treatment_mlp", e, e);
    let day_mlp = b.linear("day_mlp", e, e);
    let time_mlp = b.linear("time_mlp", e, e);
    let levels = cfg.levels();
    let mut enc = Vec::new();
    let mut in_c = cfg.input_channels();
    for l in 0..levels - 1 {
        let mut blocks = Vec::new();
        for k in 0..cfg.blocks_per_level {
            blocks.push(b.block(&format!("enc{l}.{k}"), in_c, cfg.widths[l], full, false));
            in_c = cfg.widths[l];
        }
        enc.push(blocks);
    }
    let mut bottleneck = Vec::new();
    for k in 0..cfg.blocks_per_level {
        bottleneck.push(b.block(&format!("mid.{k}"), in_c, cfg.widths[levels - 1], e, true));
        in_c = cfg.widths[levels - 1];
    }
    let mut dec = vec![Vec::new(); levels - 1];
    for l in (0..levels - 1).rev() {
        in_c += cfg.widths[l];
        for k in 0..cfg.blocks_per_level {
            dec[l].push(b.block(&format!("dec{l}.{k}"), in_c, cfg.widths[l], full, false));
            in_c = cfg.widths[l];
        }
    }
    let out_c = cfg.channels + MASK_SESSIONS;
    let head_w = b.add("head.weight".into(), vec![out_c, in_c], Init::Zeros);
    let head_b = b.add("head.bias".into(), vec![out_c], Init::Zeros);
    (
        Plan {
            treat_table,
            treat_mlp,
            day_mlp,
            time_mlp,
            enc,
            bottleneck,
            dec,
            head_w,
            head_b,
        },
        b,
    )
}

/// Parameter count implied by an architecture config.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    plan(cfg).1.total
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: ImageTensor,
    pub mask_logits: ImageTensor,
}

/// Anything that predicts noise and mask maps for the sampler.
pub trait NoisePredictor: Sync {
    fn channels(&self) -> usize;

    fn predict(
        &self,
        sources: &[ImageTensor; 3],
        x_t: &ImageTensor,
        pairs: &[TreatmentDayPair; 4],
        t: usize,
    ) -> Result<DenoiserOutput>;

    /// Whether `mask_logits` are unconstrained logits (squashed by the
    /// sampler) or already probabilities.
    fn masks_are_logits(&self) -> bool {
        true
    }
}

/// Channel-concatenates `[s1, s2, s3, x_t]`.
pub fn assemble_input(sources: &[ImageTensor; 3], x_t: &ImageTensor) -> Result<ImageTensor> {
    let shape = x_t.shape();
    for s in sources {
        s.ensure_same_shape(x_t, "network input")?;
    }
    let mut data = Vec::with_capacity(4 * shape.len());
    for s in sources {
        data.extend_from_slice(s.data());
    }
    data.extend_from_slice(x_t.data());
    ImageTensor::new(Shape::new(4 * shape.channels, shape.height, shape.width), data)
}

#[derive(Debug, Clone)]
struct LinTape {
    x: Vec<f64>,
    pre: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockTape {
    x: Feat,
    norm: layers::GroupNormCache,
    pre: Feat,
}

#[derive(Debug, Clone)]
struct Tape {
    pairs: [TreatmentDayPair; 4],
    treat: Vec<LinTape>,
    day: Vec<LinTape>,
    time: LinTape,
    cond: Conditioning,
    blocks: Vec<BlockTape>,
    head_in: Feat,
}

/// Activations recorded by a forward pass for the backward pass. Each
/// concurrent evaluation needs its own cache.
#[derive(Debug, Clone, Default)]
pub struct ActivationCache {
    tape: Option<Tape>,
}

impl ActivationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.tape.is_some()
    }

    pub fn clear(&mut self) {
        self.tape = None;
    }

    /// Conditioning used by the recorded pass.
    pub fn conditioning(&self) -> Option<&Conditioning> {
        self.tape.as_ref().map(|t| &t.cond)
    }

    /// Pre-activation (normalized features plus projected conditioning) of
    /// the `index`-th block in execution order.
    pub fn block_preactivation(&self, index: usize) -> Option<&[f64]> {
        self.tape
            .as_ref()
            .and_then(|t| t.blocks.get(index))
            .map(|b| b.pre.data.as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    plan: Plan,
}

impl Denoiser {
    /// Seeded initialization: fan-in scaled uniform weights, zero biases,
    /// unit norm gains, N(0, 0.02) treatment table and a zero output head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (plan, builder) = plan(&config);
        let mut rng = seeded(seed);
        let mut params = vec![0.0; builder.total];
        let emb = Normal::new(0.0, 0.02).expect("valid normal");
        for (entry, init) in builder.entries.iter().zip(&builder.inits) {
            let dst = &mut params[entry.range()];
            match *init {
                Init::Zeros => {}
                Init::Ones => dst.iter_mut().for_each(|v| *v = 1.0),
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                    dst.iter_mut().for_each(|v| *v = u.sample(&mut rng));
                }
                Init::Embedding => dst.iter_mut().for_each(|v| *v = emb.sample(&mut rng)),
            }
        }
        let layout = ParamLayout {
            entries: builder.entries,
            total: builder.total,
        };
        Ok(Self {
            config,
            layout,
            params,
            plan,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (plan, builder) = plan(&config);
        if params.len() != builder.total {
            return Err(Error::Argument(format!(
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                builder.total
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            layout: ParamLayout {
                entries: builder.entries,
                total: builder.total,
            },
            params,
            plan,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    fn mlp(&self, lin: &Lin, x: Vec<f64>) -> (Vec<f64>, LinTape) {
        let pre = layers::linear(&x, self.p(&lin.w), self.p(&lin.b));
        let out = pre.iter().map(|&v| layers::silu(v)).collect();
        (out, LinTape { x, pre })
    }

    fn embed_pair_taped(&self, pair: TreatmentDayPair) -> Result<(Vec<f64>, LinTape, LinTape)> {
        let e = self.config.embed_dim;
        let row = pair.treatment.index();
        let table = self.p(&self.plan.treat_table);
        let (tv, tt) = self.mlp(&self.plan.treat_mlp, table[row * e..(row + 1) * e].to_vec());
        let (dv, dt) = self.mlp(&self.plan.day_mlp, sinusoidal_embed(pair.day, e)?);
        Ok((tv.iter().zip(&dv).map(|(a, b)| a + b).collect(), tt, dt))
    }

    /// Learned treatment embedding plus learned day embedding.
    pub fn embed_pair(&self, pair: TreatmentDayPair) -> Result<Vec<f64>> {
        Ok(self.embed_pair_taped(pair)?.0)
    }

    /// Validates and embeds a raw treatment code.
    pub fn embed_code(&self, treatment: u8, day: u32) -> Result<Vec<f64>> {
        self.embed_pair(TreatmentDayPair::new(Treatment::try_from(treatment)?, day))
    }

    fn conditioning_taped(
        &self,
        pairs: &[TreatmentDayPair; 4],
        t: usize,
    ) -> Result<(Conditioning, Vec<LinTape>, Vec<LinTape>, LinTape)> {
        let mut vecs = Vec::with_capacity(4);
        let mut treat = Vec::with_capacity(4);
        let mut day = Vec::with_capacity(4);
        for &p in pairs {
            let (v, tt, dt) = self.embed_pair_taped(p)?;
            vecs.push(v);
            treat.push(tt);
            day.push(dt);
        }
        let step = u32::try_from(t).map_err(|_| Error::Argument(format!("step {t} too large")))?;
        let (tv, time) = self.mlp(
            &self.plan.time_mlp,
            sinusoidal_embed(step, self.config.embed_dim)?,
        );
        let cond = Conditioning::assemble([&vecs[0], &vecs[1], &vecs[2]], &vecs[3], &tv);
        Ok((cond, treat, day, time))
    }

    /// Conditioning for source pairs `s1..s3`, target pair `f` and step `t`.
    pub fn build_conditioning(
        &self,
        sources: &[TreatmentDayPair; 3],
        target: TreatmentDayPair,
        t: usize,
    ) -> Result<Conditioning> {
        let pairs = [sources[0], sources[1], sources[2], target];
        Ok(self.conditioning_taped(&pairs, t)?.0)
    }

    fn block_forward(&self, b: &Block, x: Feat, cond: &Conditioning) -> (Feat, BlockTape) {
        let z = layers::conv3x3(&x, self.p(&b.conv_w), self.p(&b.conv_b), b.out_c);
        let (mut a, norm) =
            layers::group_norm(&z, self.config.groups, self.p(&b.gamma), self.p(&b.beta));
        let c = if b.mid { &cond.mid } else { &cond.full };
        let shift = layers::linear(c, self.p(&b.proj.w), self.p(&b.proj.b));
        let hw = a.plane();
        for (ch, chunk) in a.data.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v += shift[ch]);
        }
        let y = Feat {
            data: a.data.iter().map(|&v| layers::silu(v)).collect(),
            ..a.clone()
        };
        (y, BlockTape { x, norm, pre: a })
    }

    /// Runs the network on a `4C x H x W` input. Pass a cache to record the
    /// activations needed by [`Denoiser::backward`].
    pub fn forward(
        &self,
        x_in: &ImageTensor,
        pairs: &[TreatmentDayPair; 4],
        t: usize,
        cache: Option<&mut ActivationCache>,
    ) -> Result<DenoiserOutput> {
        let shape = x_in.shape();
        if shape.channels != self.config.input_channels() {
            return Err(Error::Argument(format!(
                "network input has {} channels, expected {}",
                shape.channels,
                self.config.input_channels()
            )));
        }
        let div = self.config.divisor();
        if !shape.height.is_multiple_of(div) || !shape.width.is_multiple_of(div) {
            return Err(Error::Argument(format!(
                "input {}x{} not divisible by {div}",
                shape.height, shape.width
            )));
        }
        let record = cache.is_some();
        let (cond, treat, day, time) = self.conditioning_taped(pairs, t)?;
        let mut tapes = Vec::new();
        let run = |b: &Block, h: Feat, tapes: &mut Vec<BlockTape>| {
            let (y, tape) = self.block_forward(b, h, &cond);
            if record {
                tapes.push(tape);
            }
            y
        };
        let mut h = Feat {
            c: shape.channels,
            h: shape.height,
            w: shape.width,
            data: x_in.data().to_vec(),
        };
        let mut skips = Vec::new();
        for level in &self.plan.enc {
            for b in level {
                h = run(b, h, &mut tapes);
            }
            let pooled = layers::avg_pool2(&h);
            skips.push(h);
            h = pooled;
        }
        for b in &self.plan.bottleneck {
            h = run(b, h, &mut tapes);
        }
        for (l, level) in self.plan.dec.iter().enumerate().rev() {
            h = layers::concat_channels(&layers::upsample2(&h), &skips[l]);
            for b in level {
                h = run(b, h, &mut tapes);
            }
        }
        let out_c = self.config.channels + MASK_SESSIONS;
        let out = layers::conv1x1(&h, self.p(&self.plan.head_w), self.p(&self.plan.head_b), out_c);
        let (eps, mask) = layers::split_channels(&out, self.config.channels);
        if let Some(cache) = cache {
            cache.tape = Some(Tape {
                pairs: *pairs,
                treat,
                day,
                time,
                cond: cond.clone(),
                blocks: tapes,
                head_in: h,
            });
        }
        Ok(DenoiserOutput {
            eps_hat: ImageTensor::new(Shape::new(eps.c, eps.h, eps.w), eps.data)?,
            mask_logits: ImageTensor::new(Shape::new(mask.c, mask.h, mask.w), mask.data)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        b: &Block,
        tape: &BlockTape,
        cond: &Conditioning,
        dy: &Feat,
        grad: &mut [f64],
        dcond: &mut Conditioning,
    ) -> Feat {
        let hw = dy.plane();
        let da = Feat {
            data: dy
                .data
                .iter()
                .zip(&tape.pre.data)
                .map(|(&d, &a)| d * layers::silu_grad(a))
                .collect(),
            ..dy.clone()
        };
        let dshift: Vec<f64> = da.data.chunks(hw).map(|c| c.iter().sum()).collect();
        let (c_in, dc) = if b.mid {
            (&cond.mid, &mut dcond.mid)
        } else {
            (&cond.full, &mut dcond.full)
        };
        let (gw, gb) = pair_mut(grad, &b.proj.w, &b.proj.b);
        let dci = layers::linear_backward(c_in, self.p(&b.proj.w), &dshift, gw, gb);
        dc.iter_mut().zip(&dci).for_each(|(a, d)| *a += d);
        let (gg, gbeta) = pair_mut(grad, &b.gamma, &b.beta);
        let dz = layers::group_norm_backward(
            &tape.norm,
            self.config.groups,
            self.p(&b.gamma),
            &da,
            gg,
            gbeta,
        );
        let (gcw, gcb) = pair_mut(grad, &b.conv_w, &b.conv_b);
        layers::conv3x3_backward(&tape.x, self.p(&b.conv_w), &dz, gcw, gcb)
    }

    fn mlp_backward(&self, lin: &Lin, tape: &LinTape, dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let dpre: Vec<f64> = dout
            .iter()
            .zip(&tape.pre)
            .map(|(&d, &a)| d * layers::silu_grad(a))
            .collect();
        let (gw, gb) = pair_mut(grad, &lin.w, &lin.b);
        layers::linear_backward(&tape.x, self.p(&lin.w), &dpre, gw, gb)
    }

    /// Reverse-mode gradient of `<d_eps, eps_hat> + <d_mask, mask_logits>`
    /// with respect to every parameter, in layout order.
    pub fn backward(&self, cache: &ActivationCache, d_eps: &[f64], d_mask: &[f64]) -> Result<Vec<f64>> {
        let tape = cache.tape.as_ref().ok_or_else(|| {
            Error::State("backward called without a recorded forward pass".into())
        })?;
        let head_in = &tape.head_in;
        let plane = head_in.plane();
        if d_eps.len() != self.config.channels * plane || d_mask.len() != MASK_SESSIONS * plane {
            return Err(Error::Argument(format!(
                "output gradient lengths {}/{} do not match the recorded pass",
                d_eps.len(),
                d_mask.len()
            )));
        }
        let mut grad = vec![0.0; self.layout.total];
        let mut data = Vec::with_capacity(d_eps.len() + d_mask.len());
        data.extend_from_slice(d_eps);
        data.extend_from_slice(d_mask);
        let dout = Feat {
            c: self.config.channels + MASK_SESSIONS,
            h: head_in.h,
            w: head_in.w,
            data,
        };
        let (gw, gb) = pair_mut(&mut grad, &self.plan.head_w, &self.plan.head_b);
        let mut dh = layers::conv1x1_backward(head_in, self.p(&self.plan.head_w), &dout, gw, gb);

        let e = self.config.embed_dim;
        let mut dcond = Conditioning {
            full: vec![0.0; 4 * e],
            mid: vec![0.0; e],
        };
        let levels = self.config.levels();
        let mut bi = tape.blocks.len();
        let mut dskips = vec![None; levels - 1];
        for l in 0..levels - 1 {
            for b in self.plan.dec[l].iter().rev() {
                bi -= 1;
                dh = self.block_backward(b, &tape.blocks[bi], &tape.cond, &dh, &mut grad, &mut dcond);
            }
            let (dup, dskip) = layers::split_channels(&dh, self.config.widths[l + 1]);
            dskips[l] = Some(dskip);
            dh = layers::upsample2_backward(&dup);
        }
        for b in self.plan.bottleneck.iter().rev() {
            bi -= 1;
            dh = self.block_backward(b, &tape.blocks[bi], &tape.cond, &dh, &mut grad, &mut dcond);
        }
        for l in (0..levels - 1).rev() {
            dh = layers::avg_pool2_backward(&dh);
            let skip = dskips[l].take().expect("decoder visited every level");
            dh.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
            for b in self.plan.enc[l].iter().rev() {
                bi -= 1;
                dh = self.block_backward(b, &tape.blocks[bi], &tape.cond, &dh, &mut grad, &mut dcond);
            }
        }
        debug_assert_eq!(bi, 0);

        // full = [vf - vs1, vf - vs2, vf - vs3, vf + vt], mid = vf + vt
        let seg = |i: usize| &dcond.full[i * e..(i + 1) * e];
        let d_time: Vec<f64> = seg(3).iter().zip(&dcond.mid).map(|(a, b)| a + b).collect();
        let d_target: Vec<f64> = (0..e)
            .map(|j| seg(0)[j] + seg(1)[j] + seg(2)[j] + d_time[j])
            .collect();
        self.mlp_backward(&self.plan.time_mlp, &tape.time, &d_time, &mut grad);
        for k in 0..4 {
            let dv: Vec<f64> = if k < 3 {
                seg(k).iter().map(|v| -v).collect()
            } else {
                d_target.clone()
            };
            let drow = self.mlp_backward(&self.plan.treat_mlp, &tape.treat[k], &dv, &mut grad);
            let row = tape.pairs[k].treatment.index();
            let table = &mut grad[self.plan.treat_table.clone()];
            table[row * e..(row + 1) * e]
                .iter_mut()
                .zip(&drow)
                .for_each(|(a, b)| *a += b);
            self.mlp_backward(&self.plan.day_mlp, &tape.day[k], &dv, &mut grad);
        }
        Ok(grad)
    }
}

/// Disjoint mutable views of two adjacent parameter ranges.
fn pair_mut<'a>(grad: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    assert_eq!(a.end, b.start, "parameter ranges must be adjacent");
    grad[a.start..b.end].split_at_mut(a.len())
}

impl NoisePredictor for Denoiser {
    fn channels(&self) -> usize {
        self.config.channels
    }

    fn predict(
        &self,
        sources: &[ImageTensor; 3],
        x_t: &ImageTensor,
        pairs: &[TreatmentDayPair; 4],
        t: usize,
    ) -> Result<DenoiserOutput> {
        if x_t.shape().channels != self.config.channels {
            return Err(Error::Argument(format!(
                "image has {} channels, model expects {}",
                x_t.shape().channels,
                self.config.channels
            )));
        }
        self.forward(&assemble_input(sources, x_t)?, pairs, t, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};
    use rand::Rng as _;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 2,
            widths: vec![4, 8, 8],
            blocks_per_level: 2,
            embed_dim: 8,
            groups: 2,
        }
    }

    fn pairs() -> [TreatmentDayPair; 4] {
        [
            TreatmentDayPair::new(Treatment::Crt, 0),
            TreatmentDayPair::new(Treatment::Crt, 21),
            TreatmentDayPair::new(Treatment::Tmz, 60),
            TreatmentDayPair::new(Treatment::Tmz, 130),
        ]
    }

    fn input(cfg: &ModelConfig, h: usize, seed: u64) -> ImageTensor {
        let s = Shape::new(cfg.input_channels(), h, h);
        ImageTensor::new(s, normal_vec(&mut seeded(seed), s.len())).unwrap()
    }

    /// Random parameters everywhere, including the zero-initialized head.
    fn randomized(cfg: ModelConfig, seed: u64) -> Denoiser {
        let n = parameter_count(&cfg);
        let p = normal_vec(&mut seeded(seed), n).iter().map(|v| 0.4 * v).collect();
        Denoiser::from_params(cfg, p).unwrap()
    }

    #[test]
    fn parameter_count_matches_layout() {
        for cfg in [tiny(), ModelConfig::default()] {
            let d = Denoiser::new(cfg.clone(), 0).unwrap();
            assert_eq!(d.params().len(), parameter_count(&cfg));
            assert_eq!(d.layout().total, d.params().len());
            let sum: usize = d.layout().entries.iter().map(|e| e.len()).sum();
            assert_eq!(sum, d.layout().total);
        }
        assert!(Denoiser::from_params(tiny(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn output_shapes() {
        let cfg = ModelConfig::default();
        let d = Denoiser::new(cfg.clone(), 1).unwrap();
        let out = d.forward(&input(&cfg, 64, 2), &pairs(), 300, None).unwrap();
        assert_eq!(out.eps_hat.shape(), Shape::new(3, 64, 64));
        assert_eq!(out.mask_logits.shape(), Shape::new(4, 64, 64));
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let cfg = tiny();
        let d = Denoiser::from_params(cfg.clone(), vec![0.0; parameter_count(&cfg)]).unwrap();
        let out = d.forward(&input(&cfg, 8, 3), &pairs(), 17, None).unwrap();
        assert!(out.eps_hat.data().iter().all(|&v| v == 0.0));
        assert!(out.mask_logits.data().iter().all(|&v| v == 0.0));
        // Zero MLPs embed every pair to zero.
        for p in pairs() {
            assert!(d.embed_pair(p).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic_forward() {
        let cfg = tiny();
        let a = randomized(cfg.clone(), 4);
        let b = randomized(cfg.clone(), 4);
        let x = input(&cfg, 8, 5);
        assert_eq!(
            a.forward(&x, &pairs(), 9, None).unwrap(),
            b.forward(&x, &pairs(), 9, None).unwrap()
        );
        assert_eq!(
            Denoiser::new(cfg.clone(), 3).unwrap().params(),
            Denoiser::new(cfg, 3).unwrap().params()
        );
    }

    #[test]
    fn input_contract_errors() {
        let cfg = tiny();
        let d = Denoiser::new(cfg.clone(), 0).unwrap();
        let odd = input(&cfg, 6, 1);
        assert!(matches!(d.forward(&odd, &pairs(), 1, None), Err(Error::Argument(_))));
        let s = Shape::new(3, 8, 8);
        assert!(d.forward(&ImageTensor::zeros(s), &pairs(), 1, None).is_err());
    }

    #[test]
    fn pair_embeddings() {
        let d = randomized(tiny(), 6);
        let a = TreatmentDayPair::new(Treatment::Tmz, 40);
        assert_eq!(d.embed_pair(a).unwrap(), d.embed_pair(a).unwrap());
        let b = TreatmentDayPair::new(Treatment::Tmz, 41);
        assert_ne!(d.embed_pair(a).unwrap(), d.embed_pair(b).unwrap());
        let c = TreatmentDayPair::new(Treatment::Crt, 40);
        assert_ne!(d.embed_pair(a).unwrap(), d.embed_pair(c).unwrap());
        assert!(matches!(d.embed_code(7, 3), Err(Error::Vocabulary(7))));
    }

    #[test]
    fn conditioning_construction() {
        let d = randomized(tiny(), 7);
        let e = d.config().embed_dim;
        let p = pairs();
        let same = d.build_conditioning(&[p[3]; 3], p[3], 5).unwrap();
        assert!(same.full[..3 * e].iter().all(|&v| v == 0.0));

        let c = d.build_conditioning(&[p[0], p[1], p[2]], p[3], 5).unwrap();
        assert_eq!(c.full.len(), 4 * e);
        assert_eq!(c.mid.len(), e);
        let swapped = d.build_conditioning(&[p[1], p[0], p[2]], p[3], 5).unwrap();
        assert_eq!(&swapped.full[..e], &c.full[e..2 * e]);
        assert_eq!(&swapped.full[e..2 * e], &c.full[..e]);
        assert_eq!(&swapped.full[2 * e..], &c.full[2 * e..]);

        // Independent sum: target embedding plus time MLP of the step.
        let target = d.embed_pair(p[3]).unwrap();
        let lin = &d.plan.time_mlp;
        let time: Vec<f64> = layers::linear(&sinusoidal_embed(5, e).unwrap(), d.p(&lin.w), d.p(&lin.b))
            .into_iter()
            .map(layers::silu)
            .collect();
        for j in 0..e {
            assert!((c.mid[j] - (target[j] + time[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn target_day_reaches_first_block() {
        let cfg = tiny();
        let d = randomized(cfg.clone(), 8);
        let x = input(&cfg, 8, 9);
        let mut p = pairs();
        let mut c1 = ActivationCache::new();
        d.forward(&x, &p, 50, Some(&mut c1)).unwrap();
        p[3].day += 30;
        let mut c2 = ActivationCache::new();
        d.forward(&x, &p, 50, Some(&mut c2)).unwrap();
        assert_ne!(c1.conditioning(), c2.conditioning());
        assert_ne!(c1.block_preactivation(0), c2.block_preactivation(0));
    }

    #[test]
    fn backward_requires_cache() {
        let d = randomized(tiny(), 10);
        let e = d.backward(&ActivationCache::new(), &[], &[]).unwrap_err();
        assert!(matches!(e, Error::State(_)));
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient() {
        let cfg = tiny();
        let d = randomized(cfg.clone(), 11);
        let x = input(&cfg, 8, 12);
        let mut cache = ActivationCache::new();
        let out = d.forward(&x, &pairs(), 33, Some(&mut cache)).unwrap();
        let ne = out.eps_hat.data().len();
        let nm = out.mask_logits.data().len();
        let zero = d.backward(&cache, &vec![0.0; ne], &vec![0.0; nm]).unwrap();
        assert!(zero.iter().all(|&g| g == 0.0));
        let (e1, m1) = (normal_vec(&mut seeded(1), ne), normal_vec(&mut seeded(2), nm));
        let (e2, m2) = (normal_vec(&mut seeded(3), ne), normal_vec(&mut seeded(4), nm));
        let g1 = d.backward(&cache, &e1, &m1).unwrap();
        let g2 = d.backward(&cache, &e2, &m2).unwrap();
        let es: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a + b).collect();
        let ms: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| a + b).collect();
        let g12 = d.backward(&cache, &es, &ms).unwrap();
        for i in 0..g12.len() {
            assert!((g12[i] - g1[i] - g2[i]).abs() < 1e-9 * (1.0 + g12[i].abs()));
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = tiny();
        let d = randomized(cfg.clone(), 13);
        let x = input(&cfg, 8, 14);
        let p = pairs();
        let t = 77;
        let mut cache = ActivationCache::new();
        let out = d.forward(&x, &p, t, Some(&mut cache)).unwrap();
        // Scalar objective: random linear functional of both outputs.
        let we = normal_vec(&mut seeded(20), out.eps_hat.data().len());
        let wm = normal_vec(&mut seeded(21), out.mask_logits.data().len());
        let grad = d.backward(&cache, &we, &wm).unwrap();
        let objective = |model: &Denoiser| {
            let o = model.forward(&x, &p, t, None).unwrap();
            let a: f64 = o.eps_hat.data().iter().zip(&we).map(|(a, b)| a * b).sum();
            let b: f64 = o.mask_logits.data().iter().zip(&wm).map(|(a, b)| a * b).sum();
            a + b
        };
        let mut rng = seeded(22);
        let mut model = d.clone();
        let h = 1e-5;
        for entry in d.layout().entries.clone() {
            for _ in 0..3 {
                let i = entry.offset + rng.random_range(0..entry.len());
                let orig = model.params()[i];
                model.params_mut()[i] = orig + h;
                let up = objective(&model);
                model.params_mut()[i] = orig - h;
                let dn = objective(&model);
                model.params_mut()[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{i}]: fd {fd} vs analytic {}", entry.name, grad[i]);
            }
        }
    }
}
