//! Predictive-coding backbone.
//!
//! Layer `l` holds a forward map `C_f[l]`, a post-feedback map `C_b[l]` and
//! the prediction `D[l-1]` that its feedback deconvolution makes of the layer
//! below. One cycle is a feedback pass followed by a forward pass:
//!
//! ```text
//! feedback:  D[l-1]   = FB_l(C_f[l])
//!            C_b[l-1] = relu((1 - b[l-1]) * C_f[l-1] + b[l-1] * D[l-1])     (l-1 >= 1)
//!            C_b[0]   = image,  C_b[L] = C_f[L]
//! forward:   C_f[l]   = relu(C_b[l] + a[l] * FF_l(C_b[l-1] - D[l-1]))
//! ```
//!
//! `FF_l` is conv (+ maxpool on pooling layers); the initial pass also
//! applies batchnorm between the two. `FB_l` is a transposed conv with
//! stride 2 when layer `l` pools.

use indexmap::IndexMap;
use pcn_tensor::{BatchStats, Graph, NormMode, ParamKind, ParamSet, Scalar, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const RATE_A_INIT: f64 = 1.0;
pub const RATE_B_INIT: f64 = 0.5;

pub mod names {
    pub fn conv_weight(l: usize) -> String {
        format!("ff.conv{l}.weight")
    }
    pub fn conv_bias(l: usize) -> String {
        format!("ff.conv{l}.bias")
    }
    pub fn bn_scale(l: usize) -> String {
        format!("ff.bn{l}.scale")
    }
    pub fn bn_shift(l: usize) -> String {
        format!("ff.bn{l}.shift")
    }
    pub fn bn_mean(l: usize) -> String {
        format!("ff.bn{l}.running_mean")
    }
    pub fn bn_var(l: usize) -> String {
        format!("ff.bn{l}.running_var")
    }
    pub fn deconv_weight(l: usize) -> String {
        format!("fb.deconv{l}.weight")
    }
    pub fn deconv_bias(l: usize) -> String {
        format!("fb.deconv{l}.bias")
    }
    pub fn head_weight(t: usize) -> String {
        format!("head.{t}.weight")
    }
    pub fn head_bias(t: usize) -> String {
        format!("head.{t}.bias")
    }
    pub fn rate_a(l: usize) -> String {
        format!("rate.a.{l}")
    }
    pub fn rate_b(l: usize) -> String {
        format!("rate.b.{l}")
    }
}

/// Whether the initial pass normalizes with batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Update rates: `a[l]` for `l in 1..=L` (stored at `a[l-1]`) and `b[l]` for
/// `l in 0..L`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRates {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Projects rates back onto the feasible set: non-negative, `b[0] = 0`.
pub fn clamp_rates(mut rates: UpdateRates) -> UpdateRates {
    rates.a.iter_mut().for_each(|v| *v = v.max(0.0));
    rates.b.iter_mut().for_each(|v| *v = v.max(0.0));
    if let Some(b0) = rates.b.first_mut() {
        *b0 = 0.0;
    }
    rates
}

/// Model configuration plus every named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PcModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

fn uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Ok(Tensor::from_fn(shape, |_| T::cast(rng.random_range(-bound..bound)))?)
}

impl<T: Scalar> PcModel<T> {
    /// Fresh parameters. Values are drawn in `f64` so that `f32` and `f64`
    /// models built from the same seed agree up to rounding.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let num_layers = config.num_layers();
        for l in 1..=num_layers {
            let (cin, cout) = (config.channels(l - 1), config.channels(l));
            p.insert(names::conv_weight(l), uniform(&[cout, cin, 3, 3], cin * 9, &mut rng)?, ParamKind::Weight, true)?;
            p.insert(names::conv_bias(l), uniform(&[cout], cin * 9, &mut rng)?, ParamKind::Bias, true)?;
            p.insert(names::bn_scale(l), Tensor::full(&[cout], T::one())?, ParamKind::Norm, true)?;
            p.insert(names::bn_shift(l), Tensor::zeros(&[cout])?, ParamKind::Norm, true)?;
            p.insert(names::bn_mean(l), Tensor::zeros(&[cout])?, ParamKind::Buffer, false)?;
            p.insert(names::bn_var(l), Tensor::full(&[cout], T::one())?, ParamKind::Buffer, false)?;
            p.insert(names::deconv_weight(l), uniform(&[cout, cin, 3, 3], cin * 9, &mut rng)?, ParamKind::Weight, true)?;
            p.insert(names::deconv_bias(l), uniform(&[cin], cin * 9, &mut rng)?, ParamKind::Bias, true)?;
        }
        let (features, classes) = (config.feature_len(), config.num_classes);
        for t in 1..=config.max_cycles {
            p.insert(names::head_weight(t), uniform(&[classes, features], features, &mut rng)?, ParamKind::Weight, true)?;
            p.insert(names::head_bias(t), uniform(&[classes], features, &mut rng)?, ParamKind::Bias, true)?;
        }
        for l in 1..=num_layers {
            p.insert(names::rate_a(l), Tensor::scalar(T::cast(RATE_A_INIT)), ParamKind::Rate, true)?;
        }
        p.insert(names::rate_b(0), Tensor::scalar(T::zero()), ParamKind::Rate, false)?;
        for l in 1..num_layers {
            p.insert(names::rate_b(l), Tensor::scalar(T::cast(RATE_B_INIT)), ParamKind::Rate, true)?;
        }
        Ok(Self { config, params: p })
    }

    /// Checks that `params` has exactly the tensors `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, p) in template.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if got.tensor.shape() != p.tensor.shape() || got.kind != p.kind || got.trainable != p.trainable {
                return Err(Error::Format(format!("tensor {name} does not match the model layout")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> PcModel<U> {
        PcModel { config: self.config.clone(), params: self.params.cast() }
    }

    pub fn session(&self, track_grads: bool) -> Result<Session<'_, T>> {
        Session::new(self, track_grads)
    }

    pub fn rates(&self) -> Result<UpdateRates> {
        let read = |name: String| -> Result<f64> { Ok(self.params.tensor(&name)?.data()[0].as_f64()) };
        let l = self.config.num_layers();
        Ok(UpdateRates {
            a: (1..=l).map(|i| read(names::rate_a(i))).collect::<Result<_>>()?,
            b: (0..l).map(|i| read(names::rate_b(i))).collect::<Result<_>>()?,
        })
    }

    pub fn set_rates(&mut self, rates: &UpdateRates) -> Result<()> {
        let l = self.config.num_layers();
        if rates.a.len() != l || rates.b.len() != l {
            return Err(Error::Config(format!("need {l} a-rates and {l} b-rates")));
        }
        for (i, &v) in rates.a.iter().enumerate() {
            self.params.set(&names::rate_a(i + 1), Tensor::scalar(T::cast(v)))?;
        }
        for (i, &v) in rates.b.iter().enumerate() {
            self.params.set(&names::rate_b(i), Tensor::scalar(T::cast(v)))?;
        }
        Ok(())
    }

    /// Applies [`clamp_rates`] to the stored rates.
    pub fn clamp_rates(&mut self) -> Result<()> {
        let r = clamp_rates(self.rates()?);
        self.set_rates(&r)
    }

    /// Folds one batch's initial-pass statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.config.num_layers() {
            return Err(Error::Usage(format!("{} batch statistics for {} layers", stats.len(), self.config.num_layers())));
        }
        let m = T::cast(BN_MOMENTUM);
        for (i, s) in stats.iter().enumerate() {
            let l = i + 1;
            for (name, fresh) in [(names::bn_mean(l), s.mean.clone()), (names::bn_var(l), s.unbiased_var())] {
                let old = self.params.tensor(&name)?;
                let blended: Vec<T> = old
                    .data()
                    .iter()
                    .zip(&fresh)
                    .map(|(&o, &f)| (T::one() - m) * o + m * f)
                    .collect();
                let t = Tensor::new(old.shape(), blended)?;
                self.params.set(&name, t)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerVars {
    conv_w: Var,
    conv_b: Var,
    bn_scale: Var,
    bn_shift: Var,
    deconv_w: Var,
    deconv_b: Var,
    rate_a: Var,
    pool: bool,
}

/// Feature maps of one batch. Entries are nodes of the owning [`Session`].
#[derive(Debug, Clone)]
pub struct PcState {
    forward: Vec<Var>,
    feedback: Vec<Var>,
    prediction: Vec<Option<Var>>,
    cycle: usize,
    max_cycles: usize,
}

impl PcState {
    /// `C_f[l]`; `l = 0` is the input image.
    pub fn forward_map(&self, l: usize) -> Var {
        self.forward[l]
    }

    /// `C_b[l]`; `l = 0` is the input image.
    pub fn feedback_map(&self, l: usize) -> Var {
        self.feedback[l]
    }

    /// `D[l]`, the prediction of layer `l` made from layer `l + 1`.
    pub fn prediction(&self, l: usize) -> Option<Var> {
        self.prediction.get(l).copied().flatten()
    }

    pub fn cycle(&self) -> usize {
        self.cycle
    }

    pub fn max_cycles(&self) -> usize {
        self.max_cycles
    }

    pub fn num_layers(&self) -> usize {
        self.forward.len() - 1
    }
}

/// A model bound into a fresh autodiff graph.
pub struct Session<'m, T: Scalar = f32> {
    model: &'m PcModel<T>,
    graph: Graph<T>,
    layers: Vec<LayerVars>,
    rate_b: Vec<Var>,
    heads: Vec<(Var, Var)>,
    named: Vec<(String, Var)>,
}

impl<'m, T: Scalar> Session<'m, T> {
    fn new(model: &'m PcModel<T>, track_grads: bool) -> Result<Self> {
        let mut graph = Graph::new();
        let mut named = Vec::new();
        let mut bind = |name: String| -> Result<Var> {
            let p = model.params.get(&name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            let v = graph.leaf(p.tensor.clone(), track_grads && p.trainable);
            named.push((name, v));
            Ok(v)
        };
        let cfg = &model.config;
        let mut layers = Vec::with_capacity(cfg.num_layers());
        for (i, spec) in cfg.layers.iter().enumerate() {
            let l = i + 1;
            layers.push(LayerVars {
                conv_w: bind(names::conv_weight(l))?,
                conv_b: bind(names::conv_bias(l))?,
                bn_scale: bind(names::bn_scale(l))?,
                bn_shift: bind(names::bn_shift(l))?,
                deconv_w: bind(names::deconv_weight(l))?,
                deconv_b: bind(names::deconv_bias(l))?,
                rate_a: bind(names::rate_a(l))?,
                pool: spec.pool_after,
            });
        }
        let rate_b = (0..cfg.num_layers()).map(|l| bind(names::rate_b(l))).collect::<Result<_>>()?;
        let heads = (1..=cfg.max_cycles)
            .map(|t| Ok((bind(names::head_weight(t))?, bind(names::head_bias(t))?)))
            .collect::<Result<_>>()?;
        Ok(Self { model, graph, layers, rate_b, heads, named })
    }

    pub fn model(&self) -> &'m PcModel<T> {
        self.model
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Graph node bound to the named parameter.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.named.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.graph.leaf(x, false)
    }

    fn check_rates(&self) -> Result<()> {
        let bad = self
            .layers
            .iter()
            .map(|l| l.rate_a)
            .chain(self.rate_b.iter().copied())
            .any(|v| self.graph.value(v).data()[0] < T::zero());
        if bad {
            return Err(Error::Invariant("update rates must be non-negative".into()));
        }
        Ok(())
    }

    /// Conventional forward sweep that seeds every `C_f[l]` (cycle 0).
    /// Returns the per-layer batch statistics in [`Phase::Train`].
    pub fn init_pass(&mut self, x: Var, phase: Phase) -> Result<(PcState, Vec<BatchStats<T>>)> {
        let cfg = &self.model.config;
        let shape = self.graph.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != cfg.input_channels || shape[2] != cfg.input_size || shape[3] != cfg.input_size {
            return Err(Error::Config(format!(
                "input {:?} does not match [B, {}, {}, {}]",
                shape, cfg.input_channels, cfg.input_size, cfg.input_size
            )));
        }
        let model = self.model;
        let mut forward = vec![x];
        let mut stats = Vec::new();
        for (i, lv) in self.layers.clone().iter().enumerate() {
            let l = i + 1;
            let h = self.graph.conv2d(forward[i], lv.conv_w, lv.conv_b)?;
            let mode = match phase {
                Phase::Train => NormMode::Train,
                Phase::Eval => NormMode::Eval {
                    mean: model.params.tensor(&names::bn_mean(l))?,
                    var: model.params.tensor(&names::bn_var(l))?,
                },
            };
            let (h, s) = self.graph.batchnorm(h, lv.bn_scale, lv.bn_shift, mode)?;
            stats.extend(s);
            let h = if lv.pool { self.graph.maxpool2(h)? } else { h };
            forward.push(self.graph.relu(h)?);
        }
        let n = self.layers.len();
        Ok((
            PcState {
                feedback: forward.clone(),
                forward,
                prediction: vec![None; n],
                cycle: 0,
                max_cycles: cfg.max_cycles,
            },
            stats,
        ))
    }

    /// Predictions from the current forward maps, blended into `C_b`.
    pub fn feedback_pass(&mut self, state: &mut PcState) -> Result<()> {
        self.check_rates()?;
        let n = self.layers.len();
        for l in (1..=n).rev() {
            let lv = self.layers[l - 1];
            let d = self
                .graph
                .deconv2d(state.forward[l], lv.deconv_w, lv.deconv_b, if lv.pool { 2 } else { 1 })?;
            state.prediction[l - 1] = Some(d);
            if l > 1 {
                let mix = self.graph.lerp(state.forward[l - 1], d, self.rate_b[l - 1])?;
                state.feedback[l - 1] = self.graph.relu(mix)?;
            }
        }
        state.feedback[n] = state.forward[n];
        Ok(())
    }

    /// Error-correcting forward sweep over the post-feedback maps.
    pub fn forward_pass(&mut self, state: &mut PcState) -> Result<()> {
        self.check_rates()?;
        let n = self.layers.len();
        let mut next = Vec::with_capacity(n);
        for l in 1..=n {
            let lv = self.layers[l - 1];
            let d = state.prediction[l - 1]
                .ok_or_else(|| Error::Usage("forward pass needs a preceding feedback pass".into()))?;
            let err = self.graph.sub(state.feedback[l - 1], d)?;
            let h = self.graph.conv2d(err, lv.conv_w, lv.conv_b)?;
            let h = if lv.pool { self.graph.maxpool2(h)? } else { h };
            let upd = self.graph.add_scaled(state.feedback[l], lv.rate_a, h)?;
            next.push(self.graph.relu(upd)?);
        }
        state.forward[1..].copy_from_slice(&next);
        Ok(())
    }

    /// One feedback pass plus one forward pass.
    pub fn run_cycle(&mut self, state: &mut PcState) -> Result<()> {
        if state.cycle >= state.max_cycles {
            return Err(Error::MaxCyclesExceeded(state.max_cycles));
        }
        self.feedback_pass(state)?;
        self.forward_pass(state)?;
        state.cycle += 1;
        Ok(())
    }

    /// Global average pool of the top forward map.
    pub fn exit_features(&mut self, state: &PcState) -> Result<Var> {
        if state.cycle == 0 {
            return Err(Error::Usage("exit features need at least one completed cycle".into()));
        }
        Ok(self.graph.global_avg_pool(state.forward[state.num_layers()])?)
    }

    /// Logits of exit head `t` (1-based). With `dropout`, a train-mode
    /// dropout node precedes the head.
    pub fn classify(
        &mut self,
        features: Var,
        t: usize,
        dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Var> {
        if t == 0 || t > self.heads.len() {
            return Err(Error::Usage(format!("exit head {t} outside 1..={}", self.heads.len())));
        }
        let x = match dropout {
            Some((p, rng)) => self.graph.dropout(features, p, rng)?,
            None => features,
        };
        let (w, b) = self.heads[t - 1];
        Ok(self.graph.fully_connected(x, w, b)?)
    }

    /// Gradients of `loss` for every trainable parameter it reaches.
    pub fn param_grads(&self, loss: Var) -> Result<IndexMap<String, Tensor<T>>> {
        let mut grads = self.graph.backward(loss)?;
        let mut out = IndexMap::new();
        for (name, v) in &self.named {
            if let Some(g) = grads.take(*v) {
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}
