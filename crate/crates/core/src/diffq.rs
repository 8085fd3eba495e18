//! Pseudo quantization noise training with learnable per-group bitwidths.
//!
//! During training a quantized weight tensor `w` is replaced by
//! `w + range(w) · Δ(b_s)/2 · ε`, with `Δ(b) = 1/(2^b - 1)`, `b_s` the
//! bitwidth of the group holding the weight and `ε` drawn from `U[-1, 1]`
//! or `N(0, 1)`. The bitwidths come from logits through
//! `b = b_min + σ(l)·(b_max - b_min)`, and the objective adds `λ · M(b)`
//! where `M` is the model size in megabytes. At the end, [`BitAllocator::harden`]
//! rounds every `b_s` and applies the real uniform quantizer.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Rng, Tape, Tensor};
use crate::codec::{layer_true_bits, HardenedModel, HardenedTensor, TensorData, BITS_PER_MB};
use crate::error::{Error, Result};
use crate::optim::{Adam, Optimizer};
use crate::quant::{self, round_half_away, ScaleParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Uniform,
    #[default]
    Gaussian,
}

impl NoiseKind {
    /// Standard deviation of `ε`.
    pub fn std(self) -> f64 {
        match self {
            NoiseKind::Uniform => 1.0 / 3f64.sqrt(),
            NoiseKind::Gaussian => 1.0,
        }
    }

    pub fn sample(self, rng: &mut Rng, shape: &[usize]) -> Tensor {
        match self {
            NoiseKind::Uniform => rng.sample_uniform(shape),
            NoiseKind::Gaussian => rng.sample_gaussian(shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffqConfig {
    pub b_min: u32,
    pub b_max: u32,
    pub b_init: f64,
    pub group_size: usize,
    pub lambda: f64,
    pub noise: NoiseKind,
    /// Tensors whose raw fp32 size is below this many MB stay unquantized.
    pub skip_threshold_mb: f64,
    pub logit_lr: f64,
    /// Parameter names that are never quantized (e.g. biases).
    pub exclude: Vec<String>,
    /// Keep the logits at their initial value (fixed-bitwidth training).
    pub freeze_bits: bool,
}

impl Default for DiffqConfig {
    fn default() -> Self {
        Self {
            b_min: 2,
            b_max: 15,
            b_init: 8.0,
            group_size: 8,
            lambda: 0.0,
            noise: NoiseKind::Gaussian,
            skip_threshold_mb: 0.01,
            logit_lr: 1e-3,
            exclude: Vec::new(),
            freeze_bits: false,
        }
    }
}

impl DiffqConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi, init) = (self.b_min as f64, self.b_max as f64, self.b_init);
        if !(self.b_min >= 1 && lo < init && init < hi && self.b_max <= 32) {
            return Err(Error::Config(format!(
                "need 1 <= b_min < b_init < b_max <= 32, got ({}, {}, {})",
                self.b_min, self.b_init, self.b_max
            )));
        }
        if !(self.lambda >= 0.0) || self.group_size == 0 {
            return Err(Error::Config(format!(
                "need lambda >= 0 and group_size >= 1, got {} and {}",
                self.lambda, self.group_size
            )));
        }
        if !(self.skip_threshold_mb >= 0.0) || !(self.logit_lr >= 0.0) {
            return Err(Error::Config("skip_threshold_mb and logit_lr must be non-negative".into()));
        }
        Ok(())
    }

    fn bit_span(&self) -> f64 {
        (self.b_max - self.b_min) as f64
    }

    /// Raw fp32 size below the skip threshold.
    pub fn is_skipped(&self, numel: usize) -> bool {
        numel as f64 * 32.0 / BITS_PER_MB < self.skip_threshold_mb
    }
}

/// `b_min + σ(l)·(b_max - b_min)` on the tape.
pub fn bits_from_logits(tape: &mut Tape, logits: NodeId, cfg: &DiffqConfig) -> Result<NodeId> {
    let s = tape.sigmoid(logits);
    let scaled = tape.scale(s, cfg.bit_span());
    let base = tape.constant(Tensor::full(tape.value(logits).shape(), cfg.b_min as f64));
    tape.add(scaled, base)
}

/// Same mapping on plain values.
pub fn bit_values(logits: &Tensor, cfg: &DiffqConfig) -> Tensor {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let b = bits_from_logits(&mut tape, l, cfg).expect("shapes agree");
    tape.value(b).clone()
}

/// Logits that map to `b_init`.
pub fn init_logits(cfg: &DiffqConfig, num_groups: usize) -> Result<Tensor> {
    let (lo, hi) = (cfg.b_min as f64, cfg.b_max as f64);
    if !(lo < cfg.b_init && cfg.b_init < hi) {
        return Err(Error::invalid(format!(
            "b_init {} must lie strictly between {} and {}",
            cfg.b_init, cfg.b_min, cfg.b_max
        )));
    }
    if num_groups == 0 {
        return Err(Error::invalid("at least one group is required"));
    }
    let p = (cfg.b_init - lo) / (hi - lo);
    Ok(Tensor::full(&[num_groups], (p / (1.0 - p)).ln()))
}

/// Noise samples handed out during one forward pass, keyed by parameter
/// index. A parameter read twice in the same pass gets the same sample.
#[derive(Clone, Debug, Default)]
pub struct NoiseRegistry {
    samples: HashMap<usize, Tensor>,
    ranges: HashMap<usize, f64>,
    constant: Option<f64>,
}

impl NoiseRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Serves `value` everywhere instead of sampling.
    pub fn constant(value: f64) -> Self {
        Self {
            constant: Some(value),
            ..Self::default()
        }
    }

    /// Fixes the scale range used for `param` instead of reading it from
    /// the weights. Lets finite differences see the same detached range.
    pub fn pin_range(&mut self, param: usize, range: f64) {
        self.ranges.insert(param, range);
    }

    fn range_of(&self, param: usize, w: &Tensor) -> f64 {
        self.ranges.get(&param).copied().unwrap_or_else(|| ScaleParams::of(w).range())
    }

    pub fn insert(&mut self, param: usize, noise: Tensor) {
        self.samples.insert(param, noise);
    }

    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.samples.get(&param)
    }

    pub fn clear(&mut self) {
        self.samples.clear();
        self.ranges.clear();
    }

    pub fn sample(&mut self, param: usize, shape: &[usize], kind: NoiseKind, rng: &mut Rng) -> Result<Tensor> {
        if let Some(t) = self.samples.get(&param) {
            if t.shape() != shape {
                return Err(Error::shape(
                    "pqn_forward",
                    format!("cached noise {:?} for parameter {param} of shape {shape:?}", t.shape()),
                ));
            }
            return Ok(t.clone());
        }
        let t = match self.constant {
            Some(v) => Tensor::full(shape, v),
            None => kind.sample(rng, shape),
        };
        self.samples.insert(param, t.clone());
        Ok(t)
    }
}

/// Adds pseudo quantization noise to `w`. `bits` holds one (real-valued)
/// bitwidth per group of `group_size` consecutive weights.
///
/// The scale is read from the current weights and treated as a constant, so
/// `w` receives an identity gradient and `bits` a gradient through `Δ`.
#[allow(clippy::too_many_arguments)]
pub fn pqn_forward(
    tape: &mut Tape,
    w: NodeId,
    bits: NodeId,
    group_size: usize,
    param: usize,
    noise: NoiseKind,
    rng: &mut Rng,
    registry: &mut NoiseRegistry,
) -> Result<NodeId> {
    let shape = tape.value(w).shape().to_vec();
    let range = registry.range_of(param, tape.value(w));
    let eps = registry.sample(param, &shape, noise, rng)?;
    let delta = quant::delta_node(tape, bits)?;
    let delta = tape.repeat_groups(delta, group_size, &shape)?;
    let coef = tape.constant(eps.map(|e| 0.5 * range * e));
    let n = tape.mul(delta, coef)?;
    tape.add(w, n)
}

/// Model whose weights are read through a [`WeightSource`], so the same
/// forward code serves full precision, STE and noisy training.
pub trait Model {
    type Batch;

    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];
    /// Scalar training loss.
    fn loss(&self, tape: &mut Tape, weights: &mut dyn WeightSource, batch: &Self::Batch) -> Result<NodeId>;
}

pub trait WeightSource {
    /// Node holding the (possibly transformed) value of parameter `param`.
    fn weight(&mut self, tape: &mut Tape, param: usize) -> Result<NodeId>;
}

/// Returns the leaves unchanged.
pub struct PlainWeights {
    pub leaves: Vec<NodeId>,
}

impl WeightSource for PlainWeights {
    fn weight(&mut self, _tape: &mut Tape, param: usize) -> Result<NodeId> {
        self.leaves
            .get(param)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {param}")))
    }
}

#[derive(Clone, Debug)]
enum Slot {
    Skipped { numel: usize },
    Quantized { logits: Tensor, numel: usize },
}

/// Nodes created for one forward pass.
#[derive(Clone, Debug)]
pub struct PassNodes {
    pub logits: Vec<Option<NodeId>>,
    pub bits: Vec<Option<NodeId>>,
}

/// One set of bit logits per distinct parameter tensor, plus the size
/// accounting built on them.
#[derive(Clone, Debug)]
pub struct BitAllocator {
    cfg: DiffqConfig,
    names: Vec<String>,
    slots: Vec<Slot>,
}

impl BitAllocator {
    pub fn new(cfg: DiffqConfig, names: &[String], params: &[Tensor]) -> Result<Self> {
        cfg.validate()?;
        if names.len() != params.len() {
            return Err(Error::invalid("one name per parameter is required"));
        }
        let slots = names
            .iter()
            .zip(params)
            .map(|(name, p)| {
                let numel = p.len();
                if cfg.is_skipped(numel) || cfg.exclude.contains(name) {
                    Ok(Slot::Skipped { numel })
                } else {
                    Ok(Slot::Quantized {
                        logits: init_logits(&cfg, numel.div_ceil(cfg.group_size))?,
                        numel,
                    })
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            names: names.to_vec(),
            slots,
        })
    }

    pub fn config(&self) -> &DiffqConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.slots.len()
    }

    pub fn is_quantized(&self, param: usize) -> bool {
        matches!(self.slots.get(param), Some(Slot::Quantized { .. }))
    }

    pub fn logits(&self, param: usize) -> Option<&Tensor> {
        match self.slots.get(param) {
            Some(Slot::Quantized { logits, .. }) => Some(logits),
            _ => None,
        }
    }

    pub fn logits_mut(&mut self, param: usize) -> Option<&mut Tensor> {
        match self.slots.get_mut(param) {
            Some(Slot::Quantized { logits, .. }) => Some(logits),
            _ => None,
        }
    }

    /// Current real-valued bitwidths of parameter `param`.
    pub fn bits(&self, param: usize) -> Option<Tensor> {
        self.logits(param).map(|l| bit_values(l, &self.cfg))
    }

    /// Indices of quantized parameters, in order.
    pub fn quantized_params(&self) -> Vec<usize> {
        (0..self.slots.len()).filter(|&i| self.is_quantized(i)).collect()
    }

    /// Records the logits (trainable unless bits are frozen) and bitwidths
    /// of every quantized parameter.
    pub fn begin_pass(&self, tape: &mut Tape) -> Result<PassNodes> {
        let mut logits = Vec::with_capacity(self.slots.len());
        let mut bits = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            match slot {
                Slot::Quantized { logits: l, .. } => {
                    let node = tape.leaf(l.clone(), !self.cfg.freeze_bits);
                    bits.push(Some(bits_from_logits(tape, node, &self.cfg)?));
                    logits.push(Some(node));
                }
                Slot::Skipped { .. } => {
                    logits.push(None);
                    bits.push(None);
                }
            }
        }
        Ok(PassNodes { logits, bits })
    }

    /// Continuous model size `M(b)` in MB: `len_s · b_s` bits per group of
    /// a quantized tensor, 32 bits per weight of a skipped one.
    pub fn size_penalty(&self, tape: &mut Tape, pass: &PassNodes) -> Result<NodeId> {
        let mut skipped_bits = 0.0;
        let mut total: Option<NodeId> = None;
        for (i, slot) in self.slots.iter().enumerate() {
            match slot {
                Slot::Skipped { numel } => skipped_bits += *numel as f64 * 32.0,
                Slot::Quantized { numel, .. } => {
                    let bits = pass.bits[i].ok_or_else(|| Error::invalid(format!("no bits recorded for parameter {i}")))?;
                    let lens: Vec<f64> = (0..numel.div_ceil(self.cfg.group_size))
                        .map(|s| quant::group_len(*numel, self.cfg.group_size, s) as f64)
                        .collect();
                    let lens = tape.constant(Tensor::from_vec(lens));
                    let weighted = tape.mul(bits, lens)?;
                    let s = tape.sum(weighted);
                    total = Some(match total {
                        Some(t) => tape.add(t, s)?,
                        None => s,
                    });
                }
            }
        }
        let constant = tape.constant(Tensor::scalar(skipped_bits));
        let bits = match total {
            Some(t) => tape.add(t, constant)?,
            None => constant,
        };
        Ok(tape.scale(bits, 1.0 / BITS_PER_MB))
    }

    /// `M(b)` without a tape.
    pub fn size_mb(&self) -> f64 {
        let mut tape = Tape::new();
        let pass = self.begin_pass(&mut tape).expect("allocator state is consistent");
        let m = self.size_penalty(&mut tape, &pass).expect("allocator state is consistent");
        tape.value(m).item()
    }

    /// Rounds bitwidths to integers and quantizes every quantized
    /// parameter; the others are stored as fp32.
    pub fn harden(&self, params: &[Tensor]) -> Result<(HardenedModel, HardenReport)> {
        if params.len() != self.slots.len() {
            return Err(Error::invalid(format!(
                "{} parameters for {} allocator slots",
                params.len(),
                self.slots.len()
            )));
        }
        let mut tensors = Vec::with_capacity(params.len());
        for (i, (w, slot)) in params.iter().zip(&self.slots).enumerate() {
            let data = match slot {
                Slot::Skipped { .. } => TensorData::Raw {
                    shape: w.shape().to_vec(),
                    values: w.data().iter().map(|&v| v as f32).collect(),
                },
                Slot::Quantized { logits, numel } => {
                    if *numel != w.len() {
                        return Err(Error::shape("harden", format!("parameter {i} changed size")));
                    }
                    let bits: Vec<u8> = bit_values(logits, &self.cfg)
                        .data()
                        .iter()
                        .map(|&b| round_half_away(b) as u8)
                        .collect();
                    let scale = ScaleParams::of(w).to_f32_precision();
                    TensorData::Quantized {
                        b_min: self.cfg.b_min as u8,
                        tensor: quant::quantize_grouped(w, &bits, self.cfg.group_size, scale)?,
                    }
                }
            };
            tensors.push(HardenedTensor {
                name: self.names[i].clone(),
                data,
            });
        }
        let model = HardenedModel { tensors };
        let report = HardenReport::of(&model);
        Ok((model, report))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorBits {
    pub name: String,
    pub quantized: bool,
    pub numel: usize,
    /// Weights per bitwidth.
    pub bit_histogram: BTreeMap<u8, usize>,
    pub mean_bits: f64,
    pub true_bits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HardenReport {
    pub tensors: Vec<TensorBits>,
    /// Mean bits per weight, raw weights counted at 32.
    pub mean_bits: f64,
    pub true_size_mb: f64,
}

impl HardenReport {
    pub fn of(model: &HardenedModel) -> Self {
        let tensors = model
            .tensors
            .iter()
            .map(|t| {
                let mut hist = BTreeMap::new();
                let quantized = match &t.data {
                    TensorData::Raw { values, .. } => {
                        hist.insert(32, values.len());
                        false
                    }
                    TensorData::Quantized { tensor, b_min } => {
                        for s in 0..tensor.num_groups() {
                            *hist.entry(tensor.bits[s]).or_insert(0) += tensor.group_len(s);
                        }
                        debug_assert_eq!(
                            t.paper_bits(),
                            layer_true_bits(tensor.numel(), tensor.group_size, &tensor.bits, *b_min)
                        );
                        true
                    }
                };
                let numel = t.numel();
                let total: u64 = hist.iter().map(|(&b, &n)| b as u64 * n as u64).sum();
                TensorBits {
                    name: t.name.clone(),
                    quantized,
                    numel,
                    bit_histogram: hist,
                    mean_bits: total as f64 / numel as f64,
                    true_bits: t.paper_bits(),
                }
            })
            .collect();
        Self {
            tensors,
            mean_bits: model.mean_bits(),
            true_size_mb: model.true_size_mb(),
        }
    }
}

/// Noisy weights for one training pass.
pub struct NoisyWeights<'a> {
    pub leaves: &'a [NodeId],
    pub pass: &'a PassNodes,
    pub allocator: &'a BitAllocator,
    pub rng: &'a mut Rng,
    pub registry: &'a mut NoiseRegistry,
    touched: HashSet<usize>,
}

impl<'a> NoisyWeights<'a> {
    pub fn new(
        leaves: &'a [NodeId],
        pass: &'a PassNodes,
        allocator: &'a BitAllocator,
        rng: &'a mut Rng,
        registry: &'a mut NoiseRegistry,
    ) -> Self {
        Self {
            leaves,
            pass,
            allocator,
            rng,
            registry,
            touched: HashSet::new(),
        }
    }

    /// Parameters read during this pass.
    pub fn touched(&self) -> &HashSet<usize> {
        &self.touched
    }
}

impl WeightSource for NoisyWeights<'_> {
    fn weight(&mut self, tape: &mut Tape, param: usize) -> Result<NodeId> {
        let w = *self
            .leaves
            .get(param)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {param}")))?;
        self.touched.insert(param);
        match self.pass.bits.get(param).copied().flatten() {
            Some(bits) => pqn_forward(
                tape,
                w,
                bits,
                self.allocator.cfg.group_size,
                param,
                self.allocator.cfg.noise,
                self.rng,
                self.registry,
            ),
            None => Ok(w),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub task_loss: f64,
    /// `λ · M(b)`.
    pub penalty: f64,
    /// `M(b)` in MB before the update.
    pub size_mb: f64,
}

/// Training state for one run: bit allocator, the separate Adam optimizer
/// for the logits, and the noise source.
#[derive(Clone, Debug)]
pub struct DiffqTrainer {
    pub allocator: BitAllocator,
    logit_opt: Adam,
    rng: Rng,
    constant_noise: Option<f64>,
    steps: usize,
}

impl DiffqTrainer {
    pub fn new<M: Model>(cfg: DiffqConfig, model: &M, seed: u64) -> Result<Self> {
        let allocator = BitAllocator::new(cfg, &model.param_names(), model.params())?;
        let logit_opt = Adam::with_betas(allocator.cfg.logit_lr, 0.9, 0.999, 1e-8);
        Ok(Self {
            allocator,
            logit_opt,
            rng: Rng::new(seed),
            constant_noise: None,
            steps: 0,
        })
    }

    /// Replaces sampled noise by a constant `ε` (0 disables noise).
    pub fn with_constant_noise(mut self, value: f64) -> Self {
        self.constant_noise = Some(value);
        self
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One forward/backward of `L + λ·M(b)` with a fresh noise registry,
    /// then one step of each optimizer.
    pub fn step<M: Model>(&mut self, model: &mut M, batch: &M::Batch, weight_opt: &mut dyn Optimizer) -> Result<StepStats> {
        let step = self.steps;
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = model.params().iter().map(|p| tape.variable(p.clone())).collect();
        let pass = self.allocator.begin_pass(&mut tape)?;
        let mut registry = match self.constant_noise {
            Some(v) => NoiseRegistry::constant(v),
            None => NoiseRegistry::new(),
        };
        let mut weights = NoisyWeights::new(&leaves, &pass, &self.allocator, &mut self.rng, &mut registry);
        let loss = model.loss(&mut tape, &mut weights, batch)?;
        let touched = weights.touched().clone();
        let size = self.allocator.size_penalty(&mut tape, &pass)?;
        let penalty = tape.scale(size, self.allocator.cfg.lambda);
        let total = tape.add(loss, penalty)?;

        let stats = StepStats {
            task_loss: tape.value(loss).item(),
            penalty: tape.value(penalty).item(),
            size_mb: tape.value(size).item(),
        };
        if !tape.value(total).item().is_finite() {
            return Err(Error::NonFinite { step });
        }
        tape.backward(total)?;

        let grads: Vec<Tensor> = leaves.iter().map(|&id| tape.grad(id).clone()).collect();
        weight_opt.step(model.params_mut(), &grads)?;

        if !self.allocator.cfg.freeze_bits {
            let quantized = self.allocator.quantized_params();
            let logit_grads: Vec<Tensor> = quantized
                .iter()
                .map(|&i| {
                    let g = tape.grad(pass.logits[i].expect("quantized parameter has logits"));
                    if touched.contains(&i) {
                        g.clone()
                    } else {
                        Tensor::zeros(g.shape())
                    }
                })
                .collect();
            let mut logits: Vec<Tensor> = quantized
                .iter()
                .map(|&i| self.allocator.logits(i).expect("quantized").clone())
                .collect();
            self.logit_opt.step(&mut logits, &logit_grads)?;
            for (&i, l) in quantized.iter().zip(logits) {
                *self.allocator.logits_mut(i).expect("quantized") = l;
            }
        }
        self.steps += 1;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Sgd;

    fn cfg() -> DiffqConfig {
        DiffqConfig {
            skip_threshold_mb: 0.0,
            ..DiffqConfig::default()
        }
    }

    #[test]
    fn bits_from_zero_logit() {
        let b = bit_values(&Tensor::scalar(0.0), &cfg());
        assert_eq!(b.item(), 8.5);
        let hi = bit_values(&Tensor::scalar(40.0), &cfg()).item();
        let lo = bit_values(&Tensor::scalar(-40.0), &cfg()).item();
        assert!(hi <= 15.0 && hi > 14.999);
        assert!((2.0..2.001).contains(&lo));
    }

    #[test]
    fn init_logits_defaults() {
        let l = init_logits(&cfg(), 3).unwrap();
        for &v in l.data() {
            assert!((v - (6.0f64 / 7.0).ln()).abs() < 1e-15);
            assert!((v + 0.154151).abs() < 1e-6);
        }
        assert!((bit_values(&l, &cfg()).item() - 8.0).abs() < 1e-12);

        let mid = DiffqConfig { b_init: 8.5, ..cfg() };
        assert_eq!(init_logits(&mid, 1).unwrap().item(), 0.0);
        let top = DiffqConfig { b_init: 15.0, ..cfg() };
        assert!(init_logits(&top, 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(DiffqConfig { b_min: 0, ..cfg() }.validate().is_err());
        assert!(DiffqConfig { b_max: 33, ..cfg() }.validate().is_err());
        assert!(DiffqConfig { lambda: -1.0, ..cfg() }.validate().is_err());
        assert!(DiffqConfig { group_size: 0, ..cfg() }.validate().is_err());
        let unknown = serde_json::from_str::<DiffqConfig>(r#"{"b_min": 2, "bogus": 1}"#);
        assert!(unknown.is_err());
    }

    #[test]
    fn pqn_forced_noise_example() {
        let mut tape = Tape::new();
        // a [0, 1] range with w = 0.5 in the middle
        let w = tape.variable(Tensor::from_vec(vec![0.0, 0.5, 1.0]));
        let bits = tape.constant(Tensor::scalar(4.0));
        let mut reg = NoiseRegistry::constant(1.0);
        let out = pqn_forward(&mut tape, w, bits, 3, 0, NoiseKind::Uniform, &mut Rng::new(0), &mut reg).unwrap();
        assert!((tape.value(out).data()[1] - (0.5 + 1.0 / 30.0)).abs() < 1e-15);
    }

    #[test]
    fn pqn_noise_vanishes_at_32_bits() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let w = tape.variable(Tensor::from_vec(vals.clone()));
        let range = 2.0;
        let bits = tape.constant(Tensor::full(&[8], 32.0));
        let mut reg = NoiseRegistry::new();
        let out = pqn_forward(&mut tape, w, bits, 8, 0, NoiseKind::Uniform, &mut Rng::new(1), &mut reg).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&vals) {
            assert!((a - b).abs() <= 2f64.powi(-31) * range);
        }
    }

    #[test]
    fn registry_serves_one_sample_per_param() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::from_vec(vec![0.1, 0.7, -0.3, 0.2]));
        let bits = tape.constant(Tensor::full(&[2], 3.0));
        let mut rng = Rng::new(5);
        let mut reg = NoiseRegistry::new();
        let a = pqn_forward(&mut tape, w, bits, 2, 7, NoiseKind::Gaussian, &mut rng, &mut reg).unwrap();
        let b = pqn_forward(&mut tape, w, bits, 2, 7, NoiseKind::Gaussian, &mut rng, &mut reg).unwrap();
        let bits_of = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits_of(tape.value(a)), bits_of(tape.value(b)));
        let c = pqn_forward(&mut tape, w, bits, 2, 8, NoiseKind::Gaussian, &mut rng, &mut reg).unwrap();
        assert_ne!(tape.value(a), tape.value(c));
    }

    #[test]
    fn size_penalty_examples() {
        let c = DiffqConfig { b_init: 8.0, ..cfg() };
        let alloc = BitAllocator::new(c.clone(), &["w".into()], &[Tensor::zeros(&[8])]).unwrap();
        assert!((alloc.size_mb() - 64.0 / BITS_PER_MB).abs() < 1e-18);

        let empty = BitAllocator::new(c.clone(), &[], &[]).unwrap();
        assert_eq!(empty.size_mb(), 0.0);

        let big = BitAllocator::new(
            DiffqConfig { b_min: 2, b_max: 6, b_init: 4.0, ..cfg() },
            &["w".into()],
            &[Tensor::zeros(&[1_000_000])],
        )
        .unwrap();
        assert!((big.size_mb() - 0.476837158203125).abs() < 1e-12);
    }

    #[test]
    fn size_gradient_is_group_length() {
        let alloc = BitAllocator::new(cfg(), &["w".into()], &[Tensor::zeros(&[20])]).unwrap();
        let mut tape = Tape::new();
        let pass = alloc.begin_pass(&mut tape).unwrap();
        let m = alloc.size_penalty(&mut tape, &pass).unwrap();
        tape.backward(m).unwrap();
        let g = tape.grad(pass.bits[0].unwrap());
        assert_eq!(g.data(), &[8.0 / BITS_PER_MB, 8.0 / BITS_PER_MB, 4.0 / BITS_PER_MB]);
    }

    #[test]
    fn skip_rule_and_exclusions() {
        let c = DiffqConfig::default();
        // 2621 weights · 32 bits is just under 0.01 MB
        assert!(c.is_skipped(2621));
        assert!(!c.is_skipped(2622));
        let names = vec!["small".to_string(), "big".to_string(), "bias".to_string()];
        let params = vec![Tensor::zeros(&[100]), Tensor::zeros(&[4000]), Tensor::zeros(&[4000])];
        let alloc = BitAllocator::new(DiffqConfig { exclude: vec!["bias".into()], ..c }, &names, &params).unwrap();
        assert_eq!(alloc.quantized_params(), vec![1]);
        assert!(alloc.logits(0).is_none());
        let expected = (100.0 * 32.0 + 4000.0 * 8.0 + 4000.0 * 32.0) / BITS_PER_MB;
        assert!((alloc.size_mb() - expected).abs() < 1e-15);
    }

    #[test]
    fn harden_rounds_and_reports() {
        let names = vec!["w".to_string(), "b".to_string()];
        let w = Tensor::from_vec((0..16).map(|i| i as f64 / 15.0 - 0.5).collect());
        let params = vec![w.clone(), Tensor::from_vec(vec![0.25])];
        let c = DiffqConfig { skip_threshold_mb: 1e-5, ..cfg() };
        let mut alloc = BitAllocator::new(c, &names, &params).unwrap();
        // bits 3.4 → 3 and 4.6 → 5
        let to_logit = |b: f64| {
            let p = (b - 2.0) / 13.0;
            (p / (1.0 - p)).ln()
        };
        *alloc.logits_mut(0).unwrap() = Tensor::from_vec(vec![to_logit(3.4), to_logit(4.6)]);
        let (model, report) = alloc.harden(&params).unwrap();
        match &model.tensors[0].data {
            TensorData::Quantized { b_min, tensor } => {
                assert_eq!(*b_min, 2);
                assert_eq!(tensor.bits, vec![3, 5]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(model.tensors[1].data, TensorData::Raw { .. }));
        assert_eq!(report.tensors[0].true_bits, 140);
        assert_eq!(report.tensors[1].true_bits, 32);
        assert!((report.true_size_mb - 172.0 / BITS_PER_MB).abs() < 1e-18);
        assert!((report.mean_bits - (64.0 + 32.0) / 17.0).abs() < 1e-12);
        // endpoints of the range are exact grid points
        let v = model.tensors[0].values();
        assert!((v.data()[0] + 0.5).abs() < 1e-7);
        assert!((v.data()[15] - 0.5).abs() < 1e-7);
    }

    /// y = sum(w · x) on a fixed input, squared error against a target.
    struct Linear {
        params: Vec<Tensor>,
    }

    impl Model for Linear {
        type Batch = ();
        fn param_names(&self) -> Vec<String> {
            vec!["w".into()]
        }
        fn params(&self) -> &[Tensor] {
            &self.params
        }
        fn params_mut(&mut self) -> &mut [Tensor] {
            &mut self.params
        }
        fn loss(&self, tape: &mut Tape, weights: &mut dyn WeightSource, _: &()) -> Result<NodeId> {
            let w = weights.weight(tape, 0)?;
            let t = tape.constant(Tensor::full(&[16], 0.3));
            tape.mse(w, t)
        }
    }

    fn linear() -> Linear {
        Linear {
            params: vec![Tensor::from_vec((0..16).map(|i| i as f64 / 16.0).collect())],
        }
    }

    #[test]
    fn no_penalty_no_noise_leaves_logits() {
        let mut m = linear();
        let mut tr = DiffqTrainer::new(cfg(), &m, 0).unwrap().with_constant_noise(0.0);
        let before = tr.allocator.logits(0).unwrap().clone();
        tr.step(&mut m, &(), &mut Sgd::new(0.1, 0.0, 0.0)).unwrap();
        assert_eq!(tr.allocator.logits(0).unwrap(), &before);
    }

    #[test]
    fn penalty_moves_logits_by_adam_step() {
        let mut m = linear();
        let c = DiffqConfig { lambda: 1000.0, ..cfg() };
        let mut tr = DiffqTrainer::new(c.clone(), &m, 0).unwrap().with_constant_noise(0.0);
        let before = tr.allocator.logits(0).unwrap().clone();
        let bits_before = tr.allocator.bits(0).unwrap();
        tr.step(&mut m, &(), &mut Sgd::new(0.1, 0.0, 0.0)).unwrap();
        let after = tr.allocator.logits(0).unwrap();
        let bits_after = tr.allocator.bits(0).unwrap();
        for (s, (&l0, &l1)) in before.data().iter().zip(after.data()).enumerate() {
            let sig = 1.0 / (1.0 + (-l0).exp());
            let g = c.lambda * 8.0 / BITS_PER_MB * sig * (1.0 - sig) * 13.0;
            // first Adam step: lr · g / (|g| + eps)
            let expected = -c.logit_lr * g / (g.abs() + 1e-8);
            assert!((l1 - l0 - expected).abs() < 1e-15, "group {s}");
            assert!(bits_after.data()[s] < bits_before.data()[s]);
        }
    }

    #[test]
    fn frozen_bits_never_change() {
        let mut m = linear();
        let c = DiffqConfig { lambda: 1000.0, freeze_bits: true, ..cfg() };
        let mut tr = DiffqTrainer::new(c, &m, 0).unwrap();
        let before = tr.allocator.logits(0).unwrap().clone();
        for _ in 0..5 {
            tr.step(&mut m, &(), &mut Sgd::new(0.1, 0.0, 0.0)).unwrap();
        }
        assert_eq!(tr.allocator.logits(0).unwrap(), &before);
    }

    #[test]
    fn nan_loss_reports_step() {
        let mut m = linear();
        m.params[0].data_mut()[3] = f64::NAN;
        let mut tr = DiffqTrainer::new(cfg(), &m, 0).unwrap();
        match tr.step(&mut m, &(), &mut Sgd::new(0.1, 0.0, 0.0)) {
            Err(Error::NonFinite { step: 0 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unread_parameters_get_no_logit_update() {
        struct Ignores(Vec<Tensor>);
        impl Model for Ignores {
            type Batch = ();
            fn param_names(&self) -> Vec<String> {
                vec!["used".into(), "dropped".into()]
            }
            fn params(&self) -> &[Tensor] {
                &self.0
            }
            fn params_mut(&mut self) -> &mut [Tensor] {
                &mut self.0
            }
            fn loss(&self, tape: &mut Tape, weights: &mut dyn WeightSource, _: &()) -> Result<NodeId> {
                let w = weights.weight(tape, 0)?;
                Ok(tape.sum(w))
            }
        }
        let mut m = Ignores(vec![Tensor::from_vec(vec![0.1, 0.5]), Tensor::from_vec(vec![0.2, 0.9])]);
        let c = DiffqConfig { lambda: 1000.0, ..cfg() };
        let mut tr = DiffqTrainer::new(c, &m, 0).unwrap();
        let dropped = tr.allocator.logits(1).unwrap().clone();
        tr.step(&mut m, &(), &mut Sgd::new(0.1, 0.0, 0.0)).unwrap();
        assert_eq!(tr.allocator.logits(1).unwrap(), &dropped);
        assert_ne!(tr.allocator.logits(0).unwrap(), &init_logits(&cfg(), 1).unwrap());
    }

    #[test]
    fn bits_stay_inside_bounds_under_strong_penalty() {
        let mut m = linear();
        // saturating the sigmoid in f64 would round b onto the bound itself
        let c = DiffqConfig { lambda: 1e9, logit_lr: 0.05, ..cfg() };
        let mut tr = DiffqTrainer::new(c, &m, 3).unwrap();
        for _ in 0..200 {
            tr.step(&mut m, &(), &mut Sgd::new(0.01, 0.0, 0.0)).unwrap();
            for &b in tr.allocator.bits(0).unwrap().data() {
                assert!(b > 2.0 && b < 15.0, "{b}");
            }
        }
    }
}
