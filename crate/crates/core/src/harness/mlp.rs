//! Fully connected ReLU network and its straight-through QAT trainer.

use crate::autodiff::{NodeId, Rng, Tape, Tensor};
use crate::codec::{HardenedModel, HardenedTensor, TensorData};
use crate::diffq::{Model, PlainWeights, WeightSource};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::quant::{quantize_grouped, ste_qat_forward, ScaleParams};

use super::data::Dataset;

/// Layers `widths[0] -> widths[1] -> ...`, ReLU between layers, logits out.
/// Parameters alternate `fc{i}.weight` (in, out) and `fc{i}.bias` (out,).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Weights and biases drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("bad layer widths {widths:?}")));
        }
        let mut params = Vec::new();
        for pair in widths.windows(2) {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            let w = rng.sample_uniform(&[pair[0], pair[1]]).map(|u| bound * u);
            let b = rng.sample_uniform(&[pair[1]]).map(|u| bound * u);
            params.push(w);
            params.push(b);
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Output logits for `x` of shape (n, widths[0]).
    pub fn forward(&self, tape: &mut Tape, weights: &mut dyn WeightSource, x: NodeId) -> Result<NodeId> {
        let layers = self.widths.len() - 1;
        let mut h = x;
        for i in 0..layers {
            let w = weights.weight(tape, 2 * i)?;
            let b = weights.weight(tape, 2 * i + 1)?;
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if i + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Fraction of rows of `data` classified correctly with parameter
    /// values `params` (same layout as [`Model::params`]).
    pub fn accuracy_with(&self, params: &[Tensor], data: &Dataset) -> Result<f64> {
        if params.len() != self.params.len() || params.iter().zip(&self.params).any(|(a, b)| !a.same_shape(b)) {
            return Err(Error::shape("accuracy", "parameters do not match the network"));
        }
        let mut tape = Tape::new();
        let leaves = params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(data.features.clone());
        let out = self.forward(&mut tape, &mut PlainWeights { leaves }, x)?;
        let logits = tape.value(out);
        let classes = logits.shape()[1];
        let correct = logits
            .data()
            .chunks(classes)
            .zip(&data.labels)
            .filter(|(row, &label)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
                best == label
            })
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        self.accuracy_with(&self.params, data)
    }
}

impl Model for Mlp {
    type Batch = Dataset;

    fn param_names(&self) -> Vec<String> {
        (0..self.widths.len() - 1)
            .flat_map(|i| [format!("fc{i}.weight"), format!("fc{i}.bias")])
            .collect()
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape, weights: &mut dyn WeightSource, batch: &Dataset) -> Result<NodeId> {
        let x = tape.constant(batch.features.clone());
        let logits = self.forward(tape, weights, x)?;
        tape.softmax_cross_entropy(logits, &batch.labels)
    }
}

/// Weights quantized to `bits` in the forward pass, identity backward.
pub struct SteWeights<'a> {
    pub leaves: &'a [NodeId],
    pub quantize: &'a [bool],
    pub bits: u32,
}

impl WeightSource for SteWeights<'_> {
    fn weight(&mut self, tape: &mut Tape, param: usize) -> Result<NodeId> {
        let w = *self
            .leaves
            .get(param)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {param}")))?;
        if self.quantize[param] {
            ste_qat_forward(tape, w, self.bits)
        } else {
            Ok(w)
        }
    }
}

/// Fixed-bitwidth quantization-aware training with one scale per tensor.
#[derive(Clone, Debug)]
pub struct QatTrainer {
    pub bits: u32,
    quantize: Vec<bool>,
    steps: usize,
}

impl QatTrainer {
    /// Quantizes every parameter whose name is not in `exclude`.
    pub fn new<M: Model>(model: &M, bits: u32, exclude: &[String]) -> Result<Self> {
        if !(1..=32).contains(&bits) {
            return Err(Error::invalid(format!("QAT bitwidth {bits} outside 1..=32")));
        }
        let quantize = model.param_names().iter().map(|n| !exclude.contains(n)).collect();
        Ok(Self {
            bits,
            quantize,
            steps: 0,
        })
    }

    /// One forward/backward through quantized weights and one optimizer step.
    /// Returns the task loss.
    pub fn step<M: Model>(&mut self, model: &mut M, batch: &M::Batch, opt: &mut dyn Optimizer) -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = model.params().iter().map(|p| tape.variable(p.clone())).collect();
        let mut weights = SteWeights {
            leaves: &leaves,
            quantize: &self.quantize,
            bits: self.bits,
        };
        let loss = model.loss(&mut tape, &mut weights, batch)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { step: self.steps });
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor> = leaves.iter().map(|&id| tape.grad(id).clone()).collect();
        opt.step(model.params_mut(), &grads)?;
        self.steps += 1;
        Ok(value)
    }

    /// One group per quantized tensor at the training bitwidth, which is
    /// also the tensor's minimum, so no per-group codes are stored.
    pub fn harden<M: Model>(&self, model: &M) -> Result<HardenedModel> {
        let tensors = model
            .param_names()
            .into_iter()
            .zip(model.params())
            .zip(&self.quantize)
            .map(|((name, w), &q)| {
                let data = if q {
                    let scale = ScaleParams::of(w).to_f32_precision();
                    TensorData::Quantized {
                        b_min: self.bits as u8,
                        tensor: quantize_grouped(w, &[self.bits as u8], w.len(), scale)?,
                    }
                } else {
                    raw(w)
                };
                Ok(HardenedTensor { name, data })
            })
            .collect::<Result<_>>()?;
        Ok(HardenedModel { tensors })
    }
}

/// Stores `w` unquantized in fp32.
pub fn raw(w: &Tensor) -> TensorData {
    TensorData::Raw {
        shape: w.shape().to_vec(),
        values: w.data().iter().map(|&v| v as f32).collect(),
    }
}

/// All parameters stored as fp32.
pub fn harden_raw<M: Model>(model: &M) -> HardenedModel {
    HardenedModel {
        tensors: model
            .param_names()
            .into_iter()
            .zip(model.params())
            .map(|(name, w)| HardenedTensor { name, data: raw(w) })
            .collect(),
    }
}
