//! Toy-task training with full precision, QAT or noise-based quantization,
//! penalty sweeps, and a finite-difference check of the full gradient.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Rng, Tape, Tensor};
use crate::codec::{self, HardenedModel, TensorData};
use crate::diffq::{DiffqConfig, DiffqTrainer, HardenReport, Model, NoiseRegistry, NoisyWeights, PlainWeights, TensorBits};
use crate::error::{Error, Result};
use crate::optim::{step_decay, Adam, Optimizer, Sgd};

use super::data::{Dataset, DatasetSpec};
use super::lms::csv_err;
use super::mlp::{harden_raw, Mlp, QatTrainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTask {
    pub dataset: DatasetSpec,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            hidden: vec![16],
            epochs: 200,
            batch_size: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Weight optimizer. The learning rate is multiplied by `decay_factor`
/// every `decay_every` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            decay_factor: 1.0,
            decay_every: 1000,
        }
    }
}

impl OptimizerConfig {
    pub fn build(&self) -> Box<dyn Optimizer> {
        match self.kind {
            OptimizerKind::Sgd => Box::new(Sgd::new(self.lr, self.momentum, self.weight_decay)),
            OptimizerKind::Adam => Box::new(Adam::new(self.lr)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Fp32,
    Qat { bits: u32, exclude: Vec<String> },
    Diffq(DiffqConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Fp32 => "fp32",
            Method::Qat { .. } => "qat",
            Method::Diffq(_) => "diffq",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean task loss over the epoch's batches.
    pub loss: f64,
    /// Mean `λ·M(b)` over the epoch (0 unless noise training).
    pub penalty: f64,
    /// Continuous size `M(b)` in MB at the end of the epoch.
    pub size_mb: f64,
    /// Test accuracy of the unquantized weights.
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub method: String,
    /// Test accuracy of the hardened model.
    pub accuracy: f64,
    /// Test accuracy of the final unquantized weights.
    pub float_accuracy: f64,
    pub train_accuracy: f64,
    /// `M̃` of the hardened model in MB.
    pub true_size_mb: f64,
    pub mean_bits: f64,
    pub packed_bytes: usize,
    pub tensors: Vec<TensorBits>,
    pub curves: Vec<EpochRecord>,
}

impl RunReport {
    /// Accuracy lost by hardening.
    pub fn hardening_drop(&self) -> f64 {
        self.float_accuracy - self.accuracy
    }
}

pub struct TrainedRun {
    pub report: RunReport,
    pub model: HardenedModel,
    pub packed: Vec<u8>,
}

pub fn write_curves_csv<W: Write>(curves: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss", "penalty", "size_mb", "test_acc"]).map_err(csv_err)?;
    for r in curves {
        w.write_record([
            r.epoch.to_string(),
            r.loss.to_string(),
            r.penalty.to_string(),
            r.size_mb.to_string(),
            r.test_acc.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn fp32_size_mb(model: &Mlp) -> f64 {
    model.params().iter().map(|p| p.len() as f64 * 32.0).sum::<f64>() / codec::BITS_PER_MB
}

enum Trainer {
    Fp32,
    Qat(QatTrainer),
    Diffq(Box<DiffqTrainer>),
}

/// Trains an MLP on `task` with `method` and hardens it. Everything random
/// (data, init, batch order, noise) derives from `task.seed`.
pub fn train_toy(task: &ToyTask, method: &Method, opt_cfg: &OptimizerConfig) -> Result<TrainedRun> {
    if task.batch_size == 0 || task.epochs == 0 {
        return Err(Error::invalid("epochs and batch_size must be positive"));
    }
    let (train, test) = task.dataset.load(task.seed)?;
    let classes = train.num_classes().max(test.num_classes()).max(2);
    let mut widths = vec![train.dim()];
    widths.extend_from_slice(&task.hidden);
    widths.push(classes);

    let mut rng = Rng::new(task.seed ^ 0x5eed_0f7a_5c00);
    let mut model = Mlp::new(&widths, &mut rng)?;
    let mut trainer = match method {
        Method::Fp32 => Trainer::Fp32,
        Method::Qat { bits, exclude } => Trainer::Qat(QatTrainer::new(&model, *bits, exclude)?),
        Method::Diffq(cfg) => Trainer::Diffq(Box::new(DiffqTrainer::new(cfg.clone(), &model, rng.next_u64())?)),
    };
    let mut opt = opt_cfg.build();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curves = Vec::with_capacity(task.epochs);
    for epoch in 0..task.epochs {
        opt.set_learning_rate(step_decay(opt_cfg.lr, opt_cfg.decay_factor, opt_cfg.decay_every, epoch));
        rng.shuffle(&mut order);
        let (mut loss_sum, mut penalty_sum, mut batches) = (0.0, 0.0, 0usize);
        for rows in order.chunks(task.batch_size) {
            let batch = train.select(rows);
            let step = match &mut trainer {
                Trainer::Fp32 => fp32_step(&mut model, &batch, opt.as_mut()).map(|l| (l, 0.0)),
                Trainer::Qat(q) => q.step(&mut model, &batch, opt.as_mut()).map(|l| (l, 0.0)),
                Trainer::Diffq(d) => d.step(&mut model, &batch, opt.as_mut()).map(|s| (s.task_loss, s.penalty)),
            };
            let (loss, penalty) = match step {
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss;
            penalty_sum += penalty;
            batches += 1;
        }
        let size_mb = match &trainer {
            Trainer::Diffq(d) => d.allocator.size_mb(),
            _ => fp32_size_mb(&model),
        };
        curves.push(EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            penalty: penalty_sum / batches as f64,
            size_mb,
            test_acc: model.accuracy(&test)?,
        });
    }

    let hardened = match &trainer {
        Trainer::Fp32 => harden_raw(&model),
        Trainer::Qat(q) => q.harden(&model)?,
        Trainer::Diffq(d) => d.allocator.harden(model.params())?.0,
    };
    let packed = codec::pack(&hardened)?;
    let values: Vec<Tensor> = hardened.tensors.iter().map(|t| t.values()).collect();
    let hard_report = HardenReport::of(&hardened);
    let report = RunReport {
        method: method.name().to_string(),
        accuracy: model.accuracy_with(&values, &test)?,
        float_accuracy: model.accuracy(&test)?,
        train_accuracy: model.accuracy(&train)?,
        true_size_mb: hard_report.true_size_mb,
        mean_bits: hard_report.mean_bits,
        packed_bytes: packed.len(),
        tensors: hard_report.tensors,
        curves,
    };
    Ok(TrainedRun {
        report,
        model: hardened,
        packed,
    })
}

fn fp32_step(model: &mut Mlp, batch: &Dataset, opt: &mut dyn Optimizer) -> Result<f64> {
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = model.params().iter().map(|p| tape.variable(p.clone())).collect();
    let loss = model.loss(&mut tape, &mut PlainWeights { leaves: leaves.clone() }, batch)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor> = leaves.iter().map(|&id| tape.grad(id).clone()).collect();
    opt.step(model.params_mut(), &grads)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub g: usize,
    pub acc: f64,
    pub size_mb: f64,
    pub mean_bits: f64,
    /// Per-group code bits summed over layers, `Σ maxC·ceil(d/g)`.
    pub overhead_bits: u64,
}

/// One noise-training run per `(λ, g)` cell, all with the task seed.
/// Cells run in parallel; rows come back ordered by `(λ, g)` as given.
pub fn sweep_lambda(
    task: &ToyTask,
    base: &DiffqConfig,
    opt_cfg: &OptimizerConfig,
    lambdas: &[f64],
    g_values: &[usize],
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() || g_values.is_empty() {
        return Err(Error::invalid("sweep needs at least one lambda and one group size"));
    }
    let cells: Vec<(f64, usize)> = lambdas
        .iter()
        .flat_map(|&l| g_values.iter().map(move |&g| (l, g)))
        .collect();
    cells
        .par_iter()
        .map(|&(lambda, g)| {
            let cfg = DiffqConfig {
                lambda,
                group_size: g,
                ..base.clone()
            };
            let run = train_toy(task, &Method::Diffq(cfg), opt_cfg)?;
            Ok(SweepRow {
                lambda,
                g,
                acc: run.report.accuracy,
                size_mb: run.report.true_size_mb,
                mean_bits: run.report.mean_bits,
                overhead_bits: overhead_bits(&run.model),
            })
        })
        .collect()
}

fn overhead_bits(model: &HardenedModel) -> u64 {
    model
        .tensors
        .iter()
        .map(|t| match &t.data {
            TensorData::Quantized { b_min, tensor } => {
                codec::max_code_bits(&tensor.bits, *b_min) as u64 * tensor.num_groups() as u64
            }
            TensorData::Raw { .. } => 0,
        })
        .sum()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "g", "acc", "size_mb", "mean_bits"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.lambda.to_string(),
            r.g.to_string(),
            r.acc.to_string(),
            r.size_mb.to_string(),
            r.mean_bits.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Where the largest error occurred, e.g. `fc0.weight[3]`.
    pub worst: String,
}

/// Relative error with an absolute floor, so coordinates whose gradient is
/// essentially zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const GRADCHECK_FLOOR: f64 = 1e-4;

/// Compares reverse-mode gradients of `L + λ·M(b)` for a noisy
/// `widths` MLP, with respect to every weight and every bit logit, against
/// central differences with step `h`. Noise samples and scale ranges are
/// held fixed so both sides differentiate the same function.
pub fn gradcheck_mlp(widths: &[usize], cfg: &DiffqConfig, batch: usize, h: f64, seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let model = Mlp::new(widths, &mut rng)?;
    let x = rng.sample_gaussian(&[batch, widths[0]]);
    let labels = (0..batch).map(|_| rng.below(*widths.last().expect("checked by Mlp::new"))).collect();
    let data = Dataset::new(x, labels)?;
    let mut alloc = DiffqTrainer::new(cfg.clone(), &model, 0)?.allocator;
    // Spread the logits so groups differ.
    for i in alloc.quantized_params() {
        let l = alloc.logits_mut(i).expect("quantized");
        let jitter = rng.sample_uniform(l.shape());
        for (v, j) in l.data_mut().iter_mut().zip(jitter.data()) {
            *v += j;
        }
    }
    let mut registry = NoiseRegistry::new();
    for i in alloc.quantized_params() {
        let p = &model.params()[i];
        registry.insert(i, cfg.noise.sample(&mut rng, p.shape()));
        registry.pin_range(i, crate::quant::ScaleParams::of(p).range());
    }

    let eval = |params: &[Tensor], alloc: &crate::diffq::BitAllocator, grads: bool| -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = params.iter().map(|p| tape.variable(p.clone())).collect();
        let pass = alloc.begin_pass(&mut tape)?;
        let mut reg = registry.clone();
        let mut unused = Rng::new(0);
        let mut weights = NoisyWeights::new(&leaves, &pass, alloc, &mut unused, &mut reg);
        let loss = model.loss(&mut tape, &mut weights, &data)?;
        let size = alloc.size_penalty(&mut tape, &pass)?;
        let pen = tape.scale(size, cfg.lambda);
        let total = tape.add(loss, pen)?;
        let value = tape.value(total).item();
        if !grads {
            return Ok((value, Vec::new(), Vec::new()));
        }
        tape.backward(total)?;
        let wg = leaves.iter().map(|&l| tape.grad(l).clone()).collect();
        let lg = pass.logits.iter().flatten().map(|&l| tape.grad(l).clone()).collect();
        Ok((value, wg, lg))
    };

    let names = model.param_names();
    let base: Vec<Tensor> = model.params().to_vec();
    let (_, weight_grads, logit_grads) = eval(&base, &alloc, true)?;
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    let mut record = |err: f64, label: String| {
        checked += 1;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, label);
        }
    };

    for (pi, g) in weight_grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = base.clone();
            plus[pi].data_mut()[j] += h;
            let mut minus = base.clone();
            minus[pi].data_mut()[j] -= h;
            let fd = (eval(&plus, &alloc, false)?.0 - eval(&minus, &alloc, false)?.0) / (2.0 * h);
            record(relative_error(g.data()[j], fd, GRADCHECK_FLOOR), format!("{}[{j}]", names[pi]));
        }
    }
    for (k, &pi) in alloc.quantized_params().iter().enumerate() {
        for j in 0..logit_grads[k].len() {
            let mut plus = alloc.clone();
            plus.logits_mut(pi).expect("quantized").data_mut()[j] += h;
            let mut minus = alloc.clone();
            minus.logits_mut(pi).expect("quantized").data_mut()[j] -= h;
            let fd = (eval(&base, &plus, false)?.0 - eval(&base, &minus, false)?.0) / (2.0 * h);
            record(
                relative_error(logit_grads[k].data()[j], fd, GRADCHECK_FLOOR),
                format!("{}.logits[{j}]", names[pi]),
            );
        }
    }
    Ok(GradcheckReport {
        seed,
        checked,
        max_rel_error: worst.0,
        worst: worst.1,
    })
}
