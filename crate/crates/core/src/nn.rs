//! Small classifiers (MLPs, plain CNNs, residual CNNs), seeded initialisation
//! and the mini-batch training loop with early stopping.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{
    linear, AdamW, Linear, Optimizer, ParamsAdamW, VarBuilder, VarMap, SGD,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{shuffle, LabeledDataset};
use crate::error::{invalid, Error, Result};
use crate::ops::Conv;
use crate::seed;

/// Anything that maps a batch of inputs to `K` logits.
pub trait Classifier {
    fn logits(&self, x: &Tensor) -> candle_core::Result<Tensor>;
    fn num_classes(&self) -> usize;
    fn dtype(&self) -> DType;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    /// Fully connected network over flattened inputs.
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
    /// Conv-ReLU-MaxPool stages followed by a linear head.
    ConvNet { widths: Vec<usize>, kernel: usize },
    /// Stem conv, residual blocks with average-pool downsampling, global pooling.
    ResNet { width: usize, blocks: usize },
}

impl ArchSpec {
    pub fn name(&self) -> String {
        match self {
            ArchSpec::Mlp { hidden, .. } => format!("mlp{hidden:?}"),
            ArchSpec::ConvNet { widths, kernel } => format!("conv{widths:?}k{kernel}"),
            ArchSpec::ResNet { width, blocks } => format!("res{width}x{blocks}"),
        }
    }
}

enum Net {
    Mlp {
        layers: Vec<Linear>,
        activation: Activation,
    },
    Conv {
        convs: Vec<Conv>,
        head: Linear,
    },
    Res {
        stem: Conv,
        blocks: Vec<(Conv, Conv)>,
        head: Linear,
    },
}

/// A classifier with its own parameter store.
pub struct Model {
    spec: ArchSpec,
    input_shape: Vec<usize>,
    num_classes: usize,
    dtype: DType,
    varmap: VarMap,
    net: Net,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .field("input_shape", &self.input_shape)
            .field("num_classes", &self.num_classes)
            .finish()
    }
}

/// Re-initialises every variable from a seeded stream, in sorted name order,
/// with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn seeded_init(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let fan_ins: HashMap<String, usize> = data
        .iter()
        .filter(|(_, v)| v.dims().len() >= 2)
        .map(|(k, v)| (k.clone(), v.dims()[1..].iter().product()))
        .collect();
    let mut rng = seed::rng(seed);
    for name in names {
        let var = &data[name];
        let fan_in = if var.dims().len() >= 2 {
            fan_ins[name]
        } else {
            let weight = name.trim_end_matches("bias").to_string() + "weight";
            fan_ins.get(&weight).copied().unwrap_or(var.elem_count())
        };
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let values: Vec<f64> = (0..var.elem_count())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let t = Tensor::from_vec(values, var.dims(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Copies of every variable, keyed by name.
pub fn snapshot(varmap: &VarMap) -> Result<HashMap<String, Tensor>> {
    let data = varmap.data().lock().expect("varmap lock");
    data.iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
        .collect()
}

pub fn restore(varmap: &VarMap, snap: &HashMap<String, Tensor>) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock");
    for (k, v) in data.iter() {
        if let Some(t) = snap.get(k) {
            v.set(t)?;
        }
    }
    Ok(())
}

pub fn parameter_count(varmap: &VarMap) -> usize {
    varmap.all_vars().iter().map(|v| v.elem_count()).sum()
}

impl Model {
    pub fn new(
        spec: ArchSpec,
        input_shape: &[usize],
        num_classes: usize,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &device);
        let net = match &spec {
            ArchSpec::Mlp { hidden, activation } => {
                let mut dims = vec![input_shape.iter().product::<usize>()];
                dims.extend_from_slice(hidden);
                dims.push(num_classes);
                let layers = dims
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| linear(w[0], w[1], vb.pp(format!("fc{i}"))))
                    .collect::<candle_core::Result<Vec<_>>>()?;
                Net::Mlp {
                    layers,
                    activation: *activation,
                }
            }
            ArchSpec::ConvNet { widths, kernel } => {
                let [c, h, w] = image_shape(input_shape)?;
                if widths.is_empty() || kernel % 2 == 0 {
                    return Err(invalid("conv net needs at least one stage and an odd kernel"));
                }
                let mut convs = Vec::new();
                let mut cin = c;
                for (i, &cout) in widths.iter().enumerate() {
                    convs.push(Conv::new(cin, cout, *kernel, 1, vb.pp(format!("conv{i}")))?);
                    cin = cout;
                }
                let shrink = 1usize << widths.len();
                let flat = cin * (h / shrink).max(1) * (w / shrink).max(1);
                let head = linear(flat, num_classes, vb.pp("head"))?;
                Net::Conv { convs, head }
            }
            ArchSpec::ResNet { width, blocks } => {
                let [c, _, _] = image_shape(input_shape)?;
                let stem = Conv::new(c, *width, 3, 1, vb.pp("stem"))?;
                let blocks = (0..*blocks)
                    .map(|i| {
                        Ok((
                            Conv::new(*width, *width, 3, 1, vb.pp(format!("block{i}.a")))?,
                            Conv::new(*width, *width, 3, 1, vb.pp(format!("block{i}.b")))?,
                        ))
                    })
                    .collect::<candle_core::Result<Vec<_>>>()?;
                let head = linear(*width, num_classes, vb.pp("head"))?;
                Net::Res { stem, blocks, head }
            }
        };
        seeded_init(&varmap, seed)?;
        Ok(Self {
            spec,
            input_shape: input_shape.to_vec(),
            num_classes,
            dtype,
            varmap,
            net,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.varmap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.varmap.save(path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.varmap.load(path)?;
        Ok(())
    }

    fn forward_impl(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        match &self.net {
            Net::Mlp { layers, activation } => {
                let mut h = x.flatten_from(1)?;
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.forward(&h)?;
                    if i + 1 < layers.len() {
                        h = activation.apply(&h)?;
                    }
                }
                Ok(h)
            }
            Net::Conv { convs, head } => {
                let mut h = x.clone();
                for conv in convs {
                    h = conv.forward(&h)?.relu()?;
                    if h.dim(2)? >= 2 && h.dim(3)? >= 2 {
                        h = h.max_pool2d(2)?;
                    }
                }
                head.forward(&h.flatten_from(1)?)
            }
            Net::Res { stem, blocks, head } => {
                let mut h = stem.forward(x)?.relu()?;
                for (i, (a, b)) in blocks.iter().enumerate() {
                    let r = b.forward(&a.forward(&h)?.relu()?)?;
                    h = (h + r)?.relu()?;
                    if i + 1 < blocks.len() && h.dim(2)? >= 2 && h.dim(3)? >= 2 {
                        h = h.avg_pool2d(2)?;
                    }
                }
                head.forward(&h.mean(D::Minus1)?.mean(D::Minus1)?)
            }
        }
    }
}

fn image_shape(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(invalid(format!("expected a [C, H, W] input shape, got {shape:?}"))),
    }
}

impl Classifier for Model {
    fn logits(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.forward_impl(x)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn dtype(&self) -> DType {
        self.dtype
    }
}

/// Mean of member logits. An ensemble of one is the member itself.
pub struct Ensemble<'a> {
    members: Vec<&'a dyn Classifier>,
}

impl<'a> Ensemble<'a> {
    pub fn new(members: Vec<&'a dyn Classifier>) -> Result<Self> {
        if members.is_empty() {
            return Err(invalid("ensemble needs at least one member"));
        }
        let k = members[0].num_classes();
        if members.iter().any(|m| m.num_classes() != k) {
            return Err(invalid("ensemble members disagree on class count"));
        }
        Ok(Self { members })
    }
}

impl Classifier for Ensemble<'_> {
    fn logits(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        if self.members.len() == 1 {
            return self.members[0].logits(x);
        }
        let mut acc = self.members[0].logits(x)?;
        for m in &self.members[1..] {
            acc = (acc + m.logits(x)?)?;
        }
        acc / self.members.len() as f64
    }

    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn dtype(&self) -> DType {
        self.members[0].dtype()
    }
}

/// Softmax cross-entropy per row, `logsumexp(z) - z[y]`.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &Tensor) -> candle_core::Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    logp.gather(&labels.unsqueeze(1)?, 1)?.squeeze(1)?.neg()
}

/// Logits for every sample, computed in batches; returned as f64 rows.
pub fn dataset_logits(
    model: &dyn Classifier,
    dataset: &LabeledDataset,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let device = Device::Cpu;
    let mut rows = Vec::with_capacity(dataset.len());
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = dataset.features(chunk, model.dtype(), &device)?;
        let z = model.logits(&x)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        rows.extend(z);
    }
    Ok(rows)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &dyn Classifier, x: &Tensor) -> Result<Vec<usize>> {
    let z = model.logits(x)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(z.iter().map(|r| argmax(r)).collect())
}

pub fn accuracy(model: &dyn Classifier, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let z = dataset_logits(model, dataset, 256)?;
    let correct = z
        .iter()
        .enumerate()
        .filter(|(i, r)| argmax(r) == dataset.label(*i))
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

pub fn mean_loss(model: &dyn Classifier, dataset: &LabeledDataset) -> Result<f64> {
    let device = Device::Cpu;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        let x = dataset.features(chunk, model.dtype(), &device)?;
        let y = dataset.label_tensor(chunk, &device)?;
        let l = cross_entropy_per_sample(&model.logits(&x)?, &y)?;
        total += l.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(total / dataset.len() as f64)
}

/// Step size `eta_t` as a function of the global step `t` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Constant { eta: f64 },
    /// `eta0 / (1 + decay * t)`.
    InverseTime { eta0: f64, decay: f64 },
}

impl StepSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::InverseTime { eta0, decay } => eta0 / (1.0 + decay * t as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub schedule: StepSchedule,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 50,
            schedule: StepSchedule::InverseTime {
                eta0: 0.1,
                decay: 1e-3,
            },
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.0,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub steps: usize,
    pub stopped_early: bool,
    /// Hit `max_epochs` without the early-stopping criterion firing.
    pub hit_max_epochs: bool,
    pub best_epoch: usize,
    pub val_losses: Vec<f64>,
    pub train_accuracy: f64,
}

enum Opt {
    Sgd(SGD),
    AdamW(AdamW),
}

impl Opt {
    fn set_lr(&mut self, lr: f64) {
        match self {
            Opt::Sgd(o) => o.set_learning_rate(lr),
            Opt::AdamW(o) => o.set_learning_rate(lr),
        }
    }

    fn backward_step(&mut self, loss: &Tensor) -> candle_core::Result<()> {
        match self {
            Opt::Sgd(o) => o.backward_step(loss),
            Opt::AdamW(o) => o.backward_step(loss),
        }
    }
}

/// Mini-batch training: each step draws `M` distinct samples and applies
/// `w <- w - eta_t * (1/M) sum grad l(w, x_i)` (or AdamW on the same batch
/// gradient). With a validation set, training stops after `patience`
/// non-improving epochs and the best weights are restored.
pub fn train_classifier(
    model: &Model,
    train: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let device = Device::Cpu;
    let vars = model.varmap.all_vars();
    let lr0 = config.schedule.at(0);
    let mut opt = match config.optimizer {
        OptimizerKind::Sgd => Opt::Sgd(SGD::new(vars, lr0)?),
        OptimizerKind::AdamW => Opt::AdamW(AdamW::new(
            vars,
            ParamsAdamW {
                lr: lr0,
                weight_decay: config.weight_decay,
                ..Default::default()
            },
        )?),
    };
    let mut rng = seed::child_rng(config.seed, "batches");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_snapshot = None;
    let mut since_best = 0;
    let mut val_losses = Vec::new();
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 0..config.max_epochs {
        shuffle(&mut order, &mut rng);
        for batch in order.chunks(config.batch_size) {
            let x = train.features(batch, model.dtype, &device)?;
            let y = train.label_tensor(batch, &device)?;
            let loss = cross_entropy_per_sample(&model.logits(&x)?, &y)?.mean_all()?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            opt.set_lr(config.schedule.at(step));
            opt.backward_step(&loss)?;
            step += 1;
        }
        epochs_run = epoch + 1;
        if let Some(val) = validation {
            let l = mean_loss(model, val)?;
            val_losses.push(l);
            if l < best {
                best = l;
                best_epoch = epoch;
                since_best = 0;
                best_snapshot = Some(snapshot(&model.varmap)?);
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some(snap) = &best_snapshot {
        restore(&model.varmap, snap)?;
    }
    Ok(TrainReport {
        epochs_run,
        steps: step,
        stopped_early,
        hit_max_epochs: !stopped_early,
        best_epoch,
        val_losses,
        train_accuracy: accuracy(model, train)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PrototypeImageTask;

    fn blobs() -> LabeledDataset {
        let mut rng = seed::rng(5);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..80 {
            let k = i % 2;
            let c = if k == 0 { -2.0 } else { 2.0 };
            data.push(c + rng.random_range(-0.5..0.5));
            data.push(rng.random_range(-0.5..0.5));
            labels.push(k);
        }
        LabeledDataset::new(vec![2], data, labels, 2).unwrap()
    }

    #[test]
    fn seeded_models_are_identical() {
        let spec = ArchSpec::Mlp {
            hidden: vec![8],
            activation: Activation::Relu,
        };
        let a = Model::new(spec.clone(), &[2], 2, DType::F64, 3).unwrap();
        let b = Model::new(spec.clone(), &[2], 2, DType::F64, 3).unwrap();
        let c = Model::new(spec, &[2], 2, DType::F64, 4).unwrap();
        let x = Tensor::new(&[[0.3f64, -0.2]], &Device::Cpu).unwrap();
        let za = a.logits(&x).unwrap().to_vec2::<f64>().unwrap();
        let zb = b.logits(&x).unwrap().to_vec2::<f64>().unwrap();
        let zc = c.logits(&x).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(za, zb);
        assert_ne!(za, zc);
    }

    #[test]
    fn mlp_learns_separable_blobs_deterministically() {
        let d = blobs();
        let spec = ArchSpec::Mlp {
            hidden: vec![8],
            activation: Activation::Tanh,
        };
        let cfg = TrainConfig {
            max_epochs: 20,
            ..Default::default()
        };
        let m1 = Model::new(spec.clone(), &[2], 2, DType::F64, 1).unwrap();
        let r1 = train_classifier(&m1, &d, None, &cfg).unwrap();
        assert!(r1.train_accuracy >= 0.95);
        let m2 = Model::new(spec, &[2], 2, DType::F64, 1).unwrap();
        train_classifier(&m2, &d, None, &cfg).unwrap();
        let x = d.all_features(DType::F64, &Device::Cpu).unwrap();
        assert_eq!(
            m1.logits(&x).unwrap().to_vec2::<f64>().unwrap(),
            m2.logits(&x).unwrap().to_vec2::<f64>().unwrap()
        );
    }

    #[test]
    fn early_stopping_restores_best_weights() {
        let d = blobs();
        let (train, val) = d.split(0.5, 2);
        let m = Model::new(
            ArchSpec::Mlp {
                hidden: vec![4],
                activation: Activation::Relu,
            },
            &[2],
            2,
            DType::F64,
            0,
        )
        .unwrap();
        let cfg = TrainConfig {
            max_epochs: 40,
            patience: 2,
            ..Default::default()
        };
        let r = train_classifier(&m, &train, Some(&val), &cfg).unwrap();
        let best = r.val_losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((mean_loss(&m, &val).unwrap() - best).abs() < 1e-12);
        assert_eq!(r.val_losses[r.best_epoch], best);
    }

    #[test]
    fn image_architectures_run() {
        let task = PrototypeImageTask {
            size: 8,
            ..Default::default()
        };
        let d = task.generate(1, "t").unwrap();
        let x = d.all_features(DType::F32, &Device::Cpu).unwrap();
        for spec in [
            ArchSpec::ConvNet {
                widths: vec![4, 8],
                kernel: 3,
            },
            ArchSpec::ResNet { width: 4, blocks: 2 },
        ] {
            let m = Model::new(spec, &[3, 8, 8], 10, DType::F32, 0).unwrap();
            assert_eq!(m.logits(&x).unwrap().dims(), &[10, 10]);
        }
    }

    #[test]
    fn ensemble_of_one_is_identity() {
        let m = Model::new(
            ArchSpec::Mlp {
                hidden: vec![3],
                activation: Activation::Relu,
            },
            &[2],
            2,
            DType::F64,
            9,
        )
        .unwrap();
        let e = Ensemble::new(vec![&m]).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0], [0.5, -1.0]], &Device::Cpu).unwrap();
        assert_eq!(
            e.logits(&x).unwrap().to_vec2::<f64>().unwrap(),
            m.logits(&x).unwrap().to_vec2::<f64>().unwrap()
        );
    }

    #[test]
    fn per_sample_cross_entropy_matches_closed_form() {
        let z = Tensor::new(&[[0.0f64, 0.0], [1000.0, 0.0]], &Device::Cpu).unwrap();
        let y = Tensor::new(&[1u32, 0], &Device::Cpu).unwrap();
        let l = cross_entropy_per_sample(&z, &y).unwrap().to_vec1::<f64>().unwrap();
        assert!((l[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(l[1], 0.0);
    }
}
