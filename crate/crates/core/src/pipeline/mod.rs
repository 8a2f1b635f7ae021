//! Training, inference, cross-validation and run artifacts.

mod checkpoint;
mod cv;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use cv::{cross_dataset, run_cv, CvReport};

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{crop_patches, PatchPair, StereoSample};
use crate::error::{Error, Result};
use crate::evalmetrics::{aggregate_image_score, evaluate, MetricsReport};
use crate::layers::{adam_step, AdamConfig, AdamState, CosineWarmRestarts, Forward, Mode, ParamSet};
use crate::satnet::{Model, ModelConfig, PATCH_SIZE};
use crate::tensor::{Tape, Tensor, Var};

/// Patches per forward pass at inference time.
pub const INFER_BATCH: usize = 64;

/// Mean squared error between `N×1` predictions and targets.
pub fn mse_loss<T: crate::tensor::Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(format!(
            "prediction shape {:?} does not match target shape {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of every cosine cycle.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Start the output bias at the mean training label instead of zero.
    pub init_output_bias: bool,
    /// Hold out this fraction of training scenes and track the best epoch.
    pub validation_fraction: Option<f64>,
    /// Decode images on the rayon pool.
    pub parallel_loading: bool,
    /// Store Adam moments in the checkpoint.
    pub keep_optimizer_state: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            model: ModelConfig::default(),
            epochs: 100,
            batch_size: 64,
            base_lr: 1e-4,
            weight_decay: 4e-4,
            seed: 0,
            init_output_bias: true,
            validation_fraction: None,
            parallel_loading: false,
            keep_optimizer_state: false,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::config("epochs must be positive and batch size at least 2"));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning rate must be positive and weight decay non-negative"));
        }
        if let Some(f) = self.validation_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("validation fraction {f} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineWarmRestarts {
        CosineWarmRestarts::with_lr0(self.base_lr)
    }
}

/// Per-epoch energy coefficients, one entry per SAT block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EcTrace {
    pub epochs: Vec<Vec<f64>>,
}

impl EcTrace {
    pub fn blocks(&self) -> usize {
        self.epochs.first().map_or(0, Vec::len)
    }

    /// The series of block `k` (0-based) across epochs.
    pub fn series(&self, k: usize) -> Vec<f64> {
        self.epochs.iter().map(|e| e[k]).collect()
    }

    /// Largest `|α_k(e) − α_k(e−1)|` over the last `n` epoch transitions.
    pub fn max_recent_delta(&self, n: usize) -> f64 {
        let start = self.epochs.len().saturating_sub(n + 1);
        self.epochs[start..]
            .windows(2)
            .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    pub fn all_in_open_unit_interval(&self) -> bool {
        self.epochs.iter().flatten().all(|&a| a > 0.0 && a < 1.0)
    }
}

/// Parameters at the epoch with the lowest validation loss.
#[derive(Clone, Debug)]
pub struct BestEpoch {
    pub epoch: usize,
    pub val_loss: f64,
    pub params: ParamSet<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: AdamState<f32>,
    /// Mean training loss of every epoch.
    pub loss_log: Vec<f64>,
    pub val_log: Vec<f64>,
    pub ec_trace: EcTrace,
    pub best: Option<BestEpoch>,
    pub seed: u64,
}

impl TrainOutcome {
    /// The final-epoch checkpoint.
    pub fn checkpoint(&self, keep_optimizer: bool) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: keep_optimizer.then(|| self.optimizer.clone()),
            seed: self.seed,
            epoch: self.loss_log.len() as u64,
        }
    }

    pub fn best_checkpoint(&self) -> Option<Checkpoint> {
        self.best.as_ref().map(|b| Checkpoint {
            model: Model { net: self.model.net.clone(), params: b.params.clone() },
            optimizer: None,
            seed: self.seed,
            epoch: b.epoch as u64 + 1,
        })
    }
}

/// Stacks patches `idx` into `B×3×40×40` left/right tensors and a `B×1` target.
pub fn make_batch(patches: &[PatchPair], idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let left: Vec<&Tensor<f32>> = idx.iter().map(|&i| &patches[i].left).collect();
    let right: Vec<&Tensor<f32>> = idx.iter().map(|&i| &patches[i].right).collect();
    let target = Tensor::new(vec![idx.len(), 1], idx.iter().map(|&i| patches[i].label as f32).collect())?;
    Ok((Tensor::stack(&left)?, Tensor::stack(&right)?, target))
}

fn first_non_finite(params: &ParamSet<f32>) -> Option<String> {
    params.iter().find(|p| !p.value.is_finite()).map(|p| format!("parameter {} holds non-finite values", p.name))
}

/// Explains a non-finite loss: a bad parameter, a bad gradient from the
/// previous step, or the first operation of a checked replay that blew up.
fn diagnose(model: &Model<f32>, bad_grad: &Option<String>, left: &Tensor<f32>, right: &Tensor<f32>) -> String {
    if let Some(msg) = first_non_finite(&model.params) {
        return msg;
    }
    if let Some(name) = bad_grad {
        return format!("parameter {name} received a non-finite gradient");
    }
    let mut tape = Tape::new().with_finite_checks(true);
    let mut ctx = Forward::new(&mut tape, &model.params, Mode::Train).with_rng(ChaCha8Rng::seed_from_u64(0));
    let l = ctx.tape.constant(left.clone());
    let r = ctx.tape.constant(right.clone());
    match model.net.forward(&mut ctx, l, r) {
        Err(e) => format!("replay stopped at: {e}"),
        Ok(_) => "non-finite values in the inputs or targets".to_string(),
    }
}

/// Mean loss of `patches` in eval mode.
pub fn eval_loss(model: &Model<f32>, patches: &[PatchPair]) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..patches.len()).collect();
    for chunk in idx.chunks(INFER_BATCH) {
        let (l, r, t) = make_batch(patches, chunk)?;
        let pred = model.predict(&l, &r)?;
        total += pred.iter().zip(t.data()).map(|(p, y)| ((p - y) as f64).powi(2)).sum::<f64>();
    }
    Ok(total / patches.len().max(1) as f64)
}

/// Trains a fresh model on `train` patches. `validation`, when given, is
/// scored after every epoch to track the best parameters.
pub fn train(run: &TrainRunConfig, train: &[PatchPair], validation: Option<&[PatchPair]>) -> Result<TrainOutcome> {
    run.validate()?;
    if train.len() < 2 {
        return Err(Error::data(format!("{} training patches; need at least 2", train.len())));
    }
    let mut model_cfg = run.model;
    model_cfg.seed = run.seed;
    let mut model = Model::<f32>::new(model_cfg)?;
    if run.init_output_bias {
        let mean = train.iter().map(|p| p.label).sum::<f64>() / train.len() as f64;
        model.params.set_value("head.fc3.bias", Tensor::full(&[1], mean as f32))?;
    }
    let mut opt = AdamState::new(&model.params, AdamConfig { weight_decay: run.weight_decay, ..AdamConfig::default() });
    let schedule = run.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5eed_5a7e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut out = TrainOutcome {
        model: model.clone(),
        optimizer: opt.clone(),
        loss_log: Vec::with_capacity(run.epochs),
        val_log: Vec::new(),
        ec_trace: EcTrace::default(),
        best: None,
        seed: run.seed,
    };
    let mut bad_grad: Option<String> = None;

    for epoch in 0..run.epochs {
        order.shuffle(&mut rng);
        // Batch norm needs two samples; a trailing singleton is dropped.
        let batches: Vec<&[usize]> = order.chunks(run.batch_size).filter(|b| b.len() >= 2).collect();
        let n_batches = batches.len();
        let (mut sum, mut count) = (0.0f64, 0usize);
        for (bi, batch) in batches.into_iter().enumerate() {
            let lr = schedule.lr(epoch as f64 + bi as f64 / n_batches as f64);
            let (left, right, target) = make_batch(train, batch)?;
            let mut tape = Tape::new();
            let mut ctx = Forward::new(&mut tape, &model.params, Mode::Train)
                .with_rng(ChaCha8Rng::seed_from_u64(rng.random()));
            let l = ctx.tape.constant(left.clone());
            let r = ctx.tape.constant(right.clone());
            let y = ctx.tape.constant(target);
            let fwd = model.net.forward(&mut ctx, l, r)?;
            let loss = mse_loss(ctx.tape, fwd.score, y)?;
            let bound = ctx.bound();
            let bn = ctx.take_bn_updates();
            let loss_value = tape.value(loss).item()? as f64;
            if !loss_value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {loss_value} at epoch {} batch {}: {}",
                    epoch + 1,
                    bi + 1,
                    diagnose(&model, &bad_grad, &left, &right)
                )));
            }
            let mut grads = tape.backward(loss)?;
            model.params.store_grads(&bound, &mut grads);
            model.params.apply_bn_updates(bn);
            bad_grad = model
                .params
                .iter()
                .find(|p| p.grad.as_ref().is_some_and(|g| !g.is_finite()))
                .map(|p| p.name.clone());
            adam_step(&mut model.params, &mut opt, lr)?;
            sum += loss_value * batch.len() as f64;
            count += batch.len();
        }
        out.loss_log.push(sum / count as f64);
        out.ec_trace.epochs.push(model.energy_coefficients());
        if let Some(val) = validation {
            let v = eval_loss(&model, val)?;
            out.val_log.push(v);
            if out.best.as_ref().is_none_or(|b| v < b.val_loss) {
                out.best = Some(BestEpoch { epoch, val_loss: v, params: model.params.clone() });
            }
        }
    }
    out.model = model;
    out.optimizer = opt;
    Ok(out)
}

/// Per-image scores: every image's patches are scored in eval mode and
/// averaged.
pub fn predict_images(model: &Model<f32>, images: &[Vec<PatchPair>]) -> Result<Vec<f64>> {
    let flat: Vec<&PatchPair> = images.iter().flatten().collect();
    let mut scores = Vec::with_capacity(flat.len());
    for chunk in flat.chunks(INFER_BATCH) {
        let left: Vec<&Tensor<f32>> = chunk.iter().map(|p| &p.left).collect();
        let right: Vec<&Tensor<f32>> = chunk.iter().map(|p| &p.right).collect();
        let pred = model.predict(&Tensor::stack(&left)?, &Tensor::stack(&right)?)?;
        scores.extend(pred.into_iter().map(f64::from));
    }
    let mut at = 0;
    images
        .iter()
        .map(|img| {
            let s = aggregate_image_score(&scores[at..at + img.len()]);
            at += img.len();
            s
        })
        .collect()
}

/// Quality score of one full stereo pair.
pub fn infer_pair(model: &Model<f32>, left: &Tensor<f32>, right: &Tensor<f32>) -> Result<f64> {
    let shape = left.shape();
    if shape.len() != 3 || shape[1] < PATCH_SIZE || shape[2] < PATCH_SIZE {
        return Err(Error::data(format!("image {shape:?} is smaller than {PATCH_SIZE}×{PATCH_SIZE}")));
    }
    let record = crate::data::ManifestRecord {
        left_path: Default::default(),
        right_path: Default::default(),
        score: f64::NAN,
        scene_id: String::new(),
        distortion: crate::data::Distortion::None,
        level: 0,
    };
    let sample = StereoSample::new(record, left.clone(), right.clone())?;
    let patches = crop_patches(&sample)?;
    Ok(predict_images(model, &[patches])?[0])
}

/// Scores every image and evaluates against its label.
pub fn evaluate_images(model: &Model<f32>, images: &[Vec<PatchPair>]) -> Result<MetricsReport> {
    let q = predict_images(model, images)?;
    let y: Vec<f64> = images
        .iter()
        .map(|p| p.first().map(|x| x.label).ok_or_else(|| Error::data("image without patches")))
        .collect::<Result<_>>()?;
    evaluate(&q, &y)
}

/// Writes `epoch,value` rows (epochs 1-based).
pub fn write_series_csv(path: &Path, values: &[f64]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "epoch,value").map_err(io)?;
    for (i, v) in values.iter().enumerate() {
        writeln!(f, "{},{v}", i + 1).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// `loss.csv`, `val_loss.csv` (when tracked) and `ec_alpha<k>.csv` per SAT
/// block, into `dir`.
pub fn write_training_logs(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_series_csv(&dir.join("loss.csv"), &outcome.loss_log)?;
    if !outcome.val_log.is_empty() {
        write_series_csv(&dir.join("val_loss.csv"), &outcome.val_log)?;
    }
    for k in 0..outcome.ec_trace.blocks() {
        write_series_csv(&dir.join(format!("ec_alpha{}.csv", k + 1)), &outcome.ec_trace.series(k))?;
    }
    Ok(())
}
