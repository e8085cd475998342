use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ce_from_logits, ce_grad, dkd_grad, dkd_loss, DistillConfig, LogitPair};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::nn::model::{batch_input, predict, Network, StudentNet, TeacherNet, NUM_CLASSES};
use crate::nn::optim::{sgd_step, SgdState};
use crate::nn::Tensor;
use crate::signal::{SampleSet, Spectrum, Split};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (highest validation F1, earliest on ties).
    pub best_epoch: usize,
}

impl History {
    pub fn best_val_f1(&self) -> f64 {
        self.epochs.get(self.best_epoch).map_or(0.0, |r| r.val_f1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_f1\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{:.9e},{:.9e},{:.6}\n",
                r.epoch, r.lr, r.train_loss, r.val_f1
            ));
        }
        s
    }
}

pub fn evaluate<N: Network>(net: &N, samples: &[&Spectrum]) -> Result<EvalReport> {
    let pred = predict(net, samples)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    EvalReport::from_predictions(NUM_CLASSES, &truth, &pred)
}

/// Inference-mode logits for each sample, in order.
fn logits_of<N: Network>(net: &N, samples: &[&Spectrum]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let z = net.forward(&batch_input(chunk)?)?;
        out.extend(z.rows().map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Mean batch loss and its gradient with respect to the logits.
fn batch_loss(
    logits: &Tensor,
    labels: &[usize],
    soft: Option<&[&[f64]]>,
    cfg: &DistillConfig,
) -> Result<(f64, Tensor)> {
    let n = labels.len() as f64;
    let mut grad = Vec::with_capacity(logits.len());
    let mut loss = 0.0;
    for (i, (z, &y)) in logits.rows().zip(labels).enumerate() {
        let (l, g) = match soft {
            Some(teacher) => {
                let pair = LogitPair::new(teacher[i], z, y)?;
                (dkd_loss(&pair, cfg)?, dkd_grad(&pair, cfg)?)
            }
            None => (ce_from_logits(z, y), ce_grad(z, y)),
        };
        loss += l;
        grad.extend(g.into_iter().map(|v| v / n));
    }
    Ok((loss / n, Tensor::new(logits.shape().to_vec(), grad)?))
}

fn fit<N: Network + Clone>(
    mut net: N,
    data: &SampleSet,
    soft: Option<&[Vec<f64>]>,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(N, History)> {
    cfg.validate()?;
    let train = data.subset(Split::Train);
    let val = data.subset(Split::Val);
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let lens: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut opt = SgdState::new(&lens, cfg.lr, cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, N)> = None;

    for epoch in 0..cfg.epochs {
        opt.epoch = epoch;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Spectrum> = idx.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let teacher: Option<Vec<&[f64]>> =
                soft.map(|t| idx.iter().map(|&i| t[i].as_slice()).collect());
            let (logits, cache) = net.forward_train(&batch_input(&batch)?)?;
            logits.check_finite("training forward")?;
            let (loss, grad) = batch_loss(&logits, &labels, teacher.as_deref(), cfg)?;
            total += loss * idx.len() as f64;
            let grads = net.backward(&cache, &grad)?;
            sgd_step(net.params_mut(), &grads, &mut opt)?;
        }
        let val_f1 = evaluate(&net, &val)?.f1;
        history.epochs.push(EpochRecord {
            epoch,
            lr: opt.lr(),
            train_loss: total / train.len() as f64,
            val_f1,
        });
        if best.as_ref().is_none_or(|(f1, _)| val_f1 > *f1) {
            history.best_epoch = epoch;
            best = Some((val_f1, net.clone()));
        }
    }
    Ok((best.map_or(net, |(_, n)| n), history))
}

/// Supervised cross-entropy training of the teacher.
pub fn train_teacher(
    teacher: TeacherNet,
    data: &SampleSet,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(TeacherNet, History)> {
    fit(teacher, data, None, cfg, seed)
}

/// Trains the student against the frozen teacher's logits with the decoupled
/// loss, or with plain cross-entropy when no teacher is given.
pub fn train_student(
    teacher: Option<&TeacherNet>,
    student: StudentNet,
    data: &SampleSet,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(StudentNet, History)> {
    let soft = match teacher {
        Some(t) => Some(logits_of(t, &data.subset(Split::Train))?),
        None => None,
    };
    fit(student, data, soft.as_deref(), cfg, seed)
}
