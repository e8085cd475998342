//! Classification and distillation losses with analytic gradients.
//!
//! All losses take logits and work in the log domain, so the probabilities
//! behind them may underflow without producing NaN.

mod train;

pub use train::{evaluate, train_student, train_teacher, EpochRecord, History};

use crate::error::{Error, Result};

/// Loss weights and the SGD schedule for one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the distillation term; `1 - alpha` goes to cross-entropy.
    pub alpha: f64,
    /// TCKD weight.
    pub beta: f64,
    /// NCKD weight.
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.5,
            alpha: 0.2,
            beta: 4.0,
            gamma: 1.0,
            epochs: 75,
            batch_size: 64,
            lr: 0.1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.temperature > 0.0
            && self.temperature.is_finite()
            && (0.0..=1.0).contains(&self.alpha)
            && self.beta >= 0.0
            && self.gamma >= 0.0
            && self.beta.is_finite()
            && self.gamma.is_finite()
            && self.batch_size > 0
            && self.lr > 0.0
            && self.lr.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad distillation config {self:?}")))
        }
    }
}

/// Teacher and student logits for one sample with its true class.
#[derive(Debug, Clone, Copy)]
pub struct LogitPair<'a> {
    pub teacher: &'a [f64],
    pub student: &'a [f64],
    pub target: usize,
}

impl<'a> LogitPair<'a> {
    pub fn new(teacher: &'a [f64], student: &'a [f64], target: usize) -> Result<Self> {
        if teacher.len() != student.len() || teacher.len() < 2 {
            return Err(Error::Shape(format!(
                "logit pair of lengths {} and {}",
                teacher.len(),
                student.len()
            )));
        }
        if target >= teacher.len() {
            return Err(Error::InvalidArgument(format!("target {target} out of range")));
        }
        if !teacher.iter().chain(student).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(Self {
            teacher,
            student,
            target,
        })
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

/// `log softmax(z / T)`.
pub fn log_softmax_t(z: &[f64], t: f64) -> Result<Vec<f64>> {
    check_temperature(t)?;
    let lse = log_sum_exp(z.iter().map(|&v| v / t));
    Ok(z.iter().map(|&v| v / t - lse).collect())
}

pub fn softmax_t(z: &[f64], t: f64) -> Result<Vec<f64>> {
    Ok(log_softmax_t(z, t)?.into_iter().map(f64::exp).collect())
}

/// Pulls a gradient on `softmax(z / T)` back to `z`.
pub fn softmax_t_backward(probs: &[f64], grad: &[f64], t: f64) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad)
        .map(|(p, g)| p * (g - dot) / t)
        .collect()
}

/// `-sum y_i log p_i`.
pub fn ce_loss(target_onehot: &[f64], probs: &[f64]) -> f64 {
    target_onehot
        .iter()
        .zip(probs)
        .filter(|(&y, _)| y != 0.0)
        .map(|(&y, &p)| -y * p.ln())
        .sum()
}

/// `KL(p_teacher || p_student)`, nonnegative.
pub fn kl_loss(p_teacher: &[f64], p_student: &[f64]) -> f64 {
    p_teacher
        .iter()
        .zip(p_student)
        .filter(|(&pt, _)| pt > 0.0)
        .map(|(&pt, &ps)| pt * (pt / ps).ln())
        .sum()
}

/// KL between two distributions given as log-probabilities.
fn kl_log(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum()
}

/// Cross-entropy of the T = 1 softmax against a hard label.
pub fn ce_from_logits(z: &[f64], target: usize) -> f64 {
    log_sum_exp(z.iter().copied()) - z[target]
}

/// `(p_t, p_not_t, p_hat)` where `p_hat` renormalizes the non-target classes
/// in their original order with the target removed.
pub fn split_target(probs: &[f64], t: usize) -> (f64, f64, Vec<f64>) {
    let p_t = probs[t];
    let rest: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t)
        .map(|(_, &p)| p)
        .sum();
    let hat = probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t)
        .map(|(_, &p)| p / rest)
        .collect();
    (p_t, rest, hat)
}

/// Log-domain pieces of the target / non-target split at temperature `T`.
struct Split {
    /// `[log p_t, log p_not_t]`
    binary: [f64; 2],
    /// `log p_hat` over non-targets.
    hat: Vec<f64>,
}

fn split_log(z: &[f64], target: usize, t: f64) -> Split {
    let scaled: Vec<f64> = z.iter().map(|&v| v / t).collect();
    let lse = log_sum_exp(scaled.iter().copied());
    let others = scaled
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, &v)| v);
    let lse_rest = log_sum_exp(others.clone());
    Split {
        binary: [scaled[target] - lse, lse_rest - lse],
        hat: others.map(|v| v - lse_rest).collect(),
    }
}

/// Binary KL between the teacher's and student's (target, rest) masses.
pub fn tckd_loss(pair: &LogitPair, t: f64) -> Result<f64> {
    check_temperature(t)?;
    let a = split_log(pair.teacher, pair.target, t);
    let b = split_log(pair.student, pair.target, t);
    Ok(kl_log(&a.binary, &b.binary))
}

/// KL between the renormalized non-target distributions.
pub fn nckd_loss(pair: &LogitPair, t: f64) -> Result<f64> {
    check_temperature(t)?;
    let a = split_log(pair.teacher, pair.target, t);
    let b = split_log(pair.student, pair.target, t);
    Ok(kl_log(&a.hat, &b.hat))
}

/// Classical distillation:
/// `(1 - alpha) CE(y, p_S) + alpha T^2 KL(p_T(T) || p_S(T))`.
pub fn kd_loss(pair: &LogitPair, t: f64, alpha: f64) -> Result<f64> {
    let lt = log_softmax_t(pair.teacher, t)?;
    let ls = log_softmax_t(pair.student, t)?;
    Ok((1.0 - alpha) * ce_from_logits(pair.student, pair.target)
        + alpha * t * t * kl_log(&lt, &ls))
}

/// `(1 - alpha) CE + alpha T^2 (beta TCKD + gamma NCKD)`.
pub fn dkd_loss(pair: &LogitPair, cfg: &DistillConfig) -> Result<f64> {
    let t = cfg.temperature;
    let kd = cfg.beta * tckd_loss(pair, t)? + cfg.gamma * nckd_loss(pair, t)?;
    Ok((1.0 - cfg.alpha) * ce_from_logits(pair.student, pair.target) + cfg.alpha * t * t * kd)
}

/// `p_S - y` at T = 1.
pub fn ce_grad(z: &[f64], target: usize) -> Vec<f64> {
    let lse = log_sum_exp(z.iter().copied());
    z.iter()
        .enumerate()
        .map(|(i, &v)| (v - lse).exp() - if i == target { 1.0 } else { 0.0 })
        .collect()
}

/// Gradient of [`dkd_loss`] with respect to the student logits.
pub fn dkd_grad(pair: &LogitPair, cfg: &DistillConfig) -> Result<Vec<f64>> {
    let t = cfg.temperature;
    check_temperature(t)?;
    let a = split_log(pair.teacher, pair.target, t);
    let b = split_log(pair.student, pair.target, t);
    let (bt, qt) = (a.binary[0].exp(), b.binary[0].exp());
    let scale = cfg.alpha * t;

    let mut g = ce_grad(pair.student, pair.target);
    for v in &mut g {
        *v *= 1.0 - cfg.alpha;
    }
    g[pair.target] += scale * cfg.beta * (qt - bt);
    let others = (0..g.len()).filter(|&i| i != pair.target);
    for (k, i) in others.enumerate() {
        let q_hat = b.hat[k].exp();
        let p_hat = a.hat[k].exp();
        g[i] += scale * (cfg.beta * (bt - qt) * q_hat + cfg.gamma * (q_hat - p_hat));
    }
    Ok(g)
}
