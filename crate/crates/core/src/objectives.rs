//! Loss terms and their weighted totals.
//!
//! The adversarial game is the Wasserstein form with a gradient penalty on
//! random interpolates between real and generated batches.

use defectgan_autograd::{grad, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::Critic;
use crate::error::{Error, Result};
use crate::seed;

/// Added under the square root of the gradient norm so its derivative stays finite at zero.
pub const GP_NORM_EPS: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls_r: f64,
    pub cls_f: f64,
    pub rec: f64,
    pub sd_cyc: f64,
    pub sd_con: f64,
    pub gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls_r: 2.0, cls_f: 5.0, rec: 5.0, sd_cyc: 5.0, sd_con: 1.0, gp: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls_r, self.cls_f, self.rec, self.sd_cyc, self.sd_con, self.gp];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Raw term values for one update. Terms that a step does not compute stay `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub adv_d: Option<f64>,
    pub gp: Option<f64>,
    pub cls_r: Option<f64>,
    pub adv_g: Option<f64>,
    pub cls_f: Option<f64>,
    pub rec: Option<f64>,
    /// `None` when the spatial terms are disabled; reported as 0 and excluded.
    pub sd_cyc: Option<f64>,
    pub sd_con: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sd_cyc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sd_con: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_g: Option<f64>,
}

impl LossReport {
    /// Every present value, by name.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        [
            ("adv_d", self.adv_d),
            ("gp", self.gp),
            ("cls_r", self.cls_r),
            ("total_d", self.total_d),
            ("adv_g", self.adv_g),
            ("cls_f", self.cls_f),
            ("rec", self.rec),
            ("sd_cyc", self.sd_cyc),
            ("sd_con", self.sd_con),
            ("total_g", self.total_g),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    /// Largest absolute difference over fields present in both reports;
    /// infinite when the reports carry different fields.
    pub fn max_abs_diff(&self, other: &LossReport) -> f64 {
        let a = self.entries();
        let b = other.entries();
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.0 != y.0) {
            return f64::INFINITY;
        }
        a.iter().zip(&b).map(|(x, y)| (x.1 - y.1).abs()).fold(0.0, f64::max)
    }
}

fn check_finite(name: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !x.is_finite() => Err(Error::NonFinite { term: name.to_string() }),
        _ => Ok(()),
    }
}

/// Weighted critic total.
pub fn critic_total(adv_d: f64, gp: f64, cls_r: f64, w: &LossWeights) -> f64 {
    adv_d + w.gp * gp + w.cls_r * cls_r
}

/// Weighted generator total; spatial terms contribute only when present.
pub fn generator_total(adv_g: f64, cls_f: f64, rec: f64, sd: Option<(f64, f64)>, w: &LossWeights) -> f64 {
    let base = adv_g + w.cls_f * cls_f + w.rec * rec;
    match sd {
        Some((cyc, con)) => base + w.sd_cyc * cyc + w.sd_con * con,
        None => base,
    }
}

/// Combines components into a report with totals for whichever side is complete.
pub fn total_losses(c: &LossComponents, w: &LossWeights) -> Result<LossReport> {
    for (name, v) in [
        ("adv_d", c.adv_d),
        ("gp", c.gp),
        ("cls_r", c.cls_r),
        ("adv_g", c.adv_g),
        ("cls_f", c.cls_f),
        ("rec", c.rec),
        ("sd_cyc", c.sd_cyc),
        ("sd_con", c.sd_con),
    ] {
        check_finite(name, v)?;
    }
    let mut r = LossReport { adv_d: c.adv_d, gp: c.gp, cls_r: c.cls_r, ..Default::default() };
    if let (Some(a), Some(g), Some(cr)) = (c.adv_d, c.gp, c.cls_r) {
        r.total_d = Some(critic_total(a, g, cr, w));
    }
    if let (Some(a), Some(cf), Some(rec)) = (c.adv_g, c.cls_f, c.rec) {
        let sd = c.sd_cyc.zip(c.sd_con);
        r.adv_g = Some(a);
        r.cls_f = Some(cf);
        r.rec = Some(rec);
        r.sd_cyc = Some(c.sd_cyc.unwrap_or(0.0));
        r.sd_con = Some(c.sd_con.unwrap_or(0.0));
        r.total_g = Some(generator_total(a, cf, rec, sd, w));
    }
    Ok(r)
}

/// Mean patch score per sample, `[N, 1, 1, 1]`.
fn per_sample(scores: &Var) -> Var {
    scores.mean_axes_keepdim(&[1, 2, 3])
}

/// Returns `(adv_d, gp)` where `adv_d = mean D(fake) − mean D(real)` and
/// `gp = mean_i (‖∇ D_i(x̂_i)‖ − 1)²` on `x̂ = ε·real + (1 − ε)·fake`, one
/// `ε ~ U(0, 1)` per sample drawn from `seed`. `D_i` is sample i's mean patch score.
///
/// The penalty keeps its graph, so it can be differentiated with respect to
/// the critic's parameters.
pub fn critic_loss(critic: &dyn Critic, real: &Var, fake: &Var, seed: u64) -> (Var, Var) {
    let adv_d = critic.score(fake).mean().sub(&critic.score(real).mean());
    let gp = gradient_penalty(critic, real.value(), fake.value(), seed);
    (adv_d, gp)
}

pub fn interpolation_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed, &[seed::STREAM_GP]);
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

pub fn gradient_penalty(critic: &dyn Critic, real: &Tensor, fake: &Tensor, seed: u64) -> Var {
    assert_eq!(real.shape(), fake.shape(), "real and fake batches differ in shape");
    let n = real.shape()[0];
    let per = real.len() / n;
    let eps = interpolation_weights(n, seed);
    let mixed = Tensor::from_fn(real.shape(), |i| {
        let e = eps[i / per];
        e * real.data()[i] + (1.0 - e) * fake.data()[i]
    });
    let x_hat = Var::leaf(mixed);
    let s = per_sample(&critic.score(&x_hat)).sum();
    let g = &grad(&s, std::slice::from_ref(&x_hat), true)[0];
    let norm = g.square().sum_axes_keepdim(&[1, 2, 3]).add_scalar(GP_NORM_EPS).sqrt();
    norm.add_scalar(-1.0).square().mean()
}

/// `−mean D(fake)`.
pub fn generator_adv_loss(critic: &dyn Critic, fake: &Var) -> Var {
    critic.score(fake).mean().neg()
}

/// Multi-label binary cross-entropy on logits, averaged over samples and categories.
pub fn classification_loss(logits: &Var, targets: &Tensor) -> Var {
    assert_eq!(logits.shape(), targets.shape(), "logits and targets differ in shape");
    // max(x, 0) − x·t + ln(1 + e^{−|x|})
    let softplus_tail = logits.abs().neg().exp().add_scalar(1.0).ln();
    logits.relu().sub(&logits.mul_const(targets)).add(&softplus_tail).mean()
}

/// Mean absolute difference.
pub fn reconstruction_loss(a: &Var, b: &Var) -> Var {
    a.sub(b).abs().mean()
}

/// Mean absolute difference between the defacement and restoration maps.
pub fn sd_cycle_loss(m_d: &Var, m_restore: &Var) -> Var {
    m_d.sub(m_restore).abs().mean()
}

/// `mean(m_d) + mean(m_restore)`.
pub fn sd_region_loss(m_d: &Var, m_restore: &Var) -> Var {
    m_d.mean().add(&m_restore.mean())
}
