//! Sub-center cosine logits and the AM-Softmax loss with an extra penalty on
//! the `k_top` most similar negative classes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cosines are clamped to `[-1 + ANGULAR_CLAMP, 1 - ANGULAR_CLAMP]` before `acos`.
pub const ANGULAR_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyMode {
    /// `cos θ + m′`
    Additive,
    /// `cos(θ − m′)`
    Angular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub scale: f64,
    /// Target-class margin `m` (the value the warmup ramp reaches).
    pub margin: f64,
    /// Extra penalty `m′` on the `k_top` nearest negatives.
    pub margin_prime: f64,
    pub k_top: usize,
    pub sub_centers: usize,
    pub penalty_mode: PenaltyMode,
    pub classes: usize,
    /// Scale `m′` along with the margin warmup instead of applying it from step 0.
    #[serde(default)]
    pub ramp_margin_prime: bool,
}

impl LossConfig {
    /// Plain sub-center AM-Softmax: `s = 35`, `m = 0.2`, three sub-centers.
    pub fn am_softmax(classes: usize) -> Self {
        Self {
            scale: 35.0,
            margin: 0.2,
            margin_prime: 0.0,
            k_top: 0,
            sub_centers: 3,
            penalty_mode: PenaltyMode::Additive,
            classes,
            ramp_margin_prime: false,
        }
    }

    /// AM-Softmax with `m′ = 0.06` on the top-5 negatives.
    pub fn inter_topk(classes: usize) -> Self {
        Self {
            margin_prime: 0.06,
            k_top: 5,
            ..Self::am_softmax(classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("loss.scale", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::config("loss.margin", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.margin_prime) {
            return Err(Error::config("loss.margin_prime", "must lie in [0, 1)"));
        }
        if self.sub_centers == 0 {
            return Err(Error::config("loss.sub_centers", "must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::config("loss.classes", "need at least 2 classes"));
        }
        Ok(())
    }

    /// `k_top` clamped to the number of negatives.
    pub fn effective_k(&self) -> usize {
        self.k_top.min(self.classes.saturating_sub(1))
    }

    pub fn label(&self) -> String {
        if self.margin_prime == 0.0 || self.k_top == 0 {
            format!("m={:.2}, m'={:.2}", self.margin, 0.0)
        } else {
            format!(
                "m={:.2}, m'={:.2} & k_top={}",
                self.margin, self.margin_prime, self.k_top
            )
        }
    }
}

/// `C × K × e` bank of class sub-centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCenters {
    weights: Tensor,
}

impl ClassCenters {
    /// Gaussian directions projected to the unit sphere.
    pub fn random(classes: usize, sub_centers: usize, dim: usize, seed: u64) -> Result<Self> {
        if classes == 0 || sub_centers == 0 || dim == 0 {
            return Err(Error::Dimension("class centers need positive sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..classes * sub_centers * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut centers = Self {
            weights: Tensor::new(vec![classes, sub_centers, dim], data)?,
        };
        centers.renormalize();
        Ok(centers)
    }

    pub fn from_tensor(weights: Tensor) -> Result<Self> {
        if weights.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "class centers must be C x K x e, got {:?}",
                weights.shape()
            )));
        }
        Ok(Self { weights })
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn sub_centers(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.weights
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn center(&self, class: usize, sub: usize) -> &[f64] {
        let e = self.dim();
        let start = (class * self.sub_centers() + sub) * e;
        &self.weights.data()[start..start + e]
    }

    /// Projects every sub-center back onto the unit sphere.
    pub fn renormalize(&mut self) {
        let e = self.dim();
        for row in self.weights.data_mut().chunks_mut(e) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }

    /// Largest `|‖W_{j,k}‖ − 1|` over the bank.
    pub fn max_norm_deviation(&self) -> f64 {
        self.weights
            .data()
            .chunks(self.dim())
            .map(|row| (row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Output of [`cosine_logits`]; also the cache for its backward pass.
#[derive(Debug, Clone)]
pub struct CosineLogits {
    /// `N × C`.
    pub cos: Tensor,
    /// Winning sub-center per `(row, class)`, row-major.
    pub selected: Vec<usize>,
    normalized: Tensor,
    norms: Vec<f64>,
}

/// `cos θ_{i,j} = max_k ⟨x̂_i, W_{j,k}⟩`, ties toward the lowest `k`.
pub fn cosine_logits(embeddings: &Tensor, centers: &ClassCenters) -> Result<CosineLogits> {
    let (n, e) = embeddings.dims2()?;
    if e != centers.dim() {
        return Err(Error::Dimension(format!(
            "embeddings have dimension {e}, centers {}",
            centers.dim()
        )));
    }
    let classes = centers.classes();
    let mut normalized = embeddings.clone();
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row = normalized.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric(format!(
                "embedding row {i} has norm {norm} and cannot be normalized"
            )));
        }
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    let mut cos = Tensor::zeros(&[n, classes]);
    let mut selected = vec![0; n * classes];
    for i in 0..n {
        let x = normalized.row(i);
        for j in 0..classes {
            let mut best = f64::NEG_INFINITY;
            let mut best_k = 0;
            for k in 0..centers.sub_centers() {
                let dot: f64 = x.iter().zip(centers.center(j, k)).map(|(a, b)| a * b).sum();
                if dot > best {
                    best = dot;
                    best_k = k;
                }
            }
            cos.data_mut()[i * classes + j] = best;
            selected[i * classes + j] = best_k;
        }
    }
    Ok(CosineLogits {
        cos,
        selected,
        normalized,
        norms,
    })
}

/// Gradients w.r.t. the raw embeddings and the center bank. Only the selected
/// sub-center of each `(row, class)` receives gradient.
pub fn cosine_logits_backward(
    grad_cos: &Tensor,
    logits: &CosineLogits,
    centers: &ClassCenters,
) -> Result<(Tensor, Tensor)> {
    if grad_cos.shape() != logits.cos.shape() {
        return Err(Error::Dimension(format!(
            "logit gradient has shape {:?}, expected {:?}",
            grad_cos.shape(),
            logits.cos.shape()
        )));
    }
    let (n, e) = logits.normalized.dims2()?;
    let classes = centers.classes();
    let subs = centers.sub_centers();
    let mut grad_emb = Tensor::zeros(&[n, e]);
    let mut grad_centers = Tensor::zeros(centers.tensor().shape());
    for i in 0..n {
        let x = logits.normalized.row(i);
        let mut grad_unit = vec![0.0; e];
        for j in 0..classes {
            let g = grad_cos.at2(i, j);
            if g == 0.0 {
                continue;
            }
            let k = logits.selected[i * classes + j];
            let w = centers.center(j, k);
            for (gu, wv) in grad_unit.iter_mut().zip(w) {
                *gu += g * wv;
            }
            let start = (j * subs + k) * e;
            for (gw, xv) in grad_centers.data_mut()[start..start + e].iter_mut().zip(x) {
                *gw += g * xv;
            }
        }
        // d(x/‖x‖) = (I − x̂x̂ᵀ)/‖x‖
        let radial: f64 = x.iter().zip(&grad_unit).map(|(a, b)| a * b).sum();
        let norm = logits.norms[i];
        for (out, (gu, xv)) in grad_emb.row_mut(i).iter_mut().zip(grad_unit.iter().zip(x)) {
            *out = (gu - xv * radial) / norm;
        }
    }
    Ok((grad_emb, grad_centers))
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Mean over rows.
    pub loss: f64,
    /// `∂loss/∂cos`, `N × C`.
    pub grad: Tensor,
    pub warnings: Vec<String>,
}

struct Checked {
    n: usize,
    classes: usize,
    k: usize,
    warnings: Vec<String>,
}

fn check_loss_inputs(
    cos: &Tensor,
    labels: &[usize],
    config: &LossConfig,
    m_current: f64,
) -> Result<Checked> {
    config.validate()?;
    let (n, classes) = cos.dims2()?;
    if classes != config.classes {
        return Err(Error::Dimension(format!(
            "logits have {classes} classes, loss is configured for {}",
            config.classes
        )));
    }
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Input(format!(
            "label {y} of row {i} is outside [0, {classes})"
        )));
    }
    if !(m_current >= 0.0 && m_current <= config.margin + 1e-12) {
        return Err(Error::Input(format!(
            "current margin {m_current} outside [0, {}]",
            config.margin
        )));
    }
    let mut warnings = Vec::new();
    let k = config.effective_k();
    if k < config.k_top {
        warnings.push(format!(
            "k_top = {} exceeds the {} negative classes; clamped to {k}",
            config.k_top,
            classes - 1
        ));
    }
    Ok(Checked {
        n,
        classes,
        k,
        warnings,
    })
}

/// Marks the `k` negatives with the highest cosine (ties toward lower index).
fn top_negatives(row: &[f64], label: usize, k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| j != label).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut mask = vec![false; row.len()];
    for &j in order.iter().take(k) {
        mask[j] = true;
    }
    mask
}

/// Penalized negative logit `φ` and `dφ/dcos`.
fn penalized(c: f64, m_prime: f64, mode: PenaltyMode) -> (f64, f64) {
    match mode {
        PenaltyMode::Additive => (c + m_prime, 1.0),
        PenaltyMode::Angular => {
            let lo = -1.0 + ANGULAR_CLAMP;
            let hi = 1.0 - ANGULAR_CLAMP;
            let clamped = c.clamp(lo, hi);
            let theta = clamped.acos();
            let value = (theta - m_prime).cos();
            let slope = if c > lo && c < hi {
                (theta - m_prime).sin() / theta.sin()
            } else {
                0.0
            };
            (value, slope)
        }
    }
}

fn effective_margin_prime(config: &LossConfig, m_current: f64) -> f64 {
    if config.ramp_margin_prime && config.margin > 0.0 {
        config.margin_prime * (m_current / config.margin).min(1.0)
    } else {
        config.margin_prime
    }
}

/// Mean negative log-softmax of `s·(cos_y − m)` against `s·φ_j`, with
/// `φ_j = cos_j + m′` (or `cos(θ_j − m′)`) on the `k_top` nearest negatives
/// and `φ_j = cos_j` elsewhere. TopK membership is constant in the gradient.
pub fn inter_topk_loss(
    cos: &Tensor,
    labels: &[usize],
    config: &LossConfig,
    m_current: f64,
) -> Result<LossOutput> {
    let Checked {
        n,
        classes,
        k,
        warnings,
    } = check_loss_inputs(cos, labels, config, m_current)?;
    let s = config.scale;
    let m_prime = effective_margin_prime(config, m_current);
    let mut grad = Tensor::zeros(&[n, classes]);
    let mut total = 0.0;
    let mut logits = vec![0.0; classes];
    let mut slopes = vec![0.0; classes];
    for (i, &y) in labels.iter().enumerate() {
        let row = cos.row(i);
        let penal = top_negatives(row, y, k);
        for j in 0..classes {
            let (phi, slope) = if j == y {
                (row[j] - m_current, 1.0)
            } else if penal[j] {
                penalized(row[j], m_prime, config.penalty_mode)
            } else {
                (row[j], 1.0)
            };
            logits[j] = s * phi;
            slopes[j] = s * slope;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let log_norm = max + sum.ln();
        total += log_norm - logits[y];
        let g = grad.row_mut(i);
        for j in 0..classes {
            let p = (logits[j] - log_norm).exp();
            let target = if j == y { 1.0 } else { 0.0 };
            g[j] = (p - target) * slopes[j] / n as f64;
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {loss}")));
    }
    Ok(LossOutput {
        loss,
        grad,
        warnings,
    })
}

/// The same loss written with the margin moved onto the negatives:
/// `−log e^{s·cos_y} / (e^{s·cos_y} + Σ_j e^{s·(φ_j + m)})`.
pub fn loss_equivalent_form(
    cos: &Tensor,
    labels: &[usize],
    config: &LossConfig,
    m_current: f64,
) -> Result<f64> {
    let Checked { n, classes, k, .. } = check_loss_inputs(cos, labels, config, m_current)?;
    let s = config.scale;
    let m_prime = effective_margin_prime(config, m_current);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = cos.row(i);
        let penal = top_negatives(row, y, k);
        let anchor = s * row[y];
        let ratio: f64 = (0..classes)
            .filter(|&j| j != y)
            .map(|j| {
                let phi = if penal[j] {
                    penalized(row[j], m_prime, config.penalty_mode).0
                } else {
                    row[j]
                };
                (s * (phi + m_current) - anchor).exp()
            })
            .sum();
        total += ratio.ln_1p();
    }
    Ok(total / n as f64)
}

/// `m + k·m′/(C − 1)`: the margin averaged over all negative classes.
pub fn averaged_margin(m: f64, m_prime: f64, k: usize, classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::Input(format!("need at least 2 classes, got {classes}")));
    }
    if k > classes - 1 {
        return Err(Error::Input(format!(
            "k = {k} outside [0, {}]",
            classes - 1
        )));
    }
    Ok(m + m_prime * (k as f64 / (classes - 1) as f64))
}

/// Linear margin warmup from 0 to `m_final`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginSchedule {
    pub m_final: f64,
    pub warmup_steps: usize,
}

impl MarginSchedule {
    pub fn new(m_final: f64, warmup_steps: usize) -> Result<Self> {
        if warmup_steps == 0 {
            return Err(Error::config("train.margin_warmup_steps", "must be positive"));
        }
        Ok(Self {
            m_final,
            warmup_steps,
        })
    }

    pub fn at(&self, step: usize) -> f64 {
        margin_schedule(step, self)
    }
}

pub fn margin_schedule(step: usize, schedule: &MarginSchedule) -> f64 {
    if step >= schedule.warmup_steps {
        schedule.m_final
    } else {
        schedule.m_final * step as f64 / schedule.warmup_steps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(classes: usize, m_prime: f64, k_top: usize) -> LossConfig {
        LossConfig {
            margin_prime: m_prime,
            k_top,
            ..LossConfig::am_softmax(classes)
        }
    }

    #[test]
    fn hand_case_two_classes() {
        let c = LossConfig {
            scale: 1.0,
            ..cfg(2, 0.0, 0)
        };
        let cos = Tensor::from_rows(&[[0.9, 0.5]]).unwrap();
        let out = inter_topk_loss(&cos, &[0], &c, 0.2).unwrap();
        let expected = -((0.7f64).exp() / ((0.7f64).exp() + (0.5f64).exp())).ln();
        assert!((out.loss - expected).abs() < 1e-15);
        let eq7 = loss_equivalent_form(&cos, &[0], &c, 0.2).unwrap();
        assert!((eq7 - expected).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        let cos = Tensor::zeros(&[1, 3]);
        let err = inter_topk_loss(&cos, &[3], &cfg(3, 0.0, 0), 0.1).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn oversized_k_is_clamped_with_warning() {
        let cos = Tensor::from_rows(&[[0.1, 0.3, -0.2]]).unwrap();
        let big = inter_topk_loss(&cos, &[0], &cfg(3, 0.05, 9), 0.1).unwrap();
        let exact = inter_topk_loss(&cos, &[0], &cfg(3, 0.05, 2), 0.1).unwrap();
        assert_eq!(big.loss, exact.loss);
        assert_eq!(big.warnings.len(), 1);
        assert!(exact.warnings.is_empty());
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let mask = top_negatives(&[0.5, 0.2, 0.5, 0.5], 0, 1);
        assert_eq!(mask, vec![false, false, true, false]);
        let mask = top_negatives(&[0.1, 0.2, 0.2, 0.9], 3, 2);
        assert_eq!(mask, vec![false, true, true, false]);
    }

    #[test]
    fn sub_center_selection() {
        let mut w = vec![0.0; 2 * 3 * 2];
        // class 0: (1,0), (0,1), (-1,0); class 1: (0,-1), (0.6,0.8), (0.6,0.8)
        w[..6].copy_from_slice(&[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        w[6..].copy_from_slice(&[0.0, -1.0, 0.6, 0.8, 0.6, 0.8]);
        let centers = ClassCenters::from_tensor(Tensor::new(vec![2, 3, 2], w).unwrap()).unwrap();
        let emb = Tensor::from_rows(&[[0.0, 2.0]]).unwrap();
        let out = cosine_logits(&emb, &centers).unwrap();
        assert_eq!(out.cos.data(), &[1.0, 0.8]);
        // the tie in class 1 goes to the lower sub-center
        assert_eq!(out.selected, vec![1, 1]);
    }

    #[test]
    fn zero_embedding_is_reported_by_row() {
        let centers = ClassCenters::random(3, 2, 4, 0).unwrap();
        let emb = Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0; 4]]).unwrap();
        match cosine_logits(&emb, &centers) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn random_centers_are_unit_norm() {
        let c = ClassCenters::random(5, 3, 7, 42).unwrap();
        assert!(c.max_norm_deviation() < 1e-12);
        assert_eq!(c, ClassCenters::random(5, 3, 7, 42).unwrap());
    }

    #[test]
    fn averaged_margin_values() {
        assert_eq!(averaged_margin(0.2, 0.06, 0, 10).unwrap(), 0.2);
        assert_eq!(averaged_margin(0.2, 0.06, 9, 10).unwrap(), 0.2 + 0.06);
        let v = averaged_margin(0.2, 0.06, 5, 17982).unwrap();
        assert!((v - (0.2 + 0.3 / 17981.0)).abs() < 1e-15);
        assert!((v - 0.200_016_68).abs() < 1e-8);
        assert!(averaged_margin(0.2, 0.06, 10, 10).is_err());
        assert!(averaged_margin(0.2, 0.06, 0, 1).is_err());
    }

    #[test]
    fn margin_ramp() {
        let s = MarginSchedule::new(0.2, 100).unwrap();
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(50), 0.1);
        assert_eq!(s.at(100), 0.2);
        assert_eq!(s.at(10_000), 0.2);
        assert!(MarginSchedule::new(0.2, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::inter_topk(20).validate().is_ok());
        assert!(LossConfig { margin: 1.0, ..LossConfig::am_softmax(4) }.validate().is_err());
        assert!(LossConfig { classes: 1, ..LossConfig::am_softmax(4) }.validate().is_err());
        assert!(LossConfig { sub_centers: 0, ..LossConfig::am_softmax(4) }.validate().is_err());
        assert!(LossConfig { scale: 0.0, ..LossConfig::am_softmax(4) }.validate().is_err());
    }
}
