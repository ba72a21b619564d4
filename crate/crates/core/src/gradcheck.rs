//! Central finite-difference oracle for analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{cosine_logits, cosine_logits_backward, inter_topk_loss, ClassCenters, LossConfig, PenaltyMode};
use crate::pooling::{init_pooling_params, mqmha_backward, mqmha_forward, PoolingConfig, PoolingParams};
use crate::tensor::{matmul, matmul_vjp, relu, relu_vjp, softmax_axis, softmax_axis_vjp, Tensor};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// A scalar-valued function with an analytic gradient.
pub trait Differentiable {
    fn value(&self, x: &Tensor) -> Result<f64>;
    fn gradient(&self, x: &Tensor) -> Result<Tensor>;
}

/// Adapter turning a pair of closures into a [`Differentiable`].
pub struct FnPair<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Differentiable for FnPair<V, G>
where
    V: Fn(&Tensor) -> Result<f64>,
    G: Fn(&Tensor) -> Result<Tensor>,
{
    fn value(&self, x: &Tensor) -> Result<f64> {
        (self.value)(x)
    }

    fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        (self.gradient)(x)
    }
}

/// Max over coordinates of `|analytic − central| / max(1, |analytic|)`.
pub fn finite_diff_check<F: Differentiable + ?Sized>(f: &F, x: &Tensor, step: f64) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Oracle(format!("step must be positive, got {step}")));
    }
    let analytic = f.gradient(x)?;
    if analytic.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} differs from input shape {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f.value(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f.value(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite function value while perturbing coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Distance from a nondifferentiable point below which an instance is redrawn.
pub const TIE_MARGIN: f64 = 1e-3;

/// Outcome of one family of checks in [`run_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// The pooling configurations the suite covers, with their row names.
pub fn pooling_suite_configs() -> Vec<(&'static str, PoolingConfig)> {
    vec![
        ("pooling SA (h=1, q=1, n=2)", PoolingConfig::sa(8, 6)),
        ("pooling MHA (h=4, q=1, n=1)", PoolingConfig::mha(8, 4)),
        ("pooling AS (h=1, q=3, n=2)", PoolingConfig::attentive(8, 3, 6)),
        ("pooling VSA (h=1, q=3, n=2, unique)", PoolingConfig::vector_attentive(8, 3, 6)),
        ("pooling MQMHA (h=16, q=4, n=1)", PoolingConfig::new(32, 16, 4, 1)),
    ]
}

fn gaussian_like(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::uniform(shape, scale, rng)
}

fn worst<I: Iterator<Item = Result<f64>>>(errs: I) -> Result<f64> {
    errs.into_iter().try_fold(0.0f64, |acc, e| Ok(acc.max(e?)))
}

fn check_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = gaussian_like(rng, &[3, 4], 1.0);
    let b = gaussian_like(rng, &[4, 2], 1.0);
    let r = gaussian_like(rng, &[3, 2], 1.0);
    let split = |x: &Tensor| -> Result<(Tensor, Tensor)> {
        Ok((
            Tensor::new(vec![3, 4], x.data()[..12].to_vec())?,
            Tensor::new(vec![4, 2], x.data()[12..].to_vec())?,
        ))
    };
    let f = FnPair {
        value: |x: &Tensor| {
            let (a, b) = split(x)?;
            matmul(&a, &b)?.dot(&r)
        },
        gradient: |x: &Tensor| {
            let (a, b) = split(x)?;
            let (ga, gb) = matmul_vjp(&a, &b, &r)?;
            Tensor::vector(ga.data().iter().chain(gb.data()).copied().collect())
        },
    };
    let x = Tensor::vector(a.data().iter().chain(b.data()).copied().collect())?;
    finite_diff_check(&f, &x, DEFAULT_STEP)
}

fn check_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = gaussian_like(rng, &[5], 2.0);
    let r = gaussian_like(rng, &[5], 1.0);
    let f = FnPair {
        value: |x: &Tensor| softmax_axis(x, 0)?.dot(&r),
        gradient: |x: &Tensor| softmax_axis_vjp(&softmax_axis(x, 0)?, &r, 0),
    };
    finite_diff_check(&f, &x, DEFAULT_STEP)
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = loop {
        let x = gaussian_like(rng, &[6], 2.0);
        if x.data().iter().all(|v| v.abs() >= TIE_MARGIN) {
            break x;
        }
    };
    let r = gaussian_like(rng, &[6], 1.0);
    let f = FnPair {
        value: |x: &Tensor| relu(x).dot(&r),
        gradient: |x: &Tensor| relu_vjp(x, &r),
    };
    finite_diff_check(&f, &x, DEFAULT_STEP)
}

fn pooling_from_flat(flat: &[f64], template: &PoolingParams) -> Result<PoolingParams> {
    let mut params = template.clone();
    let mut offset = 0;
    for t in params.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    Ok(params)
}

/// True when some two-layer pre-activation sits within [`TIE_MARGIN`] of the
/// relu kink.
fn near_relu_kink(o: &Tensor, params: &PoolingParams, config: &PoolingConfig) -> Result<bool> {
    let dh = config.head_dim();
    for (h, head) in params.heads.iter().enumerate() {
        if let crate::pooling::HeadParams::TwoLayer { w_b, .. } = head {
            let z = matmul(&o.columns(h * dh, (h + 1) * dh)?, w_b)?;
            if z.data().iter().any(|v| v.abs() < TIE_MARGIN) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Checks `⟨r, pool(O; params)⟩` w.r.t. the frames and every parameter.
pub fn check_pooling_instance(config: &PoolingConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (o, params) = loop {
        let frames = rng.random_range(2..=7);
        let o = gaussian_like(rng, &[frames, config.channels], 1.5);
        let params = init_pooling_params(config, rng.random())?;
        if !near_relu_kink(&o, &params, config)? {
            break (o, params);
        }
    };
    let r = gaussian_like(rng, &[config.output_len()], 1.0);
    let (t, d) = o.dims2()?;
    let n_o = t * d;
    let unpack = |x: &Tensor| -> Result<(Tensor, PoolingParams)> {
        Ok((
            Tensor::new(vec![t, d], x.data()[..n_o].to_vec())?,
            pooling_from_flat(&x.data()[n_o..], &params)?,
        ))
    };
    let f = FnPair {
        value: |x: &Tensor| {
            let (o, p) = unpack(x)?;
            mqmha_forward(&o, &p, config)?.value.dot(&r)
        },
        gradient: |x: &Tensor| {
            let (o, p) = unpack(x)?;
            let fwd = mqmha_forward(&o, &p, config)?;
            let (go, gp) = mqmha_backward(&r, &fwd.cache)?;
            let mut flat = go.into_data();
            for g in gp.tensors() {
                flat.extend_from_slice(g.data());
            }
            Tensor::vector(flat)
        },
    };
    let mut x = o.data().to_vec();
    for p in params.tensors() {
        x.extend_from_slice(p.data());
    }
    finite_diff_check(&f, &Tensor::vector(x)?, DEFAULT_STEP)
}

/// True when the k-th and (k+1)-th largest negatives of some row are closer
/// than [`TIE_MARGIN`].
fn topk_boundary_tied(cos: &Tensor, labels: &[usize], k: usize) -> bool {
    labels.iter().enumerate().any(|(i, &y)| {
        let mut neg: Vec<f64> = cos.row(i).iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &c)| c).collect();
        neg.sort_by(|a, b| b.total_cmp(a));
        k > 0 && k < neg.len() && neg[k - 1] - neg[k] <= TIE_MARGIN
    })
}

fn random_loss_config(rng: &mut ChaCha8Rng, classes: usize, mode: PenaltyMode) -> LossConfig {
    LossConfig {
        scale: rng.random_range(5.0..=35.0),
        margin: rng.random_range(0.0..0.4),
        margin_prime: rng.random_range(0.0..0.3),
        k_top: rng.random_range(0..classes),
        sub_centers: 1,
        penalty_mode: mode,
        classes,
        ramp_margin_prime: false,
    }
}

/// Checks the loss w.r.t. the cosine matrix.
pub fn check_loss_instance(mode: PenaltyMode, rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=5);
    let classes = rng.random_range(2..=8);
    let config = random_loss_config(rng, classes, mode);
    let m_current = rng.random_range(0.0..=config.margin);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let cos = loop {
        let cos = gaussian_like(rng, &[n, classes], 0.9);
        if !topk_boundary_tied(&cos, &labels, config.effective_k()) {
            break cos;
        }
    };
    let f = FnPair {
        value: |x: &Tensor| Ok(inter_topk_loss(x, &labels, &config, m_current)?.loss),
        gradient: |x: &Tensor| Ok(inter_topk_loss(x, &labels, &config, m_current)?.grad),
    };
    finite_diff_check(&f, &cos, 1e-6)
}

/// Checks the loss composed with sub-center cosine logits w.r.t. the raw
/// embeddings and the center bank.
pub fn check_cosine_loss_instance(mode: PenaltyMode, rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=4);
    let classes = rng.random_range(2..=5);
    let subs = rng.random_range(1..=3);
    let dim = rng.random_range(2..=5);
    let mut config = random_loss_config(rng, classes, mode);
    config.sub_centers = subs;
    let m_current = rng.random_range(0.0..=config.margin);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let (emb, centers) = loop {
        let emb = gaussian_like(rng, &[n, dim], 1.0);
        let centers = ClassCenters::random(classes, subs, dim, rng.random())?;
        let logits = cosine_logits(&emb, &centers)?;
        let sub_tie = (0..n).any(|i| {
            let x = emb.row(i);
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            (0..classes).any(|j| {
                let mut dots: Vec<f64> = (0..subs)
                    .map(|k| x.iter().zip(centers.center(j, k)).map(|(a, b)| a * b).sum::<f64>() / norm)
                    .collect();
                dots.sort_by(|a, b| b.total_cmp(a));
                dots.len() > 1 && dots[0] - dots[1] <= TIE_MARGIN
            })
        });
        let near_pole = logits.cos.data().iter().any(|c| c.abs() > 0.98);
        if !sub_tie && !near_pole && !topk_boundary_tied(&logits.cos, &labels, config.effective_k()) {
            break (emb, centers);
        }
    };
    let n_emb = emb.len();
    let center_shape = centers.tensor().shape().to_vec();
    let unpack = |x: &Tensor| -> Result<(Tensor, ClassCenters)> {
        Ok((
            Tensor::new(vec![n, dim], x.data()[..n_emb].to_vec())?,
            ClassCenters::from_tensor(Tensor::new(center_shape.clone(), x.data()[n_emb..].to_vec())?)?,
        ))
    };
    let f = FnPair {
        value: |x: &Tensor| {
            let (e, c) = unpack(x)?;
            let logits = cosine_logits(&e, &c)?;
            Ok(inter_topk_loss(&logits.cos, &labels, &config, m_current)?.loss)
        },
        gradient: |x: &Tensor| {
            let (e, c) = unpack(x)?;
            let logits = cosine_logits(&e, &c)?;
            let out = inter_topk_loss(&logits.cos, &labels, &config, m_current)?;
            let (ge, gc) = cosine_logits_backward(&out.grad, &logits, &c)?;
            Tensor::vector(ge.data().iter().chain(gc.data()).copied().collect())
        },
    };
    let x = Tensor::vector(emb.data().iter().chain(centers.tensor().data()).copied().collect())?;
    finite_diff_check(&f, &x, 1e-6)
}

/// Runs every gradient family on `instances` seeded random instances each.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    let mut family = |name: &str, tolerance: f64, check: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<f64>| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(name));
        let max = worst((0..instances).map(|_| check(&mut rng)))?;
        rows.push(SuiteRow {
            name: name.to_owned(),
            instances,
            max_rel_error: max,
            tolerance,
        });
        Ok(())
    };
    family("matmul", 1e-7, &mut check_matmul)?;
    family("softmax_axis", 1e-6, &mut check_softmax)?;
    family("relu", 1e-6, &mut check_relu)?;
    for (name, config) in pooling_suite_configs() {
        family(name, 1e-6, &mut |rng| check_pooling_instance(&config, rng))?;
    }
    family("inter-topK loss (additive)", 1e-6, &mut |rng| check_loss_instance(PenaltyMode::Additive, rng))?;
    family("inter-topK loss (angular)", 1e-6, &mut |rng| check_loss_instance(PenaltyMode::Angular, rng))?;
    family("sub-center logits + loss (additive)", 1e-6, &mut |rng| {
        check_cosine_loss_instance(PenaltyMode::Additive, rng)
    })?;
    family("sub-center logits + loss (angular)", 1e-6, &mut |rng| {
        check_cosine_loss_instance(PenaltyMode::Angular, rng)
    })?;
    Ok(rows)
}

/// Small stable string hash for deriving per-family seeds.
fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
