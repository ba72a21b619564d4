//! Multi-query multi-head attentive statistics pooling.
//!
//! A `T × d` frame sequence is split along channels into `H` heads of width
//! `d_h = d / H`. Each head scores every frame with `Q` queries through a
//! one- or two-layer attention function, normalizes the scores over time with
//! a softmax, and emits a weighted mean and weighted standard deviation per
//! query. The output is `E_μ ‖ E_σ`, each ordered heads-outer, queries-inner,
//! for a total length of `2·d·Q`.
//!
//! In the shared weight mode a single weight per frame scales all `d_h`
//! channels of a head; in the unique mode every channel gets its own weight.
//!
//! Special cases reachable through [`PoolingConfig`]:
//!
//! | name | H   | Q   | depth | weights |
//! |------|-----|-----|-------|---------|
//! | SA   | 1   | 1   | 2     | shared  |
//! | MHA  | > 1 | 1   | 1     | shared  |
//! | AS   | 1   | > 1 | 2     | shared  |
//! | VSA  | 1   | > 1 | 2     | unique  |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    matmul, matmul_vjp, relu, relu_vjp, softmax_axis, softmax_axis_vjp, GradPair, Tensor,
};

pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// One weight per frame for all channels of a head (`d_s = 1`).
    Shared,
    /// One weight per frame and channel (`d_s = d_h`).
    Unique,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingConfig {
    /// Input channels `d`.
    pub channels: usize,
    pub heads: usize,
    pub queries: usize,
    /// Attention depth `n`: 1 (linear) or 2 (linear, relu, linear).
    pub depth: usize,
    /// Hidden width `d_k` of the two-layer attention.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_weight_mode")]
    pub weight_mode: WeightMode,
    /// Floor applied to the variance before the square root.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

fn default_weight_mode() -> WeightMode {
    WeightMode::Shared
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl PoolingConfig {
    pub fn new(channels: usize, heads: usize, queries: usize, depth: usize) -> Self {
        Self {
            channels,
            heads,
            queries,
            depth,
            hidden: DEFAULT_HIDDEN,
            weight_mode: WeightMode::Shared,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_weight_mode(mut self, mode: WeightMode) -> Self {
        self.weight_mode = mode;
        self
    }

    /// Single-query, single-head, two-layer attention.
    pub fn sa(channels: usize, hidden: usize) -> Self {
        Self::new(channels, 1, 1, 2).with_hidden(hidden)
    }

    /// Channel-split heads with one linear query each.
    pub fn mha(channels: usize, heads: usize) -> Self {
        Self::new(channels, heads, 1, 1)
    }

    /// Several two-layer queries over the whole feature.
    pub fn attentive(channels: usize, queries: usize, hidden: usize) -> Self {
        Self::new(channels, 1, queries, 2).with_hidden(hidden)
    }

    /// Like [`PoolingConfig::attentive`] with per-channel weights.
    pub fn vector_attentive(channels: usize, queries: usize, hidden: usize) -> Self {
        Self::attentive(channels, queries, hidden).with_weight_mode(WeightMode::Unique)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("pooling.channels", "must be positive"));
        }
        if self.heads == 0 {
            return Err(Error::config("pooling.heads", "must be positive"));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(
                "pooling.heads",
                format!(
                    "{} heads do not divide {} channels",
                    self.heads, self.channels
                ),
            ));
        }
        if self.queries == 0 {
            return Err(Error::config("pooling.queries", "must be positive"));
        }
        if !matches!(self.depth, 1 | 2) {
            return Err(Error::config(
                "pooling.depth",
                format!("must be 1 or 2, got {}", self.depth),
            ));
        }
        if self.depth == 2 && self.hidden == 0 {
            return Err(Error::config("pooling.hidden", "must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("pooling.epsilon", "must be positive and finite"));
        }
        Ok(())
    }

    /// Channels per head, `d_h`.
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Attention weights per frame and query, `d_s`.
    pub fn weight_width(&self) -> usize {
        match self.weight_mode {
            WeightMode::Shared => 1,
            WeightMode::Unique => self.head_dim(),
        }
    }

    /// `2·d·Q`.
    pub fn output_len(&self) -> usize {
        2 * self.channels * self.queries
    }

    /// Row label in the ablation tables, e.g. `q=4, h=16, n=1, d_s=1`.
    pub fn label(&self) -> String {
        let ds = match self.weight_mode {
            WeightMode::Shared => "1",
            WeightMode::Unique => "d_h",
        };
        format!(
            "q={}, h={}, n={}, d_s={}",
            self.queries, self.heads, self.depth, ds
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeadParams {
    /// `w_a: d_h × (Q·d_s)`.
    Linear { w_a: Tensor },
    /// `w_b: d_h × d_k` shared by the head's queries, `w_c: d_k × (Q·d_s)`.
    TwoLayer { w_b: Tensor, w_c: Tensor },
}

impl HeadParams {
    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            HeadParams::Linear { w_a } => vec![w_a],
            HeadParams::TwoLayer { w_b, w_c } => vec![w_b, w_c],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            HeadParams::Linear { w_a } => vec![w_a],
            HeadParams::TwoLayer { w_b, w_c } => vec![w_b, w_c],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingParams {
    pub heads: Vec<HeadParams>,
}

impl PoolingParams {
    /// All-zero parameters, which make every attention weight `1/T`.
    pub fn zeros(config: &PoolingConfig) -> Result<Self> {
        Self::build(config, Tensor::zeros)
    }

    fn build(config: &PoolingConfig, mut make: impl FnMut(&[usize]) -> Tensor) -> Result<Self> {
        config.validate()?;
        let dh = config.head_dim();
        let cols = config.queries * config.weight_width();
        let heads = (0..config.heads)
            .map(|_| match config.depth {
                1 => HeadParams::Linear {
                    w_a: make(&[dh, cols]),
                },
                _ => HeadParams::TwoLayer {
                    w_b: make(&[dh, config.hidden]),
                    w_c: make(&[config.hidden, cols]),
                },
            })
            .collect();
        Ok(Self { heads })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.heads.iter().flat_map(HeadParams::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.heads.iter_mut().flat_map(HeadParams::tensors_mut).collect()
    }

    /// Checks that the stored matrices have the shapes `config` implies.
    pub fn check(&self, config: &PoolingConfig) -> Result<()> {
        let expected = Self::zeros(config)?;
        let ok = self.heads.len() == expected.heads.len()
            && self
                .tensors()
                .iter()
                .zip(expected.tensors())
                .all(|(a, b)| a.shape() == b.shape())
            && self.tensors().len() == expected.tensors().len();
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "pooling parameters do not match config {}",
                config.label()
            )))
        }
    }
}

/// Glorot-uniform initialization, deterministic per seed.
pub fn init_pooling_params(config: &PoolingConfig, seed: u64) -> Result<PoolingParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PoolingParams::build(config, |shape| {
        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        Tensor::uniform(shape, bound, &mut rng)
    })
}

#[derive(Debug, Clone)]
struct HeadCache {
    input: Tensor,
    pre_act: Option<Tensor>,
    hidden: Option<Tensor>,
    /// `T × (Q·d_s)`, columns sum to one.
    weights: Tensor,
    /// Indexed `q·d_h + c`.
    mean: Vec<f64>,
    var: Vec<f64>,
    std: Vec<f64>,
}

/// Forward intermediates of [`mqmha_forward`].
#[derive(Debug, Clone)]
pub struct PoolingCache {
    config: PoolingConfig,
    params: PoolingParams,
    frames: usize,
    heads: Vec<HeadCache>,
}

fn check_input(o: &Tensor, config: &PoolingConfig) -> Result<usize> {
    let (t, d) = o.dims2()?;
    if t == 0 {
        return Err(Error::EmptyInput("pooling needs at least one frame".into()));
    }
    if d != config.channels {
        return Err(Error::Dimension(format!(
            "frames have {d} channels, pooling expects {}",
            config.channels
        )));
    }
    Ok(t)
}

struct HeadScores {
    input: Tensor,
    pre_act: Option<Tensor>,
    hidden: Option<Tensor>,
    weights: Tensor,
}

fn head_scores(o: &Tensor, head: &HeadParams, h: usize, dh: usize) -> Result<HeadScores> {
    let input = o.columns(h * dh, (h + 1) * dh)?;
    let (scores, pre_act, hidden) = match head {
        HeadParams::Linear { w_a } => (matmul(&input, w_a)?, None, None),
        HeadParams::TwoLayer { w_b, w_c } => {
            let z = matmul(&input, w_b)?;
            let a = relu(&z);
            (matmul(&a, w_c)?, Some(z), Some(a))
        }
    };
    let weights = softmax_axis(&scores, 0)?;
    Ok(HeadScores {
        input,
        pre_act,
        hidden,
        weights,
    })
}

/// Attention weights as a `T × H × Q × d_s` tensor; every `(h, q, s)` slice
/// sums to one over time.
pub fn attention_weights(o: &Tensor, params: &PoolingParams, config: &PoolingConfig) -> Result<Tensor> {
    config.validate()?;
    params.check(config)?;
    let t = check_input(o, config)?;
    let dh = config.head_dim();
    let cols = config.queries * config.weight_width();
    let mut out = Tensor::zeros(&[t, config.heads, config.queries, config.weight_width()]);
    for (h, head) in params.heads.iter().enumerate() {
        let scores = head_scores(o, head, h, dh)?;
        for ti in 0..t {
            for col in 0..cols {
                out.data_mut()[(ti * config.heads + h) * cols + col] = scores.weights.at2(ti, col);
            }
        }
    }
    Ok(out)
}

/// Pools `o: T × d` into a `2·d·Q` vector.
pub fn mqmha_forward(
    o: &Tensor,
    params: &PoolingParams,
    config: &PoolingConfig,
) -> Result<GradPair<PoolingCache>> {
    config.validate()?;
    params.check(config)?;
    let t = check_input(o, config)?;
    let dh = config.head_dim();
    let q_count = config.queries;
    let unique = config.weight_mode == WeightMode::Unique;
    let half = config.channels * q_count;
    let mut out = vec![0.0; 2 * half];
    let mut heads = Vec::with_capacity(config.heads);

    for (h, head) in params.heads.iter().enumerate() {
        let HeadScores {
            input,
            pre_act,
            hidden,
            weights,
        } = head_scores(o, head, h, dh)?;
        let ds = config.weight_width();
        let mut mean = vec![0.0; q_count * dh];
        let mut var = vec![0.0; q_count * dh];
        let mut std = vec![0.0; q_count * dh];
        for q in 0..q_count {
            for c in 0..dh {
                let col = q * ds + if unique { c } else { 0 };
                let mut mu = 0.0;
                let mut second = 0.0;
                for ti in 0..t {
                    let w = weights.at2(ti, col);
                    let x = input.at2(ti, c);
                    mu += w * x;
                    second += w * x * x;
                }
                let v = second - mu * mu;
                let s = v.max(config.epsilon).sqrt();
                let k = q * dh + c;
                mean[k] = mu;
                var[k] = v;
                std[k] = s;
                let idx = (h * q_count + q) * dh + c;
                out[idx] = mu;
                out[half + idx] = s;
            }
        }
        heads.push(HeadCache {
            input,
            pre_act,
            hidden,
            weights,
            mean,
            var,
            std,
        });
    }

    Ok(GradPair {
        value: Tensor::vector(out)?,
        cache: PoolingCache {
            config: config.clone(),
            params: params.clone(),
            frames: t,
            heads,
        },
    })
}

/// Exact gradients of [`mqmha_forward`] w.r.t. the frames and the parameters.
pub fn mqmha_backward(grad: &Tensor, cache: &PoolingCache) -> Result<(Tensor, PoolingParams)> {
    let config = &cache.config;
    if grad.shape() != [config.output_len()] {
        return Err(Error::Dimension(format!(
            "pooling gradient has shape {:?}, expected [{}]",
            grad.shape(),
            config.output_len()
        )));
    }
    let t = cache.frames;
    let dh = config.head_dim();
    let q_count = config.queries;
    let ds = config.weight_width();
    let unique = config.weight_mode == WeightMode::Unique;
    let half = config.channels * q_count;
    let g = grad.data();

    let mut grad_o = Tensor::zeros(&[t, config.channels]);
    let mut grad_heads = Vec::with_capacity(config.heads);

    for (h, (hc, head)) in cache.heads.iter().zip(&cache.params.heads).enumerate() {
        let mut grad_w = Tensor::zeros(&[t, q_count * ds]);
        let mut grad_in = Tensor::zeros(&[t, dh]);
        for q in 0..q_count {
            for c in 0..dh {
                let k = q * dh + c;
                let idx = (h * q_count + q) * dh + c;
                let g_mu = g[idx];
                let g_sigma = g[half + idx];
                // The clamp is flat below epsilon.
                let g_var = if hc.var[k] > config.epsilon {
                    g_sigma / (2.0 * hc.std[k])
                } else {
                    0.0
                };
                let g_mu_total = g_mu - 2.0 * hc.mean[k] * g_var;
                let col = q * ds + if unique { c } else { 0 };
                for ti in 0..t {
                    let x = hc.input.at2(ti, c);
                    let w = hc.weights.at2(ti, col);
                    grad_w.data_mut()[ti * q_count * ds + col] += g_mu_total * x + g_var * x * x;
                    grad_in.data_mut()[ti * dh + c] += w * (g_mu_total + 2.0 * g_var * x);
                }
            }
        }
        let grad_scores = softmax_axis_vjp(&hc.weights, &grad_w, 0)?;
        let grad_head = match head {
            HeadParams::Linear { w_a } => {
                let (g_in, g_wa) = matmul_vjp(&hc.input, w_a, &grad_scores)?;
                grad_in.add_assign(&g_in)?;
                HeadParams::Linear { w_a: g_wa }
            }
            HeadParams::TwoLayer { w_b, w_c } => {
                let (z, a) = match (&hc.pre_act, &hc.hidden) {
                    (Some(z), Some(a)) => (z, a),
                    _ => unreachable!("two-layer head cached without activations"),
                };
                let (g_a, g_wc) = matmul_vjp(a, w_c, &grad_scores)?;
                let g_z = relu_vjp(z, &g_a)?;
                let (g_in, g_wb) = matmul_vjp(&hc.input, w_b, &g_z)?;
                grad_in.add_assign(&g_in)?;
                HeadParams::TwoLayer { w_b: g_wb, w_c: g_wc }
            }
        };
        grad_o.add_columns(h * dh, &grad_in)?;
        grad_heads.push(grad_head);
    }

    Ok((grad_o, PoolingParams { heads: grad_heads }))
}

/// Forward intermediates of [`statistics_pool`].
#[derive(Debug, Clone)]
pub struct StatsCache {
    input: Tensor,
    mean: Vec<f64>,
    var: Vec<f64>,
    std: Vec<f64>,
    epsilon: f64,
}

/// Unweighted mean and floored standard deviation per channel, `[μ ‖ σ]`.
pub fn statistics_pool(o: &Tensor, epsilon: f64) -> Result<GradPair<StatsCache>> {
    let (t, d) = o.dims2()?;
    if t == 0 {
        return Err(Error::EmptyInput("pooling needs at least one frame".into()));
    }
    let inv_t = 1.0 / t as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    let mut std = vec![0.0; d];
    for c in 0..d {
        let mut mu = 0.0;
        let mut second = 0.0;
        for ti in 0..t {
            let x = o.at2(ti, c);
            mu += inv_t * x;
            second += inv_t * x * x;
        }
        mean[c] = mu;
        var[c] = second - mu * mu;
        std[c] = var[c].max(epsilon).sqrt();
    }
    let value = Tensor::vector(mean.iter().chain(&std).copied().collect())?;
    Ok(GradPair {
        value,
        cache: StatsCache {
            input: o.clone(),
            mean,
            var,
            std,
            epsilon,
        },
    })
}

pub fn statistics_pool_vjp(grad: &Tensor, cache: &StatsCache) -> Result<Tensor> {
    let (t, d) = cache.input.dims2()?;
    if grad.shape() != [2 * d] {
        return Err(Error::Dimension(format!(
            "statistics gradient has shape {:?}, expected [{}]",
            grad.shape(),
            2 * d
        )));
    }
    let inv_t = 1.0 / t as f64;
    let mut out = Tensor::zeros(&[t, d]);
    for c in 0..d {
        let g_var = if cache.var[c] > cache.epsilon {
            grad.data()[d + c] / (2.0 * cache.std[c])
        } else {
            0.0
        };
        let g_mu = grad.data()[c] - 2.0 * cache.mean[c] * g_var;
        for ti in 0..t {
            let x = cache.input.at2(ti, c);
            out.data_mut()[ti * d + c] = inv_t * (g_mu + 2.0 * g_var * x);
        }
    }
    Ok(out)
}
