//! Frame encoder → pooling → linear embedding → sub-center cosine head.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{
    cosine_logits, cosine_logits_backward, inter_topk_loss, ClassCenters, LossConfig,
};
use crate::pooling::{
    init_pooling_params, mqmha_backward, mqmha_forward, statistics_pool, statistics_pool_vjp,
    PoolingCache, PoolingConfig, PoolingParams, StatsCache, DEFAULT_EPSILON,
};
use crate::tensor::{add_bias, add_bias_vjp, matmul, matmul_vjp, relu, relu_vjp, Tensor};

const CHECKPOINT_MAGIC: &[u8; 8] = b"MQMHACKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output widths of the per-frame layers; the last one is the pooling
    /// channel count `d`. Hidden layers use relu, the last layer is linear.
    pub widths: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 32],
            embedding_dim: 64,
        }
    }
}

/// The pooling layer: plain statistics or the attentive variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolingChoice {
    Statistics {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    Mqmha(PoolingConfig),
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl PoolingChoice {
    pub fn statistics() -> Self {
        PoolingChoice::Statistics {
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn label(&self) -> String {
        match self {
            PoolingChoice::Statistics { .. } => "no attention (baseline)".to_owned(),
            PoolingChoice::Mqmha(c) => c.label(),
        }
    }

    fn output_len(&self, channels: usize) -> usize {
        match self {
            PoolingChoice::Statistics { .. } => 2 * channels,
            PoolingChoice::Mqmha(c) => c.output_len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub encoder: EncoderConfig,
    pub pooling: PoolingChoice,
    pub loss: LossConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("data.feature_dim", "must be positive"));
        }
        let Some(&channels) = self.encoder.widths.last() else {
            return Err(Error::config("encoder.widths", "need at least one layer"));
        };
        if self.encoder.widths.contains(&0) {
            return Err(Error::config("encoder.widths", "widths must be positive"));
        }
        if self.encoder.embedding_dim == 0 {
            return Err(Error::config("encoder.embedding_dim", "must be positive"));
        }
        match &self.pooling {
            PoolingChoice::Statistics { epsilon } => {
                if epsilon.is_nan() || *epsilon <= 0.0 {
                    return Err(Error::config("pooling.epsilon", "must be positive"));
                }
            }
            PoolingChoice::Mqmha(p) => {
                p.validate()?;
                if p.channels != channels {
                    return Err(Error::config(
                        "pooling.channels",
                        format!("is {} but the encoder emits {channels}", p.channels),
                    ));
                }
            }
        }
        self.loss.validate()
    }

    pub fn channels(&self) -> usize {
        *self.encoder.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[inputs, outputs], bound, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PoolingLayer {
    Statistics { epsilon: f64 },
    Mqmha { config: PoolingConfig, params: PoolingParams },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Vec<Dense>,
    pub pooling: PoolingLayer,
    pub embed: Dense,
    pub centers: ClassCenters,
}

enum PoolCache {
    Statistics(StatsCache),
    Mqmha(PoolingCache),
}

struct FrameCache {
    /// Input of each encoder layer.
    inputs: Vec<Tensor>,
    /// Pre-activation of each hidden layer.
    pre_acts: Vec<Tensor>,
    pooled: Tensor,
    pool: PoolCache,
}

/// Scalar loss with its gradient, one tensor per parameter in
/// [`Model::tensors`] order.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub warnings: Vec<String>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(config.encoder.widths.len());
        let mut inputs = config.feature_dim;
        for &w in &config.encoder.widths {
            encoder.push(Dense::glorot(inputs, w, &mut rng));
            inputs = w;
        }
        let pooling = match &config.pooling {
            PoolingChoice::Statistics { epsilon } => PoolingLayer::Statistics { epsilon: *epsilon },
            PoolingChoice::Mqmha(p) => PoolingLayer::Mqmha {
                config: p.clone(),
                params: init_pooling_params(p, rng.random())?,
            },
        };
        let pooled = config.pooling.output_len(config.channels());
        let embed = Dense::glorot(pooled, config.encoder.embedding_dim, &mut rng);
        let centers = ClassCenters::random(
            config.loss.classes,
            config.loss.sub_centers,
            config.encoder.embedding_dim,
            rng.random(),
        )?;
        Ok(Self {
            config,
            encoder,
            pooling,
            embed,
            centers,
        })
    }

    /// Parameter names, aligned with [`Model::tensors`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.encoder.len() {
            names.push(format!("encoder.{i}.weight"));
            names.push(format!("encoder.{i}.bias"));
        }
        if let PoolingLayer::Mqmha { params, .. } = &self.pooling {
            for (h, head) in params.heads.iter().enumerate() {
                match head {
                    crate::pooling::HeadParams::Linear { .. } => {
                        names.push(format!("pooling.{h}.w_a"));
                    }
                    crate::pooling::HeadParams::TwoLayer { .. } => {
                        names.push(format!("pooling.{h}.w_b"));
                        names.push(format!("pooling.{h}.w_c"));
                    }
                }
            }
        }
        names.push("embed.weight".into());
        names.push("embed.bias".into());
        names.push("centers".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for d in &self.encoder {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        if let PoolingLayer::Mqmha { params, .. } = &self.pooling {
            out.extend(params.tensors());
        }
        out.push(&self.embed.weight);
        out.push(&self.embed.bias);
        out.push(self.centers.tensor());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for d in &mut self.encoder {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        if let PoolingLayer::Mqmha { params, .. } = &mut self.pooling {
            out.extend(params.tensors_mut());
        }
        out.push(&mut self.embed.weight);
        out.push(&mut self.embed.bias);
        out.push(self.centers.tensor_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Tensor {
        let data: Vec<f64> = self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::vector(data).expect("model has parameters")
    }

    pub fn set_flat_params(&mut self, flat: &Tensor) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn frames_forward(&self, features: &Tensor) -> Result<(Tensor, FrameCache)> {
        let (_, f) = features.dims2()?;
        if f != self.config.feature_dim {
            return Err(Error::Dimension(format!(
                "utterance has {f} features, model expects {}",
                self.config.feature_dim
            )));
        }
        let mut inputs = Vec::with_capacity(self.encoder.len());
        let mut pre_acts = Vec::new();
        let mut h = features.clone();
        let last = self.encoder.len() - 1;
        for (i, layer) in self.encoder.iter().enumerate() {
            let z = add_bias(&matmul(&h, &layer.weight)?, &layer.bias)?;
            inputs.push(h);
            h = if i < last {
                let a = relu(&z);
                pre_acts.push(z);
                a
            } else {
                z
            };
        }
        let (pooled, pool) = match &self.pooling {
            PoolingLayer::Statistics { epsilon } => {
                let out = statistics_pool(&h, *epsilon)?;
                (out.value, PoolCache::Statistics(out.cache))
            }
            PoolingLayer::Mqmha { config, params } => {
                let out = mqmha_forward(&h, params, config)?;
                (out.value, PoolCache::Mqmha(out.cache))
            }
        };
        let row = pooled.clone().reshape(vec![1, pooled.len()])?;
        let emb = add_bias(&matmul(&row, &self.embed.weight)?, &self.embed.bias)?;
        Ok((
            emb.reshape(vec![self.config.encoder.embedding_dim])?,
            FrameCache {
                inputs,
                pre_acts,
                pooled: row,
                pool,
            },
        ))
    }

    /// Utterance embedding (no loss head).
    pub fn embed(&self, features: &Tensor) -> Result<Vec<f64>> {
        Ok(self.frames_forward(features)?.0.into_data())
    }

    /// Accumulates parameter gradients of one utterance into `grads`.
    fn frames_backward(&self, g_emb: &[f64], cache: &FrameCache, grads: &mut [Tensor]) -> Result<()> {
        let g_row = Tensor::new(vec![1, g_emb.len()], g_emb.to_vec())?;
        let n_enc = self.encoder.len();
        let n_pool = grads.len() - 2 * n_enc - 3;
        let embed_slot = 2 * n_enc + n_pool;

        let (g_pooled, g_we) = matmul_vjp(&cache.pooled, &self.embed.weight, &g_row)?;
        grads[embed_slot].add_assign(&g_we)?;
        grads[embed_slot + 1].add_assign(&add_bias_vjp(&g_row)?)?;
        let g_pooled = g_pooled.reshape(vec![cache.pooled.len()])?;

        let mut g_h = match (&self.pooling, &cache.pool) {
            (PoolingLayer::Statistics { .. }, PoolCache::Statistics(c)) => statistics_pool_vjp(&g_pooled, c)?,
            (PoolingLayer::Mqmha { .. }, PoolCache::Mqmha(c)) => {
                let (g_o, g_params) = mqmha_backward(&g_pooled, c)?;
                for (slot, g) in grads[2 * n_enc..embed_slot].iter_mut().zip(g_params.tensors()) {
                    slot.add_assign(g)?;
                }
                g_o
            }
            _ => unreachable!("pooling cache does not match layer"),
        };

        for i in (0..n_enc).rev() {
            if i < n_enc - 1 {
                g_h = relu_vjp(&cache.pre_acts[i], &g_h)?;
            }
            let (g_in, g_w) = matmul_vjp(&cache.inputs[i], &self.encoder[i].weight, &g_h)?;
            grads[2 * i].add_assign(&g_w)?;
            grads[2 * i + 1].add_assign(&add_bias_vjp(&g_h)?)?;
            g_h = g_in;
        }
        Ok(())
    }

    /// Batch loss at margin `m_current` and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, batch: &[(&Tensor, usize)], m_current: f64) -> Result<LossGrad> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        let e = self.config.encoder.embedding_dim;
        let mut caches = Vec::with_capacity(batch.len());
        let mut emb = Vec::with_capacity(batch.len() * e);
        for (x, _) in batch {
            let (v, c) = self.frames_forward(x)?;
            emb.extend_from_slice(v.data());
            caches.push(c);
        }
        let emb = Tensor::new(vec![batch.len(), e], emb)?;
        let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
        let logits = cosine_logits(&emb, &self.centers)?;
        let out = inter_topk_loss(&logits.cos, &labels, &self.config.loss, m_current)?;
        let (g_emb, g_centers) = cosine_logits_backward(&out.grad, &logits, &self.centers)?;

        let mut grads: Vec<Tensor> = self.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let last = grads.len() - 1;
        grads[last] = g_centers;
        for (i, cache) in caches.iter().enumerate() {
            self.frames_backward(g_emb.row(i), cache, &mut grads)?;
        }
        Ok(LossGrad {
            loss: out.loss,
            grads,
            warnings: out.warnings,
        })
    }

    /// Batch loss without gradients.
    pub fn loss(&self, batch: &[(&Tensor, usize)], m_current: f64) -> Result<f64> {
        let e = self.config.encoder.embedding_dim;
        let mut emb = Vec::with_capacity(batch.len() * e);
        for (x, _) in batch {
            emb.extend(self.embed(x)?);
        }
        let emb = Tensor::new(vec![batch.len(), e], emb)?;
        let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
        let logits = cosine_logits(&emb, &self.centers)?;
        Ok(inter_topk_loss(&logits.cos, &labels, &self.config.loss, m_current)?.loss)
    }

    /// Writes a checkpoint: magic, version, config JSON, then named tensors.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        let names = self.param_names();
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in names.iter().zip(tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
        let mut model = Model::init(config, 0)?;
        let names = model.param_names();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{count} tensors, config implies {}", names.len()),
            ));
        }
        let mut loaded = Vec::with_capacity(count);
        for expected in &names {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
            if name != expected {
                return Err(Error::format(
                    "checkpoint",
                    format!("expected tensor {expected}, found {name}"),
                ));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            loaded.push(Tensor::new(shape, data)?);
        }
        for (slot, t) in model.tensors_mut().into_iter().zip(loaded) {
            if slot.shape() != t.shape() {
                return Err(Error::format("checkpoint", "tensor shape disagrees with config"));
            }
            *slot = t;
        }
        Ok(model)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(pooling: PoolingChoice) -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            encoder: EncoderConfig {
                widths: vec![5, 4],
                embedding_dim: 6,
            },
            pooling,
            loss: LossConfig::inter_topk(4),
        }
    }

    #[test]
    fn names_align_with_tensors() {
        let cfg = tiny(PoolingChoice::Mqmha(PoolingConfig::new(4, 2, 2, 2).with_hidden(3)));
        let m = Model::init(cfg, 1).unwrap();
        assert_eq!(m.param_names().len(), m.tensors().len());
        assert_eq!(m.param_names()[4], "pooling.0.w_b");
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let cfg = tiny(PoolingChoice::Mqmha(PoolingConfig::new(8, 2, 1, 1)));
        match Model::init(cfg, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "pooling.channels"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        for pooling in [
            PoolingChoice::statistics(),
            PoolingChoice::Mqmha(PoolingConfig::new(4, 2, 3, 1)),
        ] {
            let m = Model::init(tiny(pooling), 9).unwrap();
            m.save(&path).unwrap();
            assert_eq!(Model::load(&path).unwrap(), m);
        }
        std::fs::write(&path, b"garbage").unwrap();
        assert!(Model::load(&path).is_err());
    }

    #[test]
    fn pooling_choice_json() {
        let json = r#"{"kind":"mqmha","channels":32,"heads":16,"queries":4,"depth":1}"#;
        let choice: PoolingChoice = serde_json::from_str(json).unwrap();
        assert_eq!(choice, PoolingChoice::Mqmha(PoolingConfig::new(32, 16, 4, 1)));
        let stats: PoolingChoice = serde_json::from_str(r#"{"kind":"statistics"}"#).unwrap();
        assert_eq!(stats, PoolingChoice::statistics());
    }
}
