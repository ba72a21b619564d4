//! Synthetic multi-speaker frame sequences and their on-disk layout.
//!
//! Every speaker gets a Gaussian center in feature space; every frame of every
//! utterance is that center plus independent Gaussian noise. Held-out
//! utterances of the same speakers form a balanced verification trial list.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Trial, TrialList};
use crate::tensor::Tensor;

const FEATURES_MAGIC: &[u8; 8] = b"MQFEATS1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpeakerSpec {
    pub num_speakers: usize,
    /// Training utterances per speaker.
    pub utterances_per_speaker: usize,
    /// Held-out utterances per speaker used for validation and trials.
    pub heldout_per_speaker: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub center_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpeakerSpec {
    fn default() -> Self {
        Self {
            num_speakers: 20,
            utterances_per_speaker: 24,
            heldout_per_speaker: 6,
            frames: 20,
            feature_dim: 16,
            center_scale: 1.0,
            noise_scale: 0.5,
            seed: 2021,
        }
    }
}

impl SyntheticSpeakerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::Input(format!(
                "need at least 2 speakers, got {}",
                self.num_speakers
            )));
        }
        let counts = [
            ("data.utterances_per_speaker", self.utterances_per_speaker),
            ("data.frames", self.frames),
            ("data.feature_dim", self.feature_dim),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.heldout_per_speaker < 2 {
            return Err(Error::config(
                "data.heldout_per_speaker",
                "need at least 2 to form target trials",
            ));
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return Err(Error::config("data.center_scale", "must be non-negative"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("data.noise_scale", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub split: Split,
    /// `frames × feature_dim`.
    pub features: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpeakerSpec,
    pub utterances: Vec<Utterance>,
    pub trials: TrialList,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn index(&self) -> BTreeMap<&str, &Utterance> {
        self.utterances.iter().map(|u| (u.id.as_str(), u)).collect()
    }

    /// Writes `meta.json`, `features.bin` and `trials.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = Meta {
            spec: self.spec.clone(),
            utterances: self
                .utterances
                .iter()
                .map(|u| MetaEntry {
                    id: u.id.clone(),
                    speaker: u.speaker,
                    split: u.split,
                })
                .collect(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;

        let (frames, dim) = (self.spec.frames, self.spec.feature_dim);
        let mut bytes = Vec::with_capacity(32 + self.utterances.len() * frames * dim * 8);
        bytes.extend_from_slice(FEATURES_MAGIC);
        for n in [self.utterances.len(), frames, dim] {
            bytes.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for u in &self.utterances {
            for v in u.features.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join("features.bin"), bytes)?;
        self.trials.write(&dir.join("trials.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Input(format!(
                "dataset directory {} does not exist",
                dir.display()
            )));
        }
        let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let bytes = fs::read(dir.join("features.bin"))?;
        if bytes.len() < 32 || &bytes[..8] != FEATURES_MAGIC {
            return Err(Error::format("features.bin", "bad magic"));
        }
        let header = |i: usize| {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[8 + 8 * i..16 + 8 * i]);
            u64::from_le_bytes(b) as usize
        };
        let (count, frames, dim) = (header(0), header(1), header(2));
        if count != meta.utterances.len() || frames != meta.spec.frames || dim != meta.spec.feature_dim {
            return Err(Error::format(
                "features.bin",
                "header disagrees with meta.json",
            ));
        }
        let per = frames * dim;
        if bytes.len() != 32 + count * per * 8 {
            return Err(Error::format("features.bin", "truncated payload"));
        }
        let values: Vec<f64> = bytes[32..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let utterances = meta
            .utterances
            .into_iter()
            .zip(values.chunks(per))
            .map(|(m, chunk)| {
                Ok(Utterance {
                    id: m.id,
                    speaker: m.speaker,
                    split: m.split,
                    features: Tensor::new(vec![frames, dim], chunk.to_vec())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: meta.spec,
            utterances,
            trials: TrialList::read(&dir.join("trials.txt"))?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: SyntheticSpeakerSpec,
    utterances: Vec<MetaEntry>,
}

#[derive(Serialize, Deserialize)]
struct MetaEntry {
    id: String,
    speaker: usize,
    split: Split,
}

pub fn generate_dataset(spec: &SyntheticSpeakerSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let centers: Vec<Vec<f64>> = (0..spec.num_speakers)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| spec.center_scale * gauss(&mut rng))
                .collect()
        })
        .collect();

    let mut utterances = Vec::new();
    for (speaker, center) in centers.iter().enumerate() {
        let splits = std::iter::repeat_n(Split::Train, spec.utterances_per_speaker)
            .chain(std::iter::repeat_n(Split::Heldout, spec.heldout_per_speaker));
        for (u, split) in splits.enumerate() {
            let mut data = Vec::with_capacity(spec.frames * spec.feature_dim);
            for _ in 0..spec.frames {
                for &c in center {
                    data.push(c + spec.noise_scale * gauss(&mut rng));
                }
            }
            utterances.push(Utterance {
                id: format!("spk{speaker:03}-utt{u:03}"),
                speaker,
                split,
                features: Tensor::new(vec![spec.frames, spec.feature_dim], data)?,
            });
        }
    }

    let trials = balanced_trials(&utterances, &mut rng);
    Ok(Dataset {
        spec: spec.clone(),
        utterances,
        trials,
    })
}

/// Every same-speaker held-out pair as a target trial, and as many
/// cross-speaker nontarget trials sharing the same enrollment utterances.
fn balanced_trials(utterances: &[Utterance], rng: &mut ChaCha8Rng) -> TrialList {
    let heldout: Vec<&Utterance> = utterances.iter().filter(|u| u.split == Split::Heldout).collect();
    let mut entries = Vec::new();
    for (i, a) in heldout.iter().enumerate() {
        for b in &heldout[i + 1..] {
            if a.speaker != b.speaker {
                continue;
            }
            entries.push(Trial {
                enroll: a.id.clone(),
                test: b.id.clone(),
                target: true,
            });
            let others: Vec<&&Utterance> = heldout.iter().filter(|u| u.speaker != a.speaker).collect();
            let other = others[rng.random_range(0..others.len())];
            entries.push(Trial {
                enroll: a.id.clone(),
                test: other.id.clone(),
                target: false,
            });
        }
    }
    entries.shuffle(rng);
    TrialList { entries }
}

/// Held-out accuracy of classifying each utterance's mean frame by the nearest
/// per-speaker centroid of the training utterances.
pub fn nearest_centroid_accuracy(dataset: &Dataset) -> f64 {
    let dim = dataset.spec.feature_dim;
    let mean_frame = |u: &Utterance| -> Vec<f64> {
        let (t, _) = u.features.dims2().unwrap();
        let mut m = vec![0.0; dim];
        for i in 0..t {
            for (acc, v) in m.iter_mut().zip(u.features.row(i)) {
                *acc += v / t as f64;
            }
        }
        m
    };
    let mut centroids = vec![vec![0.0; dim]; dataset.spec.num_speakers];
    let mut counts = vec![0usize; dataset.spec.num_speakers];
    for u in dataset.split(Split::Train) {
        for (acc, v) in centroids[u.speaker].iter_mut().zip(mean_frame(u)) {
            *acc += v;
        }
        counts[u.speaker] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for u in dataset.split(Split::Heldout) {
        let m = mean_frame(u);
        let predicted = centroids
            .iter()
            .enumerate()
            .map(|(s, c)| (s, c.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(s, _)| s)
            .unwrap();
        correct += usize::from(predicted == u.speaker);
        total += 1;
    }
    correct as f64 / total as f64
}
