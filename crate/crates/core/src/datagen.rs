//! Synthetic spurious-correlation benchmark.
//!
//! The ideal dataset is balanced across (class, spurious value) groups. The
//! observed dataset keeps each sample independently with a group-dependent
//! probability, which is what creates the spurious correlation.
//!
//! Block means follow a binary code: dimension `r` of the causal block for
//! class `j` has mean `+mu_c` when bit `r mod ceil(log2 C)` of `j` is set and
//! `-mu_c` otherwise. For two classes this is `-mu_c * 1` versus `+mu_c * 1`.
//! The spurious block is coded the same way by the spurious value `k`.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabeledDataset, ObservationMask, RngSeed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub class_count: usize,
    pub spurious_value_count: usize,
    pub samples_per_class: usize,
    pub causal_dim: usize,
    pub spurious_dim: usize,
    pub causal_mean_scale: f64,
    pub causal_noise: f64,
    pub spurious_mean_scale: f64,
    pub spurious_noise: f64,
    /// `observation_probs[j][k]` is the chance a sample of group (j, k) is observed.
    pub observation_probs: Vec<Vec<f64>>,
}

impl SyntheticConfig {
    /// The default benchmark ("bench-v1").
    pub fn bench_v1() -> Self {
        Self {
            class_count: 2,
            spurious_value_count: 2,
            samples_per_class: 5000,
            causal_dim: 20,
            spurious_dim: 2,
            causal_mean_scale: 0.25,
            causal_noise: 1.0,
            spurious_mean_scale: 1.5,
            spurious_noise: 0.5,
            observation_probs: vec![vec![0.95, 0.05], vec![0.05, 0.95]],
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.class_count < 2 {
            return bad(format!("class_count must be >= 2, got {}", self.class_count));
        }
        if self.spurious_value_count < 2 {
            return bad(format!(
                "spurious_value_count must be >= 2, got {}",
                self.spurious_value_count
            ));
        }
        if self.samples_per_class == 0 || self.causal_dim == 0 || self.spurious_dim == 0 {
            return bad("samples_per_class, causal_dim and spurious_dim must be >= 1".into());
        }
        for (name, v) in [
            ("causal_mean_scale", self.causal_mean_scale),
            ("causal_noise", self.causal_noise),
            ("spurious_mean_scale", self.spurious_mean_scale),
            ("spurious_noise", self.spurious_noise),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a positive finite number, got {v}"));
            }
        }
        if self.observation_probs.len() != self.class_count
            || self
                .observation_probs
                .iter()
                .any(|row| row.len() != self.spurious_value_count)
        {
            return bad(format!(
                "observation_probs must be {}x{}",
                self.class_count, self.spurious_value_count
            ));
        }
        Ok(())
    }

    fn validate_probs_in_range(&self) -> Result<()> {
        for row in &self.observation_probs {
            for &p in row {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "observation probability {p} outside (0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn group_count(&self) -> usize {
        self.class_count * self.spurious_value_count
    }

    /// Observation probability of group id `g = j * K + k`.
    pub fn observation_prob(&self, group: usize) -> f64 {
        let k = self.spurious_value_count;
        self.observation_probs[group / k][group % k]
    }
}

fn code_bits(values: usize) -> usize {
    (usize::BITS - (values - 1).leading_zeros()).max(1) as usize
}

fn block_sign(index: usize, dim: usize, bits: usize) -> f64 {
    if (index >> (dim % bits)) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Balanced dataset: `samples_per_class` per class, spurious values spread evenly.
pub fn generate_ideal(config: &SyntheticConfig, seed: RngSeed) -> Result<LabeledDataset> {
    config.validate()?;
    config.validate_probs_in_range()?;
    let c = config.class_count;
    let k = config.spurious_value_count;
    let per_class = config.samples_per_class;
    let n = c * per_class;
    let d = config.causal_dim + config.spurious_dim;
    let class_bits = code_bits(c);
    let spur_bits = code_bits(k);

    let mut rng = seed.rng();
    let causal_noise = Normal::new(0.0, config.causal_noise)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let spurious_noise = Normal::new(0.0, config.spurious_noise)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut x = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let mut row = 0;
    for j in 0..c {
        let mut spurious: Vec<usize> = (0..per_class).map(|t| t % k).collect();
        spurious.shuffle(&mut rng);
        for &s in &spurious {
            let mut r = x.row_mut(row);
            for dim in 0..config.causal_dim {
                r[dim] = block_sign(j, dim, class_bits) * config.causal_mean_scale
                    + causal_noise.sample(&mut rng);
            }
            for dim in 0..config.spurious_dim {
                r[config.causal_dim + dim] = block_sign(s, dim, spur_bits)
                    * config.spurious_mean_scale
                    + spurious_noise.sample(&mut rng);
            }
            labels.push(j);
            groups.push(j * k + s);
            row += 1;
        }
    }
    LabeledDataset::new(
        x,
        labels,
        Some(groups),
        c,
        Some(k),
        config.causal_dim,
        config.spurious_dim,
    )
}

/// Keeps each sample with its group's observation probability.
pub fn subsample_observe(
    ideal: &LabeledDataset,
    config: &SyntheticConfig,
    seed: RngSeed,
) -> Result<(LabeledDataset, ObservationMask)> {
    config.validate()?;
    let groups = ideal.group_ids().ok_or_else(|| {
        Error::InvalidArgument("subsample_observe needs a dataset with group ids".into())
    })?;
    if ideal.class_count() != config.class_count
        || ideal.spurious_value_count() != Some(config.spurious_value_count)
    {
        return Err(Error::InvalidConfig(
            "observation_probs shape does not match the dataset's (C, K)".into(),
        ));
    }
    for row in &config.observation_probs {
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidConfig(
                "observation probabilities must lie in [0, 1]".into(),
            ));
        }
    }
    let mut rng = seed.rng();
    let keep: Vec<bool> = groups
        .iter()
        .map(|&g| rng.random::<f64>() < config.observation_prob(g))
        .collect();
    let mask = ObservationMask::new(keep)
        .map_err(|_| Error::Empty("observation dropped every sample".into()))?;
    let observed = ideal.select(mask.observed())?;
    Ok((observed, mask))
}
