//! Synthetic objective metrics built from latent qualities.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crowdmushra_core::analysis::{ObjectiveScoreTable, Orientation};
use crowdmushra_core::config::ExperimentConfig;
use crowdmushra_core::model::{derive_seed, Family, Role};

use crate::simulator::GroundTruth;

/// A fake metric: latent quality plus a per-family bias plus Gaussian noise.
/// Lower-better metrics report `100 - value`, like a distortion measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMetric {
    pub name: String,
    #[serde(default)]
    pub orientation: Orientation,
    #[serde(default)]
    pub noise_sd: f64,
    /// Added to the latent quality of every condition in the family.
    #[serde(default)]
    pub family_bias: BTreeMap<Family, f64>,
}

impl SyntheticMetric {
    /// A metric that undervalues neural codecs by `dnn_bias` points.
    pub fn undervaluing_dnn(name: &str, orientation: Orientation, noise_sd: f64, dnn_bias: f64) -> Self {
        Self {
            name: name.to_owned(),
            orientation,
            noise_sd,
            family_bias: BTreeMap::from([(Family::Dnn, -dnn_bias.abs())]),
        }
    }
}

/// One table per metric, covering every (condition, item) pair except the
/// reference, which objective metrics compare against rather than score.
pub fn synthetic_objective(
    config: &ExperimentConfig,
    truth: &GroundTruth,
    metrics: &[SyntheticMetric],
    seed: u64,
) -> Vec<ObjectiveScoreTable> {
    metrics
        .iter()
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["objective", &m.name]));
            let noise = Normal::new(0.0, m.noise_sd.max(0.0)).expect("finite noise");
            let mut scores = BTreeMap::new();
            for c in config.conditions.iter().filter(|c| c.role != Role::Reference) {
                let bias = m.family_bias.get(&c.family).copied().unwrap_or(0.0);
                for item in &config.items {
                    let v = truth.quality(&c.id, item) + bias + noise.sample(&mut rng);
                    let v = match m.orientation {
                        Orientation::HigherBetter => v,
                        Orientation::LowerBetter => 100.0 - v,
                    };
                    scores.insert((c.id.clone(), item.clone()), v);
                }
            }
            ObjectiveScoreTable {
                metric: m.name.clone(),
                orientation: m.orientation,
                scores,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crowdmushra_core::config::sample_experiment;
    use crowdmushra_core::model::{ConditionId, ItemId};

    #[test]
    fn noiseless_metric_is_latent_plus_bias() {
        let (config, _) = sample_experiment(3);
        let truth = GroundTruth::evenly_spaced(&config);
        let m = SyntheticMetric::undervaluing_dnn("m", Orientation::HigherBetter, 0.0, 15.0);
        let t = &synthetic_objective(&config, &truth, &[m], 1)[0];
        let item = ItemId::new("item01");
        assert_eq!(t.scores[&(ConditionId::new("cond-opus16"), item.clone())], 84.0);
        assert_eq!(t.scores[&(ConditionId::new("cond-encodec"), item.clone())], 52.0 - 15.0);
        assert!(!t.scores.contains_key(&(ConditionId::new("cond-ref"), item)));
        assert_eq!(t.scores.len(), 5 * 3);
    }

    #[test]
    fn lower_better_flips() {
        let (config, _) = sample_experiment(2);
        let truth = GroundTruth::evenly_spaced(&config);
        let m = SyntheticMetric {
            name: "d".into(),
            orientation: Orientation::LowerBetter,
            noise_sd: 0.0,
            family_bias: BTreeMap::new(),
        };
        let t = &synthetic_objective(&config, &truth, &[m], 1)[0];
        assert_eq!(t.scores[&(ConditionId::new("cond-anchor"), ItemId::new("item02"))], 80.0);
    }

    #[test]
    fn seeded() {
        let (config, _) = sample_experiment(5);
        let truth = GroundTruth::evenly_spaced(&config);
        let m = [SyntheticMetric::undervaluing_dnn("m", Orientation::HigherBetter, 4.0, 10.0)];
        assert_eq!(synthetic_objective(&config, &truth, &m, 3), synthetic_objective(&config, &truth, &m, 3));
        assert_ne!(synthetic_objective(&config, &truth, &m, 3), synthetic_objective(&config, &truth, &m, 4));
    }
}
