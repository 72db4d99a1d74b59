//! Domain sampling weights: each domain's sequence count times its epoch
//! multiplier, normalized over all domains.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    pub sequence_count: u64,
    pub epochs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub domains: Vec<Domain>,
}

impl DomainManifest {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "domain manifest",
            detail: e.to_string(),
        })
    }
}

/// weight_d = count_d * epochs_d / sum over domains; sums to 1.
pub fn compute_sampling_weights(manifest: &DomainManifest) -> Result<Vec<f64>> {
    if manifest.domains.is_empty() {
        return Err(Error::EmptyInput("domain manifest"));
    }
    for d in &manifest.domains {
        if !d.epochs.is_finite() || d.epochs <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "domain {:?}: epochs must be a positive real, got {}",
                d.name, d.epochs
            )));
        }
    }
    let products: Vec<f64> = manifest
        .domains
        .iter()
        .map(|d| d.sequence_count as f64 * d.epochs)
        .collect();
    let total: f64 = products.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidConfig(
            "every domain has zero sequences; nothing to sample".into(),
        ));
    }
    Ok(products.into_iter().map(|p| p / total).collect())
}

/// Draws a domain index with the given probabilities. Zero-weight domains
/// are never drawn.
pub fn sample_domain(weights: &[f64], rng: &mut impl Rng) -> usize {
    debug_assert!(!weights.is_empty());
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
