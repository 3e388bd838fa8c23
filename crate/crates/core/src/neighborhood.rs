//! Reference-neighbor selection in embedding space and in pathway space,
//! with normalized kernel weights.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::KernelSpec;
use crate::pathway::{masked_distance, OptimizationMask, Pathway};
use crate::refstore::ReferenceStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    /// The `k` closest entries.
    Knn { k: usize },
    /// Every entry within distance `epsilon`.
    #[serde(rename = "eps")]
    EpsBall { epsilon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Embedding,
    Pathway,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    #[serde(flatten)]
    pub selection: Selection,
    /// Embedding-space entries more similar than this to the query are
    /// treated as duplicates and skipped.
    #[serde(default = "default_dedup")]
    pub dedup_threshold: f64,
    #[serde(default = "default_space")]
    pub space: Space,
}

fn default_dedup() -> f64 {
    0.95
}

fn default_space() -> Space {
    Space::Embedding
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        Self {
            selection: Selection::Knn { k: 3 },
            dedup_threshold: default_dedup(),
            space: default_space(),
        }
    }
}

impl NeighborhoodSpec {
    pub fn knn(k: usize) -> Self {
        Self {
            selection: Selection::Knn { k },
            ..Self::default()
        }
    }

    pub fn eps(epsilon: f64) -> Self {
        Self {
            selection: Selection::EpsBall { epsilon },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.selection {
            Selection::Knn { k: 0 } => {
                return Err(Error::InvalidSpec("knn requires k >= 1".into()))
            }
            Selection::EpsBall { epsilon } if !(epsilon > 0.0) => {
                return Err(Error::InvalidSpec(format!("epsilon must be > 0, got {epsilon}")))
            }
            _ => {}
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "dedup threshold must lie in (0, 1], got {}",
                self.dedup_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    /// Position in the store.
    pub index: usize,
    pub distance: f64,
    pub similarity: f64,
    pub weight: f64,
}

/// Neighbors sorted by ascending distance (ties by id), weights summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub members: Vec<Neighbor>,
    /// Sum of the unnormalized kernel values, a local density estimate.
    pub kernel_total: f64,
}

impl NeighborSet {
    pub fn ids(&self) -> Vec<u64> {
        self.members.iter().map(|n| n.id).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    id: u64,
    index: usize,
    distance: f64,
    similarity: f64,
}

fn by_distance_then_id(a: &Candidate, b: &Candidate) -> Ordering {
    a.distance
        .partial_cmp(&b.distance)
        .unwrap_or(Ordering::Equal)
        .then(a.id.cmp(&b.id))
}

fn select(mut candidates: Vec<Candidate>, spec: &NeighborhoodSpec, kernel: &KernelSpec) -> Result<NeighborSet> {
    let chosen = match spec.selection {
        Selection::Knn { k } => {
            if candidates.len() > k {
                candidates.select_nth_unstable_by(k - 1, by_distance_then_id);
                candidates.truncate(k);
            }
            candidates
        }
        Selection::EpsBall { epsilon } => {
            candidates.retain(|c| c.distance <= epsilon);
            candidates
        }
    };
    let mut chosen = chosen;
    chosen.sort_by(by_distance_then_id);
    if chosen.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let distances: Vec<f64> = chosen.iter().map(|c| c.distance).collect();
    let kernel = kernel.resolve(&distances);
    let raw = chosen
        .iter()
        .map(|c| kernel.eval(c.distance, c.similarity))
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = if total > 0.0 && total.is_finite() {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / chosen.len() as f64; chosen.len()]
    };
    Ok(NeighborSet {
        members: chosen
            .iter()
            .zip(weights)
            .map(|(c, weight)| Neighbor {
                id: c.id,
                index: c.index,
                distance: c.distance,
                similarity: c.similarity,
                weight,
            })
            .collect(),
        kernel_total: total,
    })
}

/// Neighbors of an embedding under cosine distance `1 - cos`, after dropping
/// near-duplicates of the query.
pub fn select_neighbors(
    query: &[f64],
    store: &ReferenceStore,
    spec: &NeighborhoodSpec,
    kernel: &KernelSpec,
) -> Result<NeighborSet> {
    spec.validate()?;
    kernel.validate()?;
    check_dim("query embedding", store.embedding_dim(), query.len())?;
    let candidates = store
        .entries()
        .iter()
        .enumerate()
        .filter_map(|(index, e)| {
            let similarity = cosine_similarity(query, &e.embedding);
            (similarity <= spec.dedup_threshold).then_some(Candidate {
                id: e.id,
                index,
                distance: (1.0 - similarity).max(0.0),
                similarity,
            })
        })
        .collect();
    select(candidates, spec, kernel)
}

/// Neighbors of a pathway under the masked Euclidean distance. No duplicate
/// filtering is applied.
pub fn select_pathway_neighbors(
    omega: &Pathway,
    store: &ReferenceStore,
    mask: &OptimizationMask,
    spec: &NeighborhoodSpec,
    kernel: &KernelSpec,
) -> Result<NeighborSet> {
    spec.validate()?;
    kernel.validate()?;
    let query = mask.gather(omega);
    let candidates = store
        .entries()
        .iter()
        .enumerate()
        .map(|(index, e)| {
            Ok(Candidate {
                id: e.id,
                index,
                distance: masked_distance(omega, &e.pathway, mask)?,
                similarity: cosine_similarity(&query, &mask.gather(&e.pathway)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    select(candidates, spec, kernel)
}
