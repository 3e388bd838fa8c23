//! Pathway tensors, top-k sparsification and optimization masks.
//!
//! A [`Pathway`] holds one routing-weight row of length `E` for every
//! `(token, layer)` pair, stored row-major as `[(t * L + l) * E + e]`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Shape of the routing problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    pub n_tokens: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            n_tokens: 4,
            n_layers: 6,
            n_experts: 16,
            top_k: 4,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.n_layers == 0 || self.n_experts == 0 {
            return Err(Error::InvalidSpec("routing dimensions must be >= 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::InvalidSpec(format!(
                "top_k must lie in [1, {}], got {}",
                self.n_experts, self.top_k
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> PathwayDims {
        PathwayDims {
            tokens: self.n_tokens,
            layers: self.n_layers,
            experts: self.n_experts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathwayDims {
    pub tokens: usize,
    pub layers: usize,
    pub experts: usize,
}

impl PathwayDims {
    pub fn len(&self) -> usize {
        self.tokens * self.layers * self.experts
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        self.tokens * self.layers
    }

    pub fn row_index(&self, token: usize, layer: usize) -> usize {
        token * self.layers + layer
    }

    pub fn index(&self, token: usize, layer: usize, expert: usize) -> usize {
        self.row_index(token, layer) * self.experts + expert
    }

    fn check(&self, other: &PathwayDims) -> Result<()> {
        check_dim("pathway tokens", self.tokens, other.tokens)?;
        check_dim("pathway layers", self.layers, other.layers)?;
        check_dim("pathway experts", self.experts, other.experts)
    }
}

/// Dense `T x L x E` tensor of routing weights.
///
/// Rows produced by a router are softmax outputs; rows under optimization may
/// temporarily leave the simplex. Gradients with respect to a pathway share
/// the same layout and type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pathway {
    dims: PathwayDims,
    #[serde(with = "crate::hex64::vec")]
    values: Vec<f64>,
}

impl Pathway {
    pub fn zeros(dims: PathwayDims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.len()],
        }
    }

    pub fn from_values(dims: PathwayDims, values: Vec<f64>) -> Result<Self> {
        check_dim("pathway length", dims.len(), values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidPathway(format!("non-finite entry at flat index {i}")));
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> PathwayDims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, token: usize, layer: usize, expert: usize) -> f64 {
        self.values[self.dims.index(token, layer, expert)]
    }

    pub fn set(&mut self, token: usize, layer: usize, expert: usize, value: f64) {
        let i = self.dims.index(token, layer, expert);
        self.values[i] = value;
    }

    pub fn row(&self, token: usize, layer: usize) -> &[f64] {
        let start = self.dims.row_index(token, layer) * self.dims.experts;
        &self.values[start..start + self.dims.experts]
    }

    pub fn row_mut(&mut self, token: usize, layer: usize) -> &mut [f64] {
        let start = self.dims.row_index(token, layer) * self.dims.experts;
        &mut self.values[start..start + self.dims.experts]
    }

    /// Checks the router-output invariants: finite, non-negative, rows on
    /// the simplex within `tol`.
    pub fn validate_mixture(&self, tol: f64) -> Result<()> {
        for t in 0..self.dims.tokens {
            for l in 0..self.dims.layers {
                let row = self.row(t, l);
                if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::InvalidPathway(format!(
                        "row ({t}, {l}) has a negative or non-finite weight"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > tol {
                    return Err(Error::InvalidPathway(format!(
                        "row ({t}, {l}) sums to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Bitwise hash of the payload, used for trace snapshots and store digests.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in [self.dims.tokens, self.dims.layers, self.dims.experts] {
            h.update((d as u64).to_le_bytes());
        }
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// One sparsified routing row: exactly `k` experts (ascending index) and
/// their renormalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Keeps the `k` largest entries of `row` (ties to the lower expert index),
/// clamps them at zero and renormalizes to sum 1. Falls back to uniform
/// `1/k` when no kept entry is positive.
pub fn sparsify_topk(row: &[f64], k: usize) -> Result<SparseRow> {
    if k == 0 || k > row.len() {
        return Err(Error::InvalidSpec(format!(
            "top_k {k} outside [1, {}]",
            row.len()
        )));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidPathway("non-finite routing weight".into()));
    }
    let mut experts = topk_indices(row, k);
    experts.sort_unstable();
    Ok(renormalize_support(row, experts))
}

/// Indices of the `k` largest entries, ordered by descending value with ties
/// to the lower index. Input must be finite.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Renormalizes `row` over a fixed `support`.
pub(crate) fn renormalize_support(row: &[f64], experts: Vec<usize>) -> SparseRow {
    let total: f64 = experts.iter().map(|&e| row[e].max(0.0)).sum();
    let weights = if total > 0.0 {
        experts.iter().map(|&e| row[e].max(0.0) / total).collect()
    } else {
        vec![1.0 / experts.len() as f64; experts.len()]
    };
    SparseRow { experts, weights }
}

/// Top-k selections for every `(token, layer)` row of a pathway.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePathway {
    dims: PathwayDims,
    top_k: usize,
    experts: Vec<usize>,
    weights: Vec<f64>,
}

impl SparsePathway {
    pub(crate) fn with_capacity(dims: PathwayDims, top_k: usize) -> Self {
        Self {
            dims,
            top_k,
            experts: Vec::with_capacity(dims.rows() * top_k),
            weights: Vec::with_capacity(dims.rows() * top_k),
        }
    }

    /// Rows must be pushed in `(token, layer)` row-major order.
    pub(crate) fn push_row(&mut self, row: &SparseRow) {
        debug_assert_eq!(row.experts.len(), self.top_k);
        self.experts.extend_from_slice(&row.experts);
        self.weights.extend_from_slice(&row.weights);
    }

    pub fn from_pathway(p: &Pathway, top_k: usize) -> Result<Self> {
        let dims = p.dims();
        let mut out = Self::with_capacity(dims, top_k);
        for t in 0..dims.tokens {
            for l in 0..dims.layers {
                out.push_row(&sparsify_topk(p.row(t, l), top_k)?);
            }
        }
        Ok(out)
    }

    pub fn dims(&self) -> PathwayDims {
        self.dims
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn row(&self, token: usize, layer: usize) -> (&[usize], &[f64]) {
        let start = self.dims.row_index(token, layer) * self.top_k;
        (
            &self.experts[start..start + self.top_k],
            &self.weights[start..start + self.top_k],
        )
    }

    pub fn to_dense(&self) -> Pathway {
        let mut p = Pathway::zeros(self.dims);
        for t in 0..self.dims.tokens {
            for l in 0..self.dims.layers {
                let (es, ws) = self.row(t, l);
                for (&e, &w) in es.iter().zip(ws) {
                    p.set(t, l, e, w);
                }
            }
        }
        p
    }
}

/// The `(token, layer, expert)` entries an optimizer may modify.
///
/// Core experts are held per masked `(token, layer)` row, in the order
/// `tokens x layers`; every row carries the same number of experts.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationMask {
    dims: PathwayDims,
    tokens: Vec<usize>,
    layers: Vec<usize>,
    core_experts: Vec<Vec<usize>>,
    row_masked: Vec<bool>,
    entries: Vec<usize>,
}

impl OptimizationMask {
    pub fn new(
        dims: PathwayDims,
        tokens: Vec<usize>,
        layers: Vec<usize>,
        core_experts: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let tokens = sorted_unique(tokens, dims.tokens, "token")?;
        let layers = sorted_unique(layers, dims.layers, "layer")?;
        check_dim(
            "core expert rows",
            tokens.len() * layers.len(),
            core_experts.len(),
        )?;
        let core_experts = core_experts
            .into_iter()
            .map(|set| sorted_unique(set, dims.experts, "expert"))
            .collect::<Result<Vec<_>>>()?;
        let n = core_experts[0].len();
        if core_experts.iter().any(|s| s.len() != n) {
            return Err(Error::InvalidSpec(
                "core expert sets must have identical size".into(),
            ));
        }
        let mut row_masked = vec![false; dims.rows()];
        let mut entries = Vec::with_capacity(core_experts.len() * n);
        let mut i = 0;
        for &t in &tokens {
            for &l in &layers {
                row_masked[dims.row_index(t, l)] = true;
                entries.extend(core_experts[i].iter().map(|&e| dims.index(t, l, e)));
                i += 1;
            }
        }
        Ok(Self {
            dims,
            tokens,
            layers,
            core_experts,
            row_masked,
            entries,
        })
    }

    /// Every entry of the tensor.
    pub fn full(dims: PathwayDims) -> Self {
        let rows = dims.tokens * dims.layers;
        Self::new(
            dims,
            (0..dims.tokens).collect(),
            (0..dims.layers).collect(),
            vec![(0..dims.experts).collect(); rows],
        )
        .expect("full mask is always valid")
    }

    pub fn dims(&self) -> PathwayDims {
        self.dims
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Core experts for the `i`-th masked row (tokens-major).
    pub fn core_experts(&self, i: usize) -> &[usize] {
        &self.core_experts[i]
    }

    pub fn n_core(&self) -> usize {
        self.core_experts[0].len()
    }

    pub fn contains_row(&self, token: usize, layer: usize) -> bool {
        self.row_masked[self.dims.row_index(token, layer)]
    }

    /// Flat indices of the masked entries, ascending.
    pub fn entries(&self) -> &[usize] {
        &self.entries
    }

    pub fn contains(&self, token: usize, layer: usize, expert: usize) -> bool {
        self.entries
            .binary_search(&self.dims.index(token, layer, expert))
            .is_ok()
    }

    /// Values of `p` at the masked entries, in `entries()` order.
    pub fn gather(&self, p: &Pathway) -> Vec<f64> {
        self.entries.iter().map(|&i| p.values()[i]).collect()
    }
}

fn sorted_unique(mut set: Vec<usize>, bound: usize, what: &str) -> Result<Vec<usize>> {
    set.sort_unstable();
    set.dedup();
    if set.is_empty() {
        return Err(Error::InvalidSpec(format!("empty {what} set in mask")));
    }
    if let Some(&bad) = set.iter().find(|&&i| i >= bound) {
        return Err(Error::InvalidSpec(format!(
            "{what} index {bad} out of range [0, {bound})"
        )));
    }
    Ok(set)
}

/// Returns `p` with `delta` added on the masked entries; every other entry is
/// copied bit-for-bit.
pub fn apply_masked_update(p: &Pathway, delta: &Pathway, mask: &OptimizationMask) -> Result<Pathway> {
    p.dims.check(&delta.dims)?;
    p.dims.check(&mask.dims)?;
    let mut out = p.clone();
    for &i in mask.entries() {
        out.values[i] = p.values[i] + delta.values[i];
    }
    Ok(out)
}

/// Euclidean norm of `a - b` over the masked entries.
pub fn masked_distance(a: &Pathway, b: &Pathway, mask: &OptimizationMask) -> Result<f64> {
    a.dims.check(&b.dims)?;
    a.dims.check(&mask.dims)?;
    Ok(mask
        .entries()
        .iter()
        .map(|&i| {
            let d = a.values[i] - b.values[i];
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Which token positions are optimized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenSelect {
    Last(usize),
    First(usize),
    All,
    List(Vec<usize>),
}

impl TokenSelect {
    pub fn resolve(&self, n_tokens: usize) -> Result<Vec<usize>> {
        let out: Vec<usize> = match self {
            TokenSelect::Last(n) => (n_tokens.saturating_sub(*n)..n_tokens).collect(),
            TokenSelect::First(n) => (0..(*n).min(n_tokens)).collect(),
            TokenSelect::All => (0..n_tokens).collect(),
            TokenSelect::List(v) => v.clone(),
        };
        if out.is_empty() || out.iter().any(|&t| t >= n_tokens) {
            return Err(Error::InvalidSpec(format!(
                "token selection {self} invalid for {n_tokens} tokens"
            )));
        }
        Ok(out)
    }
}

impl fmt::Display for TokenSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenSelect::Last(n) => write!(f, "last:{n}"),
            TokenSelect::First(n) => write!(f, "first:{n}"),
            TokenSelect::All => f.write_str("all"),
            TokenSelect::List(v) => f.write_str(&join(v)),
        }
    }
}

impl FromStr for TokenSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidSpec(format!("bad token selection {s:?}"));
        if s.eq_ignore_ascii_case("all") {
            return Ok(TokenSelect::All);
        }
        if let Some(n) = s.strip_prefix("last:") {
            return n.parse().map(TokenSelect::Last).map_err(|_| bad());
        }
        if let Some(n) = s.strip_prefix("first:") {
            return n.parse().map(TokenSelect::First).map_err(|_| bad());
        }
        parse_list(s).map(TokenSelect::List).ok_or_else(bad)
    }
}

/// Which layers are optimized.
///
/// The compact form mirrors the usual ablation notation: `L3` is the last
/// three layers, `F2` the first two, `M1` the middle one, and groups
/// concatenate (`F2L3`). `all` selects every layer and `0,3,5` is an explicit
/// list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSelect {
    Groups(Vec<(LayerGroup, usize)>),
    All,
    List(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerGroup {
    First,
    Middle,
    Last,
}

impl LayerSelect {
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>> {
        let mut out = match self {
            LayerSelect::All => (0..n_layers).collect(),
            LayerSelect::List(v) => v.clone(),
            LayerSelect::Groups(groups) => {
                let mut v = Vec::new();
                for &(g, n) in groups {
                    if n > n_layers {
                        return Err(Error::InvalidSpec(format!(
                            "layer group of {n} exceeds {n_layers} layers"
                        )));
                    }
                    let start = match g {
                        LayerGroup::First => 0,
                        LayerGroup::Middle => (n_layers - n) / 2,
                        LayerGroup::Last => n_layers - n,
                    };
                    v.extend(start..start + n);
                }
                v
            }
        };
        out.sort_unstable();
        out.dedup();
        if out.is_empty() || out.iter().any(|&l| l >= n_layers) {
            return Err(Error::InvalidSpec(format!(
                "layer selection {self} invalid for {n_layers} layers"
            )));
        }
        Ok(out)
    }
}

impl fmt::Display for LayerSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelect::All => f.write_str("all"),
            LayerSelect::List(v) => f.write_str(&join(v)),
            LayerSelect::Groups(groups) => {
                for &(g, n) in groups {
                    let c = match g {
                        LayerGroup::First => 'F',
                        LayerGroup::Middle => 'M',
                        LayerGroup::Last => 'L',
                    };
                    write!(f, "{c}{n}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for LayerSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidSpec(format!("bad layer selection {s:?}"));
        if s.eq_ignore_ascii_case("all") {
            return Ok(LayerSelect::All);
        }
        if s.starts_with(|c: char| c.is_ascii_digit()) {
            return parse_list(s).map(LayerSelect::List).ok_or_else(bad);
        }
        let mut groups = Vec::new();
        let mut rest = s;
        while !rest.is_empty() {
            let group = match rest.as_bytes()[0] {
                b'F' | b'f' => LayerGroup::First,
                b'M' | b'm' => LayerGroup::Middle,
                b'L' | b'l' => LayerGroup::Last,
                _ => return Err(bad()),
            };
            rest = &rest[1..];
            let digits = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
            let n: usize = rest[..digits].parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(bad());
            }
            groups.push((group, n));
            rest = &rest[digits..];
        }
        if groups.is_empty() {
            return Err(bad());
        }
        Ok(LayerSelect::Groups(groups))
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    let v: Option<Vec<usize>> = s.split(',').map(|p| p.trim().parse().ok()).collect();
    v.filter(|v| !v.is_empty())
}

macro_rules! string_serde {
    ($ty:ty) => {
        impl serde::Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> serde::Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = <String as serde::Deserialize>::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(TokenSelect);
string_serde!(LayerSelect);
pub(crate) use string_serde;

/// Declarative mask, resolved per sample against the router's own pathway.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub tokens: TokenSelect,
    pub layers: LayerSelect,
    /// Number of core experts per masked row, taken as the router's top-n.
    pub core_experts: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            tokens: TokenSelect::Last(1),
            layers: LayerSelect::Groups(vec![(LayerGroup::Last, 3)]),
            core_experts: 8,
        }
    }
}

impl MaskSpec {
    /// Builds the concrete mask: core experts are the `core_experts` largest
    /// entries of each masked row of `base` (ties to the lower index).
    pub fn resolve(&self, base: &Pathway) -> Result<OptimizationMask> {
        let dims = base.dims();
        if self.core_experts == 0 || self.core_experts > dims.experts {
            return Err(Error::InvalidSpec(format!(
                "core_experts must lie in [1, {}], got {}",
                dims.experts, self.core_experts
            )));
        }
        let tokens = self.tokens.resolve(dims.tokens)?;
        let layers = self.layers.resolve(dims.layers)?;
        let mut core = Vec::with_capacity(tokens.len() * layers.len());
        for &t in &tokens {
            for &l in &layers {
                core.push(topk_indices(base.row(t, l), self.core_experts));
            }
        }
        OptimizationMask::new(dims, tokens, layers, core)
    }
}
