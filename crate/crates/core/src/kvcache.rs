//! Scheme-aware key/value cache store.
//!
//! Each scheme lays the cache out differently:
//!
//! | scheme               | keys           | values                  | low-rank cache      |
//! |----------------------|----------------|-------------------------|---------------------|
//! | `NonShared`          | one per agent  | full, one per agent     | -                   |
//! | `FullShared`         | shared         | full, shared            | -                   |
//! | `BaseShared`         | shared         | base, shared            | one per agent       |
//! | `BaseLrShared`       | shared         | base, shared            | one, shared         |
//! | `SelectiveRecompute` | shared         | full, shared            | - (+ hidden states) |
//!
//! Shared rows are first-writer-wins: once a row exists it may only be
//! re-written with bit-identical contents, except on the recomputed layers
//! of `SelectiveRecompute`, where the active agent overwrites them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::str::FromStr;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{read_container, take_tensor, write_container};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{Dtype, Scalar};

/// Scheme name without its parameters, as accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeKind {
    NonShared,
    FullShared,
    SelectiveRecompute,
    BaseShared,
    BaseLrShared,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::NonShared,
        SchemeKind::FullShared,
        SchemeKind::SelectiveRecompute,
        SchemeKind::BaseShared,
        SchemeKind::BaseLrShared,
    ];

    pub const fn name(self) -> &'static str {
        match self {
            SchemeKind::NonShared => "NonShared",
            SchemeKind::FullShared => "FullShared",
            SchemeKind::SelectiveRecompute => "SelectiveRecompute",
            SchemeKind::BaseShared => "BaseShared",
            SchemeKind::BaseLrShared => "BaseLRShared",
        }
    }

    /// Fills in the default recompute set for `SelectiveRecompute`.
    pub fn resolve(self, n_layers: usize, seed: u64) -> CacheScheme {
        match self {
            SchemeKind::NonShared => CacheScheme::NonShared,
            SchemeKind::FullShared => CacheScheme::FullShared,
            SchemeKind::BaseShared => CacheScheme::BaseShared,
            SchemeKind::BaseLrShared => CacheScheme::BaseLrShared,
            SchemeKind::SelectiveRecompute => CacheScheme::SelectiveRecompute {
                recompute_layers: default_recompute_layers(n_layers, seed),
            },
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "nonshared" => Ok(SchemeKind::NonShared),
            "fullshared" => Ok(SchemeKind::FullShared),
            "baseshared" => Ok(SchemeKind::BaseShared),
            "baselrshared" => Ok(SchemeKind::BaseLrShared),
            "selectiverecompute" | "selective" => Ok(SchemeKind::SelectiveRecompute),
            _ => Err(format!(
                "unknown scheme `{s}` (expected one of NonShared, FullShared, SelectiveRecompute, BaseShared, BaseLRShared)"
            )),
        }
    }
}

/// Top `ceil(n_layers / 3)` layers under seeded pseudo-sensitivity scores.
pub fn default_recompute_layers(n_layers: usize, seed: u64) -> BTreeSet<usize> {
    let k = n_layers.div_ceil(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e1e_c7ed);
    let mut scored: Vec<(f64, usize)> = (0..n_layers).map(|l| (rng.random::<f64>(), l)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, l)| l).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CacheScheme {
    NonShared,
    FullShared,
    BaseShared,
    #[serde(rename = "BaseLRShared")]
    BaseLrShared,
    SelectiveRecompute {
        recompute_layers: BTreeSet<usize>,
    },
}

impl CacheScheme {
    pub fn kind(&self) -> SchemeKind {
        match self {
            CacheScheme::NonShared => SchemeKind::NonShared,
            CacheScheme::FullShared => SchemeKind::FullShared,
            CacheScheme::BaseShared => SchemeKind::BaseShared,
            CacheScheme::BaseLrShared => SchemeKind::BaseLrShared,
            CacheScheme::SelectiveRecompute { .. } => SchemeKind::SelectiveRecompute,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// Whether values are stored as base + low-rank (true) or full width.
    pub fn splits_values(&self) -> bool {
        matches!(self, CacheScheme::BaseShared | CacheScheme::BaseLrShared)
    }

    pub fn shares_keys(&self) -> bool {
        !matches!(self, CacheScheme::NonShared)
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if let CacheScheme::SelectiveRecompute { recompute_layers } = self {
            if let Some(&bad) = recompute_layers.iter().find(|&&l| l >= n_layers) {
                return Err(Error::InvalidConfig(format!(
                    "recompute layer {bad} out of range for {n_layers} layers"
                )));
            }
        }
        Ok(())
    }

    fn recompute_layers(&self) -> Option<&BTreeSet<usize>> {
        match self {
            CacheScheme::SelectiveRecompute { recompute_layers }
                if !recompute_layers.is_empty() =>
            {
                Some(recompute_layers)
            }
            _ => None,
        }
    }

    /// Layer whose input is kept in the hidden-state cache.
    pub fn hidden_boundary(&self) -> Option<usize> {
        self.recompute_layers().and_then(|s| s.first().copied())
    }
}

impl fmt::Display for CacheScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheScheme::SelectiveRecompute { recompute_layers } => {
                write!(f, "SelectiveRecompute{recompute_layers:?}")
            }
            other => f.write_str(other.name()),
        }
    }
}

/// Shape parameters the store needs from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheDims {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub rank: usize,
    pub d_model: usize,
    pub n_agents: usize,
}

impl CacheDims {
    /// Width of the value projection output (`n_kv_heads * d_head`).
    pub fn d_out(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}

/// Which token rows a step must compute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillPlan {
    pub agent: usize,
    /// Trajectory length before the step.
    pub prior_len: usize,
    /// Rows that need a hidden-state pass for this agent.
    pub hidden_pass: Range<usize>,
    /// Rows whose key/value projections are written to the cache.
    pub kv_project: Range<usize>,
    /// Rows whose value LoRA down-projection is computed for this agent.
    pub lr_project: Range<usize>,
    /// `SelectiveRecompute` only: rows this agent had not seen that are
    /// re-projected on the recompute layers, entering at the hidden boundary.
    pub recompute: Option<RecomputePlan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecomputePlan {
    pub rows: Range<usize>,
    pub layers: BTreeSet<usize>,
}

impl RecomputePlan {
    pub fn first_layer(&self) -> usize {
        *self.layers.first().expect("non-empty recompute set")
    }

    pub fn last_layer(&self) -> usize {
        *self.layers.last().expect("non-empty recompute set")
    }
}

/// Per-layer view of a [`PrefillPlan`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    /// Rows that pass through this layer (queries, attention, MLP).
    pub rows: Range<usize>,
    pub kv_rows: Range<usize>,
    pub lr_rows: Range<usize>,
    /// Existing shared rows in `kv_rows` are replaced rather than reused.
    pub overwrite: bool,
}

impl PrefillPlan {
    pub fn end(&self) -> usize {
        self.hidden_pass.end
    }

    pub fn new_tokens(&self) -> usize {
        self.end() - self.prior_len
    }

    /// Number of distinct token rows given a hidden-state pass.
    pub fn hidden_tokens(&self) -> usize {
        self.hidden_pass.len()
    }

    pub fn layer(&self, layer: usize) -> LayerPlan {
        let new_rows = self.prior_len..self.end();
        match &self.recompute {
            Some(rc) => {
                let prior_active = layer >= rc.first_layer() && layer <= rc.last_layer();
                let recomputed = rc.layers.contains(&layer);
                let with_prior = rc.rows.start..self.end();
                LayerPlan {
                    rows: if prior_active {
                        with_prior.clone()
                    } else {
                        new_rows.clone()
                    },
                    kv_rows: if recomputed {
                        with_prior.clone()
                    } else {
                        new_rows.clone()
                    },
                    lr_rows: if recomputed { with_prior } else { new_rows },
                    overwrite: recomputed,
                }
            }
            None => LayerPlan {
                rows: self.hidden_pass.clone(),
                kv_rows: self.kv_project.clone(),
                lr_rows: self.lr_project.clone(),
                overwrite: false,
            },
        }
    }

    /// `(token, layer)` pairs given a hidden-state pass.
    pub fn hidden_token_passes(&self, n_layers: usize) -> u64 {
        (0..n_layers).map(|l| self.layer(l).rows.len() as u64).sum()
    }
}

/// Plans a step from the trajectory length `len` and per-agent progress.
pub fn plan_from_state(
    scheme: &CacheScheme,
    seen_upto: &[usize],
    len: usize,
    agent: usize,
    new_tokens: usize,
) -> Result<PrefillPlan> {
    let seen = *seen_upto.get(agent).ok_or(Error::AgentOutOfRange {
        agent,
        n_agents: seen_upto.len(),
    })?;
    let prior = len;
    let end = prior + new_tokens;
    let all_unseen = seen..end;
    let only_new = prior..end;
    let (hidden_pass, kv_project, lr_project, recompute) = match scheme {
        CacheScheme::NonShared => (all_unseen.clone(), all_unseen.clone(), all_unseen, None),
        CacheScheme::FullShared | CacheScheme::BaseLrShared => {
            (only_new.clone(), only_new.clone(), only_new, None)
        }
        CacheScheme::BaseShared => (all_unseen.clone(), only_new, all_unseen, None),
        CacheScheme::SelectiveRecompute { recompute_layers } => {
            let recompute = (!recompute_layers.is_empty() && seen < prior).then(|| RecomputePlan {
                rows: seen..prior,
                layers: recompute_layers.clone(),
            });
            let hidden = if recompute.is_some() {
                all_unseen
            } else {
                only_new.clone()
            };
            (hidden, only_new.clone(), only_new, recompute)
        }
    };
    Ok(PrefillPlan {
        agent,
        prior_len: prior,
        hidden_pass,
        kv_project,
        lr_project,
        recompute,
    })
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    keys: Vec<Matrix<T>>,
    values: Vec<Matrix<T>>,
}

impl<T: Scalar> HeadCache<T> {
    fn empty(dims: &CacheDims) -> Self {
        Self {
            keys: vec![Matrix::zeros(0, dims.d_head); dims.n_kv_heads],
            values: vec![Matrix::zeros(0, dims.d_head); dims.n_kv_heads],
        }
    }

    fn elements(&self) -> (usize, usize) {
        (
            self.keys.iter().map(Matrix::len).sum(),
            self.values.iter().map(Matrix::len).sum(),
        )
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    shared: Option<HeadCache<T>>,
    per_agent: BTreeMap<usize, HeadCache<T>>,
    lr_shared: Option<Matrix<T>>,
    lr_per_agent: BTreeMap<usize, Matrix<T>>,
}

/// Read-only view of what one agent attends over at one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a, T> {
    pub keys: &'a [Matrix<T>],
    /// Base values for split schemes, full values otherwise.
    pub values: &'a [Matrix<T>],
    pub lr: Option<&'a Matrix<T>>,
}

/// Rows produced by one layer of a step, to be written into the store.
#[derive(Debug, Clone)]
pub struct LayerOutputs<T> {
    pub layer: usize,
    pub kv: Option<KvRows<T>>,
    pub lr: Option<LrRows<T>>,
}

#[derive(Debug, Clone)]
pub struct KvRows<T> {
    pub start: usize,
    /// One matrix per kv head.
    pub keys: Vec<Matrix<T>>,
    /// Base values under split schemes, full values otherwise.
    pub values: Vec<Matrix<T>>,
}

#[derive(Debug, Clone)]
pub struct LrRows<T> {
    pub start: usize,
    pub lr: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct KvStore<T> {
    scheme: CacheScheme,
    dims: CacheDims,
    len: usize,
    seen_upto: Vec<usize>,
    layers: Vec<LayerCache<T>>,
    hidden: Option<Matrix<T>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum WritePolicy {
    FirstWriterWins,
    Overwrite,
}

/// Writes `rows` at absolute position `start` of `target`: rows past the end
/// are appended, overlapping rows must match bit for bit unless overwriting.
fn write_rows<T: Scalar>(
    target: &mut Matrix<T>,
    start: usize,
    rows: &Matrix<T>,
    policy: WritePolicy,
    layer: usize,
) -> Result<()> {
    let have = target.rows();
    if start > have {
        return Err(Error::Plan(format!(
            "layer {layer}: write at row {start} leaves a gap after {have} rows"
        )));
    }
    if rows.cols() != target.cols() {
        return Err(Error::ShapeMismatch {
            op: "kv store write",
            left: target.shape(),
            right: rows.shape(),
        });
    }
    let overlap = (have - start).min(rows.rows());
    if overlap > 0 {
        let existing = target.row_block(start..start + overlap);
        let incoming = rows.row_block(0..overlap);
        if existing != incoming {
            match policy {
                WritePolicy::Overwrite => {
                    target.overwrite_rows(start, &rows.slice_rows(0..overlap))?
                }
                WritePolicy::FirstWriterWins => {
                    return Err(Error::Overwrite {
                        layer,
                        rows: start..start + overlap,
                    })
                }
            }
        }
    }
    if overlap < rows.rows() {
        target.append_rows(&rows.slice_rows(overlap..rows.rows()))?;
    }
    Ok(())
}

impl<T: Scalar> KvStore<T> {
    pub fn new(scheme: CacheScheme, dims: CacheDims) -> Result<Self> {
        scheme.validate(dims.n_layers)?;
        if dims.n_agents == 0 || dims.n_layers == 0 || dims.n_kv_heads == 0 || dims.d_head == 0 {
            return Err(Error::InvalidConfig(format!(
                "degenerate cache dims {dims:?}"
            )));
        }
        let shared = scheme.shares_keys().then(|| HeadCache::empty(&dims));
        let lr_shared =
            matches!(scheme, CacheScheme::BaseLrShared).then(|| Matrix::zeros(0, dims.rank));
        let layers = (0..dims.n_layers)
            .map(|_| LayerCache {
                shared: shared.clone(),
                per_agent: BTreeMap::new(),
                lr_shared: lr_shared.clone(),
                lr_per_agent: BTreeMap::new(),
            })
            .collect();
        let hidden = scheme
            .hidden_boundary()
            .map(|_| Matrix::zeros(0, dims.d_model));
        Ok(Self {
            scheme,
            dims,
            len: 0,
            seen_upto: vec![0; dims.n_agents],
            layers,
            hidden,
        })
    }

    #[inline]
    pub fn scheme(&self) -> &CacheScheme {
        &self.scheme
    }

    #[inline]
    pub fn dims(&self) -> &CacheDims {
        &self.dims
    }

    /// Trajectory length `L`.
    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn seen_upto(&self, agent: usize) -> Result<usize> {
        self.check_agent(agent)?;
        Ok(self.seen_upto[agent])
    }

    pub fn seen_upto_all(&self) -> &[usize] {
        &self.seen_upto
    }

    fn check_agent(&self, agent: usize) -> Result<()> {
        if agent >= self.dims.n_agents {
            return Err(Error::AgentOutOfRange {
                agent,
                n_agents: self.dims.n_agents,
            });
        }
        Ok(())
    }

    /// Decides which rows `agent` must compute to append `new_tokens` tokens.
    pub fn plan_step(&self, agent: usize, new_tokens: usize) -> Result<PrefillPlan> {
        plan_from_state(&self.scheme, &self.seen_upto, self.len, agent, new_tokens)
    }

    /// What `agent` attends over at `layer`.
    pub fn view(&self, agent: usize, layer: usize) -> Result<LayerView<'_, T>> {
        self.check_agent(agent)?;
        let lc = self.layer(layer)?;
        let heads = match &lc.shared {
            Some(h) => h,
            None => lc.per_agent.get(&agent).ok_or_else(|| {
                Error::Plan(format!("agent {agent} has no cache at layer {layer}"))
            })?,
        };
        let lr = match &self.scheme {
            CacheScheme::BaseShared => Some(lc.lr_per_agent.get(&agent).ok_or_else(|| {
                Error::Plan(format!("agent {agent} has no LR cache at layer {layer}"))
            })?),
            CacheScheme::BaseLrShared => lc.lr_shared.as_ref(),
            _ => None,
        };
        Ok(LayerView {
            keys: &heads.keys,
            values: &heads.values,
            lr,
        })
    }

    fn layer(&self, layer: usize) -> Result<&LayerCache<T>> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::Plan(format!("layer {layer} out of range")))
    }

    /// Writes one layer's rows for `agent`.
    pub fn append(&mut self, agent: usize, out: &LayerOutputs<T>) -> Result<()> {
        self.check_agent(agent)?;
        let layer = out.layer;
        if layer >= self.dims.n_layers {
            return Err(Error::Plan(format!("layer {layer} out of range")));
        }
        let overwrite_ok = matches!(&self.scheme, CacheScheme::SelectiveRecompute { recompute_layers } if recompute_layers.contains(&layer));
        let dims = self.dims;
        let scheme = self.scheme.clone();
        let lc = &mut self.layers[layer];

        if let Some(kv) = &out.kv {
            if kv.keys.len() != dims.n_kv_heads || kv.values.len() != dims.n_kv_heads {
                return Err(Error::Plan(format!(
                    "expected {} kv heads, got {} keys / {} values",
                    dims.n_kv_heads,
                    kv.keys.len(),
                    kv.values.len()
                )));
            }
            let (heads, policy) = match lc.shared.as_mut() {
                Some(h) => (
                    h,
                    if overwrite_ok {
                        WritePolicy::Overwrite
                    } else {
                        WritePolicy::FirstWriterWins
                    },
                ),
                None => (
                    lc.per_agent
                        .entry(agent)
                        .or_insert_with(|| HeadCache::empty(&dims)),
                    WritePolicy::FirstWriterWins,
                ),
            };
            for (dst, src) in heads.keys.iter_mut().zip(&kv.keys) {
                write_rows(dst, kv.start, src, policy, layer)?;
            }
            for (dst, src) in heads.values.iter_mut().zip(&kv.values) {
                write_rows(dst, kv.start, src, policy, layer)?;
            }
        }

        if let Some(lr) = &out.lr {
            let dst = match scheme {
                CacheScheme::BaseShared => lc
                    .lr_per_agent
                    .entry(agent)
                    .or_insert_with(|| Matrix::zeros(0, dims.rank)),
                CacheScheme::BaseLrShared => lc.lr_shared.as_mut().expect("allocated in new"),
                _ => {
                    return Err(Error::Plan(format!(
                        "{} keeps no low-rank cache",
                        scheme.name()
                    )))
                }
            };
            write_rows(dst, lr.start, &lr.lr, WritePolicy::FirstWriterWins, layer)?;
        }
        Ok(())
    }

    /// Boundary hidden states (input to the first recomputed layer).
    pub fn hidden(&self) -> Option<&Matrix<T>> {
        self.hidden.as_ref()
    }

    pub fn write_hidden(&mut self, start: usize, rows: &Matrix<T>) -> Result<()> {
        let boundary = self.scheme.hidden_boundary().unwrap_or(0);
        let dst = self.hidden.as_mut().ok_or_else(|| {
            Error::Plan(format!(
                "{} keeps no hidden-state cache",
                self.scheme.name()
            ))
        })?;
        write_rows(dst, start, rows, WritePolicy::FirstWriterWins, boundary)
    }

    /// Marks a step as complete: the trajectory now has `plan.end()` rows and
    /// `agent` has seen all of them. Checks the layout invariants.
    pub fn finish_step(&mut self, plan: &PrefillPlan) -> Result<()> {
        self.check_agent(plan.agent)?;
        if plan.prior_len != self.len {
            return Err(Error::Plan(format!(
                "plan was made at length {} but store has {}",
                plan.prior_len, self.len
            )));
        }
        self.len = plan.end();
        self.seen_upto[plan.agent] = plan.end();
        self.validate()
    }

    /// Checks every layout invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Plan(msg));
        for (agent, &seen) in self.seen_upto.iter().enumerate() {
            if seen > self.len {
                return bad(format!("agent {agent} has seen {seen} > L = {}", self.len));
            }
        }
        for (l, lc) in self.layers.iter().enumerate() {
            if let Some(h) = &lc.shared {
                for m in h.keys.iter().chain(&h.values) {
                    if m.rows() != self.len {
                        return bad(format!(
                            "layer {l}: shared cache has {} rows, L = {}",
                            m.rows(),
                            self.len
                        ));
                    }
                }
            }
            for (&agent, h) in &lc.per_agent {
                for m in h.keys.iter().chain(&h.values) {
                    if m.rows() != self.seen_upto[agent] {
                        return bad(format!(
                            "layer {l}: agent {agent} cache has {} rows, seen {}",
                            m.rows(),
                            self.seen_upto[agent]
                        ));
                    }
                }
            }
            if let Some(lr) = &lc.lr_shared {
                if lr.rows() != self.len {
                    return bad(format!(
                        "layer {l}: shared LR cache has {} rows, L = {}",
                        lr.rows(),
                        self.len
                    ));
                }
            }
            if lc.lr_per_agent.len() > self.dims.n_agents {
                return bad(format!("layer {l}: more LR caches than agents"));
            }
            for (&agent, lr) in &lc.lr_per_agent {
                if lr.rows() != self.seen_upto[agent] {
                    return bad(format!(
                        "layer {l}: agent {agent} LR cache has {} rows, seen {}",
                        lr.rows(),
                        self.seen_upto[agent]
                    ));
                }
            }
        }
        if let Some(h) = &self.hidden {
            if h.rows() != self.len {
                return bad(format!(
                    "hidden cache has {} rows, L = {}",
                    h.rows(),
                    self.len
                ));
            }
        }
        Ok(())
    }

    /// Exact byte usage of everything currently stored.
    pub fn cache_bytes(&self) -> CacheBytes {
        let mut key = 0usize;
        let mut value = 0usize;
        let mut lr = 0usize;
        for lc in &self.layers {
            for h in lc.shared.iter().chain(lc.per_agent.values()) {
                let (k, v) = h.elements();
                key += k;
                value += v;
            }
            lr += lc.lr_shared.as_ref().map_or(0, Matrix::len);
            lr += lc.lr_per_agent.values().map(Matrix::len).sum::<usize>();
        }
        let hidden = self.hidden.as_ref().map_or(0, Matrix::len);
        let size = T::DTYPE.size_bytes() as u64;
        CacheBytes {
            dtype: T::DTYPE,
            key: key as u64 * size,
            value: value as u64 * size,
            lr: lr as u64 * size,
            hidden: hidden as u64 * size,
        }
    }

    /// Per-agent rows of one layer and head, for inspection and tests.
    pub fn agent_values(&self, agent: usize, layer: usize, kv_head: usize) -> Option<&Matrix<T>> {
        let lc = self.layers.get(layer)?;
        let h = lc.shared.as_ref().or_else(|| lc.per_agent.get(&agent))?;
        h.values.get(kv_head)
    }

    pub fn agent_keys(&self, agent: usize, layer: usize, kv_head: usize) -> Option<&Matrix<T>> {
        let lc = self.layers.get(layer)?;
        let h = lc.shared.as_ref().or_else(|| lc.per_agent.get(&agent))?;
        h.keys.get(kv_head)
    }

    pub fn agent_lr(&self, agent: usize, layer: usize) -> Option<&Matrix<T>> {
        let lc = self.layers.get(layer)?;
        lc.lr_shared
            .as_ref()
            .or_else(|| lc.lr_per_agent.get(&agent))
    }

    /// Dumps the store as a container: JSON header then raw payloads.
    pub fn write_snapshot<W: Write>(&self, w: W) -> Result<()> {
        let meta = SnapshotMeta {
            scheme: self.scheme.clone(),
            dims: self.dims,
            len: self.len,
            seen_upto: self.seen_upto.clone(),
        };
        let mut tensors: Vec<(String, &Matrix<T>)> = Vec::new();
        for (l, lc) in self.layers.iter().enumerate() {
            if let Some(h) = &lc.shared {
                for (g, m) in h.keys.iter().enumerate() {
                    tensors.push((format!("layer{l}.shared.key{g}"), m));
                }
                for (g, m) in h.values.iter().enumerate() {
                    tensors.push((format!("layer{l}.shared.value{g}"), m));
                }
            }
            for (a, h) in &lc.per_agent {
                for (g, m) in h.keys.iter().enumerate() {
                    tensors.push((format!("layer{l}.agent{a}.key{g}"), m));
                }
                for (g, m) in h.values.iter().enumerate() {
                    tensors.push((format!("layer{l}.agent{a}.value{g}"), m));
                }
            }
            if let Some(m) = &lc.lr_shared {
                tensors.push((format!("layer{l}.shared.lr"), m));
            }
            for (a, m) in &lc.lr_per_agent {
                tensors.push((format!("layer{l}.agent{a}.lr"), m));
            }
        }
        if let Some(h) = &self.hidden {
            tensors.push(("hidden".to_string(), h));
        }
        write_container(w, "kv-snapshot", &meta, &tensors)
    }

    pub fn read_snapshot<R: Read>(r: R) -> Result<Self> {
        let (meta, mut tensors): (SnapshotMeta, _) = read_container(r, "kv-snapshot")?;
        let mut store = KvStore::new(meta.scheme, meta.dims)?;
        store.len = meta.len;
        if meta.seen_upto.len() != meta.dims.n_agents {
            return Err(Error::Format(
                "seen_upto length differs from n_agents".into(),
            ));
        }
        store.seen_upto = meta.seen_upto;
        let n_kv = store.dims.n_kv_heads;
        for l in 0..store.dims.n_layers {
            let lc = &mut store.layers[l];
            if let Some(h) = lc.shared.as_mut() {
                for g in 0..n_kv {
                    h.keys[g] = take_tensor(&mut tensors, &format!("layer{l}.shared.key{g}"))?;
                    h.values[g] = take_tensor(&mut tensors, &format!("layer{l}.shared.value{g}"))?;
                }
            }
            for a in 0..store.dims.n_agents {
                if tensors
                    .iter()
                    .any(|(n, _)| n == &format!("layer{l}.agent{a}.key0"))
                {
                    let mut h = HeadCache::empty(&store.dims);
                    for g in 0..n_kv {
                        h.keys[g] =
                            take_tensor(&mut tensors, &format!("layer{l}.agent{a}.key{g}"))?;
                        h.values[g] =
                            take_tensor(&mut tensors, &format!("layer{l}.agent{a}.value{g}"))?;
                    }
                    lc.per_agent.insert(a, h);
                }
                let lr_name = format!("layer{l}.agent{a}.lr");
                if tensors.iter().any(|(n, _)| n == &lr_name) {
                    lc.lr_per_agent
                        .insert(a, take_tensor(&mut tensors, &lr_name)?);
                }
            }
            if lc.lr_shared.is_some() {
                lc.lr_shared = Some(take_tensor(&mut tensors, &format!("layer{l}.shared.lr"))?);
            }
        }
        if store.hidden.is_some() {
            store.hidden = Some(take_tensor(&mut tensors, "hidden")?);
        }
        if let Some((name, _)) = tensors.first() {
            return Err(Error::Format(format!(
                "unexpected tensor `{name}` in snapshot"
            )));
        }
        store.validate()?;
        Ok(store)
    }

    /// Bit-level equality of two stores (layout and contents).
    pub fn same_contents(&self, other: &Self) -> bool {
        self.scheme == other.scheme
            && self.dims == other.dims
            && self.len == other.len
            && self.seen_upto == other.seen_upto
            && self.hidden == other.hidden
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                let heads_eq =
                    |x: &HeadCache<T>, y: &HeadCache<T>| x.keys == y.keys && x.values == y.values;
                let shared_eq = match (&a.shared, &b.shared) {
                    (Some(x), Some(y)) => heads_eq(x, y),
                    (None, None) => true,
                    _ => false,
                };
                shared_eq
                    && a.per_agent.len() == b.per_agent.len()
                    && a.per_agent
                        .iter()
                        .zip(&b.per_agent)
                        .all(|((i, x), (j, y))| i == j && heads_eq(x, y))
                    && a.lr_shared == b.lr_shared
                    && a.lr_per_agent == b.lr_per_agent
            })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SnapshotMeta {
    scheme: CacheScheme,
    dims: CacheDims,
    len: usize,
    seen_upto: Vec<usize>,
}

/// Byte counts per cache component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheBytes {
    pub dtype: Dtype,
    pub key: u64,
    /// Base values under split schemes, full values otherwise.
    pub value: u64,
    pub lr: u64,
    pub hidden: u64,
}

impl CacheBytes {
    pub fn total(&self) -> u64 {
        self.key + self.value + self.lr + self.hidden
    }

    /// Everything on the value path (full or base values plus low-rank rows).
    pub fn value_path(&self) -> u64 {
        self.value + self.lr
    }

    /// `self.value_path() / baseline.value_path()` as an exact fraction.
    pub fn value_ratio(&self, baseline: &CacheBytes) -> Ratio<u128> {
        Ratio::new(
            self.value_path() as u128,
            baseline.value_path().max(1) as u128,
        )
    }

    pub fn key_ratio(&self, baseline: &CacheBytes) -> Ratio<u128> {
        Ratio::new(self.key as u128, baseline.key.max(1) as u128)
    }
}

/// Bytes a store would hold after a trajectory of `len` rows in which agent
/// `a` has seen the first `seen_upto[a]` rows, without building it.
pub fn bytes_for_state(
    scheme: &CacheScheme,
    dims: &CacheDims,
    len: usize,
    seen_upto: &[usize],
    dtype: Dtype,
) -> CacheBytes {
    let size = dtype.size_bytes() as u64;
    let layers = dims.n_layers as u64;
    let d_kv = dims.d_out() as u64;
    let rank = dims.rank as u64;
    let len = len as u64;
    let seen_total: u64 = seen_upto.iter().map(|&s| s as u64).sum();
    let kv_rows = if scheme.shares_keys() {
        len
    } else {
        seen_total
    };
    let lr_rows = match scheme {
        CacheScheme::BaseShared => seen_total,
        CacheScheme::BaseLrShared => len,
        _ => 0,
    };
    let hidden = if scheme.hidden_boundary().is_some() {
        len * dims.d_model as u64
    } else {
        0
    };
    CacheBytes {
        dtype,
        key: kv_rows * d_kv * layers * size,
        value: kv_rows * d_kv * layers * size,
        lr: lr_rows * rank * layers * size,
        hidden: hidden * size,
    }
}

/// [`bytes_for_state`] once every agent has seen all `len` rows.
pub fn synced_bytes(
    scheme: &CacheScheme,
    dims: &CacheDims,
    len: usize,
    dtype: Dtype,
) -> CacheBytes {
    bytes_for_state(scheme, dims, len, &vec![len; dims.n_agents], dtype)
}

/// Value-path size relative to `NonShared` when every agent holds the whole
/// trajectory: `1/N + r/d_out` (BaseShared), `1/N + r/(N d_out)`
/// (BaseLRShared), `1/N` for the other sharing schemes.
pub fn value_ratio_closed_form(
    scheme: SchemeKind,
    n_agents: usize,
    rank: usize,
    d_out: usize,
) -> Ratio<u128> {
    let n = n_agents as u128;
    let r = rank as u128;
    let d = d_out as u128;
    let inv_n = Ratio::new(1, n);
    match scheme {
        SchemeKind::NonShared => Ratio::from_integer(1),
        SchemeKind::FullShared | SchemeKind::SelectiveRecompute => inv_n,
        SchemeKind::BaseShared => inv_n + Ratio::new(r, d),
        SchemeKind::BaseLrShared => inv_n + Ratio::new(r, n * d),
    }
}

pub fn key_ratio_closed_form(scheme: SchemeKind, n_agents: usize) -> Ratio<u128> {
    match scheme {
        SchemeKind::NonShared => Ratio::from_integer(1),
        _ => Ratio::new(1, n_agents as u128),
    }
}
