//! Cache-similarity measurements across agents and the cosine bound for
//! perturbations orthogonal to the base outputs.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::BlockConfig;
use crate::engine::{LayerCapture, Model, Phase};
use crate::error::{Error, Result};
use crate::kvcache::CacheScheme;
use crate::linalg::{cosine_similarity, l1_norm_mean, Matrix};
use crate::lora::expand_lr;
use crate::scalar::Scalar;

/// Published measurements on trained 8B models, carried in reports for
/// comparison only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub label: String,
    pub model: String,
    pub cos_full: f64,
    pub cos_base: f64,
    pub cos_adapter: f64,
    pub l1_base_over_adapter: f64,
}

pub fn published_references() -> Vec<PublishedReference> {
    vec![
        PublishedReference {
            label: "paper-reported".into(),
            model: "LLaMA-3.1-8B-Instruct".into(),
            cos_full: 0.9576,
            cos_base: 0.9726,
            cos_adapter: 0.0538,
            l1_base_over_adapter: 27.3,
        },
        PublishedReference {
            label: "paper-reported".into(),
            model: "Ministral-8B-Instruct".into(),
            cos_full: 0.9200,
            cos_base: 0.9530,
            cos_adapter: 0.0225,
            l1_base_over_adapter: 14.77,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub layer: usize,
    pub agents: (usize, usize),
    pub cos_base: f64,
    pub cos_full: f64,
    /// `None` when an adapter output is identically zero.
    pub cos_adapter: Option<f64>,
    pub cos_key: f64,
    pub cos_lr: Option<f64>,
    /// Mean absolute entry of the base outputs of both agents.
    pub l1_base: f64,
    pub l1_adapter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub cos_base: f64,
    pub cos_full: f64,
    pub cos_adapter: Option<f64>,
    pub cos_key: f64,
    pub cos_lr: Option<f64>,
    /// `mean(l1_base) / mean(l1_adapter)`; `None` with zero adapters.
    pub l1_base_over_adapter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub n_samples: usize,
    pub tokens_per_sample: Vec<usize>,
    /// How the numbers were averaged.
    pub method: String,
    /// Per layer and agent pair, averaged over samples.
    pub pairs: Vec<PairSimilarity>,
    pub summary: SimilaritySummary,
    pub published_reference: Vec<PublishedReference>,
}

fn cos<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<f64> {
    Ok(cosine_similarity(a, b)?.as_f64())
}

fn cos_opt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Option<f64>> {
    match cosine_similarity(a, b) {
        Ok(c) => Ok(Some(c.as_f64())),
        Err(Error::ZeroNorm(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

/// Each agent processes every sample on its own (no sharing); per layer
/// and agent pair the caches are compared with a cosine over the whole
/// token x dim block, then averaged over samples.
pub fn measure_similarity<T: Scalar>(
    model: &Model<T>,
    samples: &[Vec<u32>],
    block: BlockConfig,
) -> Result<SimilarityReport> {
    let cfg = model.config();
    if cfg.n_agents < 2 {
        return Err(Error::InvalidConfig(
            "similarity needs at least two agents".into(),
        ));
    }
    if samples.is_empty() || samples.iter().any(Vec::is_empty) {
        return Err(Error::InvalidConfig(
            "need at least one non-empty sample".into(),
        ));
    }
    let n = cfg.n_agents;
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    // per_sample[s][layer * pairs + p]
    let mut per_sample: Vec<Vec<PairSimilarity>> = Vec::with_capacity(samples.len());
    for tokens in samples {
        let mut caps: Vec<Vec<LayerCapture<T>>> = Vec::with_capacity(n);
        for agent in 0..n {
            let mut s = model.session(CacheScheme::NonShared, block)?;
            s.enable_capture();
            model.step(&mut s, agent, tokens, Phase::Prefill)?;
            caps.push(s.take_captures());
        }
        let mut rows = Vec::with_capacity(cfg.n_layers * pairs.len());
        for l in 0..cfg.n_layers {
            let delta = |agent: usize| -> Result<Matrix<T>> {
                expand_lr(&caps[agent][l].lr, model.layers()[l].wv.adapter(agent)?)
            };
            for &(i, j) in &pairs {
                let (ci, cj) = (&caps[i][l], &caps[j][l]);
                let (di, dj) = (delta(i)?, delta(j)?);
                rows.push(PairSimilarity {
                    layer: l,
                    agents: (i, j),
                    cos_base: cos(&ci.value_base, &cj.value_base)?,
                    cos_full: cos(&ci.value_full, &cj.value_full)?,
                    cos_adapter: cos_opt(&di, &dj)?,
                    cos_key: cos(&ci.keys, &cj.keys)?,
                    cos_lr: cos_opt(&ci.lr, &cj.lr)?,
                    l1_base: (l1_norm_mean(&ci.value_base).as_f64()
                        + l1_norm_mean(&cj.value_base).as_f64())
                        / 2.0,
                    l1_adapter: (l1_norm_mean(&di).as_f64() + l1_norm_mean(&dj).as_f64()) / 2.0,
                });
            }
        }
        per_sample.push(rows);
    }
    let n_rows = per_sample[0].len();
    let avg: Vec<PairSimilarity> = (0..n_rows)
        .map(|k| {
            let col = || per_sample.iter().map(move |s| &s[k]);
            PairSimilarity {
                layer: per_sample[0][k].layer,
                agents: per_sample[0][k].agents,
                cos_base: mean(col().map(|p| p.cos_base)),
                cos_full: mean(col().map(|p| p.cos_full)),
                cos_adapter: mean_opt(col().map(|p| p.cos_adapter)),
                cos_key: mean(col().map(|p| p.cos_key)),
                cos_lr: mean_opt(col().map(|p| p.cos_lr)),
                l1_base: mean(col().map(|p| p.l1_base)),
                l1_adapter: mean(col().map(|p| p.l1_adapter)),
            }
        })
        .collect();
    let l1_adapter = mean(avg.iter().map(|p| p.l1_adapter));
    let summary = SimilaritySummary {
        cos_base: mean(avg.iter().map(|p| p.cos_base)),
        cos_full: mean(avg.iter().map(|p| p.cos_full)),
        cos_adapter: mean_opt(avg.iter().map(|p| p.cos_adapter)),
        cos_key: mean(avg.iter().map(|p| p.cos_key)),
        cos_lr: mean_opt(avg.iter().map(|p| p.cos_lr)),
        l1_base_over_adapter: (l1_adapter > 0.0)
            .then(|| mean(avg.iter().map(|p| p.l1_base)) / l1_adapter),
    };
    Ok(SimilarityReport {
        n_samples: samples.len(),
        tokens_per_sample: samples.iter().map(Vec::len).collect(),
        method: "cosine over the flattened tokens x dims block per layer, agent pair and sample; then mean over samples; summary is the mean over layers and pairs".into(),
        pairs: avg,
        summary,
        published_reference: published_references(),
    })
}

pub const SIMILARITY_CSV_HEADER: &str =
    "layer,agent_i,agent_j,cos_base,cos_full,cos_adapter,cos_key,cos_lr,l1_base,l1_adapter";

pub fn similarity_csv(report: &SimilarityReport) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut out = String::from(SIMILARITY_CSV_HEADER);
    out.push('\n');
    for p in &report.pairs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            p.layer,
            p.agents.0,
            p.agents.1,
            p.cos_base,
            p.cos_full,
            opt(p.cos_adapter),
            p.cos_key,
            opt(p.cos_lr),
            p.l1_base,
            p.l1_adapter
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// Perturbation energies drawn at random.
    #[default]
    Random,
    /// `dY = 0`: the two cosines must agree exactly.
    ZeroDelta,
    /// `|dY| = |Y_base|` for both agents: the full cosine halves.
    EqualEnergy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub dim: usize,
    pub trials: usize,
    pub seed: u64,
    pub mode: PerturbationMode,
    /// Trials with `cos_full > cos_base`.
    pub violations: usize,
    /// Smallest `cos_base - cos_full` seen.
    pub min_margin: f64,
    pub mean_cos_base: f64,
    pub mean_cos_full: f64,
    /// Largest deviation from the mode's closed form: `|cos_full - cos_base|`
    /// for `zero_delta`, `|cos_full - cos_base / 2|` for `equal_energy`.
    pub max_closed_form_error: Option<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Classical Gram-Schmidt, each projection pass applied twice.
fn orthonormal_basis(vectors: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut u = v.to_vec();
        for _ in 0..2 {
            for b in &basis {
                let coef = dot(&u, b);
                u.iter_mut().zip(b).for_each(|(x, y)| *x -= coef * y);
            }
        }
        let n = norm(&u);
        u.iter_mut().for_each(|x| *x /= n);
        basis.push(u);
    }
    basis
}

/// Removes from `v` every component in the span of `span`.
fn orthogonalize(v: &mut [f64], span: &[&[f64]]) {
    let basis = orthonormal_basis(span);
    for _ in 0..2 {
        for b in &basis {
            let coef = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= coef * y);
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    Matrix::<f64>::random_normal(1, d, 1.0, rng).into_vec()
}

fn cos_vec(a: &[f64], b: &[f64]) -> Result<f64> {
    let ma = Matrix::new(1, a.len(), a.to_vec())?;
    let mb = Matrix::new(1, b.len(), b.to_vec())?;
    cosine_similarity(&ma, &mb)
}

/// Builds base outputs with a non-negative cosine and perturbations exactly
/// orthogonal to both bases and to each other, then checks
/// `cos(Y_i, Y_j) <= cos(Y_base_i, Y_base_j)` on every trial.
pub fn verify_cosine_bound(
    dim: usize,
    trials: usize,
    seed: u64,
    mode: PerturbationMode,
) -> Result<BoundReport> {
    if dim < 4 {
        return Err(Error::InvalidConfig(format!(
            "need at least 4 dimensions to orthogonalize, got {dim}"
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut min_margin = f64::INFINITY;
    let (mut sum_base, mut sum_full) = (0.0, 0.0);
    let mut max_err: f64 = 0.0;
    for _ in 0..trials {
        let base_i = gaussian(&mut rng, dim);
        // Mix in base_i so the base cosine spans [0, 1).
        let mix: f64 = rng.random_range(0.0..1.0);
        let noise = gaussian(&mut rng, dim);
        let mut base_j: Vec<f64> = base_i
            .iter()
            .zip(&noise)
            .map(|(a, b)| mix * a + (1.0 - mix) * b)
            .collect();
        if dot(&base_i, &base_j) < 0.0 {
            base_j.iter_mut().for_each(|v| *v = -*v);
        }
        let mut d_i = gaussian(&mut rng, dim);
        orthogonalize(&mut d_i, &[&base_i, &base_j]);
        let mut d_j = gaussian(&mut rng, dim);
        orthogonalize(&mut d_j, &[&base_i, &base_j, &d_i]);
        let (e_i, e_j) = match mode {
            PerturbationMode::Random => (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)),
            PerturbationMode::ZeroDelta => (0.0, 0.0),
            PerturbationMode::EqualEnergy => (1.0, 1.0),
        };
        let target_i = e_i * norm(&base_i) / norm(&d_i);
        let target_j = e_j * norm(&base_j) / norm(&d_j);
        let full_i: Vec<f64> = base_i
            .iter()
            .zip(&d_i)
            .map(|(b, d)| b + target_i * d)
            .collect();
        let full_j: Vec<f64> = base_j
            .iter()
            .zip(&d_j)
            .map(|(b, d)| b + target_j * d)
            .collect();

        let c_base = cos_vec(&base_i, &base_j)?;
        let c_full = cos_vec(&full_i, &full_j)?;
        if c_full > c_base {
            violations += 1;
        }
        min_margin = min_margin.min(c_base - c_full);
        sum_base += c_base;
        sum_full += c_full;
        match mode {
            PerturbationMode::ZeroDelta => max_err = max_err.max((c_full - c_base).abs()),
            PerturbationMode::EqualEnergy => max_err = max_err.max((c_full - c_base / 2.0).abs()),
            PerturbationMode::Random => {}
        }
    }
    Ok(BoundReport {
        dim,
        trials,
        seed,
        mode,
        violations,
        min_margin,
        mean_cos_base: sum_base / trials as f64,
        mean_cos_full: sum_full / trials as f64,
        max_closed_form_error: (mode != PerturbationMode::Random).then_some(max_err),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{LayerWeights, ModelConfig};
    use crate::lora::{LoraAdapter, MultiLoraSet};

    fn cfg(n_layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model: 16,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: 4,
            d_mlp: 16,
            n_agents: 3,
            rank: 4,
            vocab: 40,
            seed: 21,
            ..ModelConfig::default()
        }
    }

    fn samples() -> Vec<Vec<u32>> {
        vec![
            (0..24).map(|i| (i * 5 + 1) % 40).collect(),
            (0..17).map(|i| (i * 11 + 3) % 40).collect(),
        ]
    }

    fn block() -> BlockConfig {
        BlockConfig::new(8, 8).unwrap()
    }

    /// Copies agent 0's adapters to every agent.
    fn clone_agent_zero(model: Model<f64>) -> Model<f64> {
        let (cfg, emb, layers, head) = model.into_parts();
        let dup = |s: &MultiLoraSet<f64>| {
            let a0: LoraAdapter<f64> = s.adapters()[0].clone();
            MultiLoraSet::new(
                s.base_weight().clone(),
                vec![a0; s.n_agents()],
                s.shared_a(),
            )
            .unwrap()
        };
        let layers = layers
            .into_iter()
            .map(|lw| LayerWeights {
                wq: dup(&lw.wq),
                wv: dup(&lw.wv),
                ..lw
            })
            .collect();
        Model::from_parts(cfg, emb, layers, head).unwrap()
    }

    #[test]
    fn identical_adapters_give_unit_cosines() {
        let model = clone_agent_zero(Model::build(&cfg(2)).unwrap());
        let r = measure_similarity(&model, &samples(), block()).unwrap();
        for p in &r.pairs {
            for c in [p.cos_base, p.cos_full, p.cos_adapter.unwrap()] {
                assert!((c - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_adapters_give_unit_cosines() {
        let model = Model::<f64>::build(&ModelConfig {
            adapter_gain: 0.0,
            ..cfg(2)
        })
        .unwrap();
        let r = measure_similarity(&model, &samples(), block()).unwrap();
        for p in &r.pairs {
            assert!((p.cos_base - 1.0).abs() < 1e-12);
            assert_eq!(p.cos_base, p.cos_full);
            assert_eq!(p.cos_adapter, None);
        }
        assert_eq!(r.summary.l1_base_over_adapter, None);
    }

    #[test]
    fn independent_adapters_are_decorrelated() {
        let model = Model::<f64>::build(&cfg(11)).unwrap();
        let r = measure_similarity(&model, &samples(), block()).unwrap();
        assert_eq!(r.pairs.len(), 33);
        let s = &r.summary;
        assert!(s.cos_adapter.unwrap().abs() < 0.2, "{s:?}");
        assert!(s.cos_base > s.cos_full, "{s:?}");
        for p in &r.pairs {
            for c in [p.cos_base, p.cos_full, p.cos_key] {
                assert!((-1.0..=1.0).contains(&c));
            }
            assert!(p.l1_base >= 0.0 && p.l1_adapter >= 0.0);
        }
    }

    #[test]
    fn shared_a_lr_cache_identical_at_first_layer() {
        let model = Model::<f64>::build(&cfg(3)).unwrap();
        let r = measure_similarity(&model, &samples(), block()).unwrap();
        for p in r.pairs.iter().filter(|p| p.layer == 0) {
            for c in [p.cos_lr.unwrap(), p.cos_base, p.cos_key] {
                assert!((c - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alpha_scales_l1_but_not_cosines() {
        let a = Model::<f64>::build(&cfg(1)).unwrap();
        let b = Model::<f64>::build(&ModelConfig {
            lora_alpha: 32.0,
            ..cfg(1)
        })
        .unwrap();
        let ra = measure_similarity(&a, &samples(), block()).unwrap();
        let rb = measure_similarity(&b, &samples(), block()).unwrap();
        for (pa, pb) in ra.pairs.iter().zip(&rb.pairs) {
            assert_eq!(pa.cos_base, pb.cos_base);
            assert!((pa.cos_adapter.unwrap() - pb.cos_adapter.unwrap()).abs() < 1e-12);
            assert!((pb.l1_adapter - 2.0 * pa.l1_adapter).abs() < 1e-12 * pa.l1_adapter);
        }
    }

    #[test]
    fn single_agent_is_rejected() {
        let model = Model::<f64>::build(&ModelConfig {
            n_agents: 1,
            ..cfg(1)
        })
        .unwrap();
        assert!(measure_similarity(&model, &samples(), block()).is_err());
    }

    #[test]
    fn csv_has_one_row_per_pair() {
        let model = Model::<f64>::build(&cfg(2)).unwrap();
        let r = measure_similarity(&model, &samples(), block()).unwrap();
        let csv = similarity_csv(&r);
        assert_eq!(csv.lines().count(), 1 + 6);
        assert!(csv.starts_with(SIMILARITY_CSV_HEADER));
    }

    #[test]
    fn bound_holds_on_random_trials() {
        let r = verify_cosine_bound(256, 1000, 7, PerturbationMode::Random).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.min_margin > 0.0);
    }

    #[test]
    fn zero_delta_is_exact_equality() {
        let r = verify_cosine_bound(16, 50, 1, PerturbationMode::ZeroDelta).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.max_closed_form_error, Some(0.0));
        assert_eq!(r.min_margin, 0.0);
    }

    #[test]
    fn equal_energy_halves_the_cosine() {
        let r = verify_cosine_bound(64, 200, 3, PerturbationMode::EqualEnergy).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.max_closed_form_error.unwrap() < 1e-12, "{r:?}");
    }

    #[test]
    fn bound_rejects_tiny_dims() {
        assert!(verify_cosine_bound(3, 1, 0, PerturbationMode::Random).is_err());
        assert!(verify_cosine_bound(8, 0, 0, PerturbationMode::Random).is_err());
    }
}
