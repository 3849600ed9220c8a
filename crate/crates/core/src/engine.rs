//! Toy decoder-only transformer that executes agent steps under a cache
//! scheme and counts every multiply-accumulate.
//!
//! Blocks are pre-norm (weightless RMSNorm), attention with GQA and optional
//! RoPE on queries and keys, then a two-matmul SiLU MLP. LoRA adapters sit on
//! the query and value projections only.
//!
//! A step runs exactly the rows its [`PrefillPlan`] asks for. At layer `l`
//! the rows passing through are `plan.layer(l).rows`; of those only the rows
//! some later layer (or the logits) needs get queries, attention and MLP.
//! [`Model::account_step`] walks the same schedule without arithmetic and
//! must report identical counters.

use std::io::{Read, Write};
use std::ops::{Add, AddAssign, Range, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{gqa_attention, BlockConfig, GqaInputs, KernelMacs};
use crate::container::{read_container, take_tensor, write_container};
use crate::error::{Error, Result};
use crate::kvcache::{CacheDims, CacheScheme, KvRows, KvStore, LayerOutputs, LrRows, PrefillPlan};
use crate::linalg::{matmul_macs, Matrix};
use crate::lora::{expand_lr, LoraAdapter, MultiLoraSet};
use crate::scalar::Scalar;

const RMS_EPS: f64 = 1e-6;

fn default_alpha() -> f64 {
    16.0
}

fn default_true() -> bool {
    true
}

fn default_adapter_gain() -> f64 {
    0.5
}

fn default_rope_base() -> f64 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub n_agents: usize,
    pub rank: usize,
    pub rope: bool,
    pub vocab: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub lora_alpha: f64,
    #[serde(default = "default_true")]
    pub shared_a: bool,
    /// Standard deviation multiplier for the up-projections `B_i`.
    #[serde(default = "default_adapter_gain")]
    pub adapter_gain: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_q_heads: 8,
            n_kv_heads: 2,
            d_head: 8,
            d_mlp: 128,
            n_agents: 3,
            rank: 8,
            rope: true,
            vocab: 256,
            seed: 0,
            lora_alpha: default_alpha(),
            shared_a: true,
            adapter_gain: default_adapter_gain(),
            rope_base: default_rope_base(),
        }
    }
}

impl ModelConfig {
    /// Width of the key and value projections.
    pub fn d_kv(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    pub fn cache_dims(&self) -> CacheDims {
        CacheDims {
            n_layers: self.n_layers,
            n_kv_heads: self.n_kv_heads,
            d_head: self.d_head,
            rank: self.rank,
            d_model: self.d_model,
            n_agents: self.n_agents,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("n_agents", self.n_agents),
            ("vocab", self.vocab),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.d_model != self.n_q_heads * self.d_head {
            return bad(format!(
                "d_model ({}) must equal n_q_heads * d_head ({} * {})",
                self.d_model, self.n_q_heads, self.d_head
            ));
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return bad(format!(
                "n_q_heads ({}) must be divisible by n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            ));
        }
        if self.rank > self.d_kv().min(self.d_model) {
            return bad(format!("rank {} exceeds projection width", self.rank));
        }
        if self.rope && !self.d_head.is_multiple_of(2) {
            return bad("rope needs an even d_head".into());
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return bad("lora_alpha must be finite and positive".into());
        }
        if !(self.adapter_gain.is_finite() && self.adapter_gain >= 0.0) {
            return bad("adapter_gain must be finite and non-negative".into());
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return bad("rope_base must be > 1".into());
        }
        Ok(())
    }
}

/// Multiply-accumulate counters. Every matmul the engine performs adds to
/// exactly one category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    pub qkv_proj: u64,
    pub lora_down: u64,
    pub lora_up: u64,
    pub attn_qk: u64,
    pub attn_pv: u64,
    pub attn_lr: u64,
    pub out_proj: u64,
    pub mlp: u64,
    pub lm_head: u64,
    /// Tokens needing a hidden-state pass, times `n_layers`.
    pub hidden_token_passes: u64,
    /// `(token, layer)` pairs actually run through a layer. Equals
    /// `hidden_token_passes` except where a hidden-state cache lets
    /// `SelectiveRecompute` skip layers.
    pub layer_passes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacCategory {
    QkvProj,
    LoraDown,
    LoraUp,
    AttnQk,
    AttnPv,
    AttnLr,
    OutProj,
    Mlp,
    LmHead,
}

impl FlopCounter {
    pub fn total_macs(&self) -> u64 {
        self.qkv_proj
            + self.lora_down
            + self.lora_up
            + self.attn_qk
            + self.attn_pv
            + self.attn_lr
            + self.out_proj
            + self.mlp
            + self.lm_head
    }

    pub fn add(&mut self, cat: MacCategory, macs: u64) {
        let slot = match cat {
            MacCategory::QkvProj => &mut self.qkv_proj,
            MacCategory::LoraDown => &mut self.lora_down,
            MacCategory::LoraUp => &mut self.lora_up,
            MacCategory::AttnQk => &mut self.attn_qk,
            MacCategory::AttnPv => &mut self.attn_pv,
            MacCategory::AttnLr => &mut self.attn_lr,
            MacCategory::OutProj => &mut self.out_proj,
            MacCategory::Mlp => &mut self.mlp,
            MacCategory::LmHead => &mut self.lm_head,
        };
        *slot += macs;
    }

    fn add_kernel(&mut self, k: KernelMacs) {
        self.attn_qk += k.qk;
        self.attn_pv += k.pv;
        self.attn_lr += k.lr;
    }

    fn fields(&self) -> [u64; 11] {
        [
            self.qkv_proj,
            self.lora_down,
            self.lora_up,
            self.attn_qk,
            self.attn_pv,
            self.attn_lr,
            self.out_proj,
            self.mlp,
            self.lm_head,
            self.hidden_token_passes,
            self.layer_passes,
        ]
    }

    fn from_fields(f: [u64; 11]) -> Self {
        Self {
            qkv_proj: f[0],
            lora_down: f[1],
            lora_up: f[2],
            attn_qk: f[3],
            attn_pv: f[4],
            attn_lr: f[5],
            out_proj: f[6],
            mlp: f[7],
            lm_head: f[8],
            hidden_token_passes: f[9],
            layer_passes: f[10],
        }
    }
}

impl Add for FlopCounter {
    type Output = FlopCounter;

    fn add(self, rhs: Self) -> Self {
        let (a, b) = (self.fields(), rhs.fields());
        Self::from_fields(std::array::from_fn(|i| a[i] + b[i]))
    }
}

impl AddAssign for FlopCounter {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl Sub for FlopCounter {
    type Output = FlopCounter;

    /// Panics if any counter of `rhs` exceeds `self`.
    fn sub(self, rhs: Self) -> Self {
        let (a, b) = (self.fields(), rhs.fields());
        Self::from_fields(std::array::from_fn(|i| {
            a[i].checked_sub(b[i]).expect("counter underflow")
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    /// `d_model x d_model` with per-agent query adapters.
    pub wq: MultiLoraSet<T>,
    /// `d_model x d_kv`.
    pub wk: Matrix<T>,
    /// `d_model x d_kv` with per-agent value adapters.
    pub wv: MultiLoraSet<T>,
    /// `d_model x d_model`.
    pub wo: Matrix<T>,
    /// `d_model x d_mlp`.
    pub w1: Matrix<T>,
    /// `d_mlp x d_model`.
    pub w2: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    cfg: ModelConfig,
    /// `vocab x d_model`.
    embedding: Matrix<T>,
    layers: Vec<LayerWeights<T>>,
    /// `d_model x vocab`.
    lm_head: Matrix<T>,
}

/// Which part of an agent step a chunk belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Prompt tokens; counts towards the TTFT proxy.
    Prefill,
    /// One generated token fed back.
    Decode,
    /// No new tokens; brings the agent's caches up to the trajectory end.
    CatchUp,
}

/// Per-layer activations recorded for analysis (full-value schemes only).
#[derive(Debug, Clone)]
pub struct LayerCapture<T> {
    pub layer: usize,
    /// Token rows the projections below cover.
    pub rows: Range<usize>,
    /// Keys after RoPE, heads side by side.
    pub keys: Matrix<T>,
    pub value_base: Matrix<T>,
    /// Unscaled `h * A_v`.
    pub lr: Matrix<T>,
    pub value_full: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct Session<T> {
    store: KvStore<T>,
    tokens: Vec<u32>,
    counter: FlopCounter,
    block: BlockConfig,
    capture: Option<Vec<LayerCapture<T>>>,
}

impl<T: Scalar> Session<T> {
    pub fn store(&self) -> &KvStore<T> {
        &self.store
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn counter(&self) -> FlopCounter {
        self.counter
    }

    pub fn block(&self) -> BlockConfig {
        self.block
    }

    /// Starts recording [`LayerCapture`]s on subsequent steps.
    pub fn enable_capture(&mut self) {
        self.capture.get_or_insert_with(Vec::new);
    }

    pub fn take_captures(&mut self) -> Vec<LayerCapture<T>> {
        self.capture
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub plan: PrefillPlan,
    pub phase: Phase,
    /// Logits of the last new token, if the step appended any.
    pub logits: Option<Vec<T>>,
    pub delta: FlopCounter,
}

/// Plan-only stand-in for a session: the trajectory length and what each
/// agent has seen, enough to reproduce every plan and counter.
#[derive(Debug, Clone)]
pub struct Ledger {
    scheme: CacheScheme,
    len: usize,
    seen_upto: Vec<usize>,
    counter: FlopCounter,
}

impl Ledger {
    pub fn counter(&self) -> FlopCounter {
        self.counter
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn seen_upto(&self) -> &[usize] {
        &self.seen_upto
    }

    pub fn scheme(&self) -> &CacheScheme {
        &self.scheme
    }
}

/// One unit of work for [`Model::step`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub agent: usize,
    pub tokens: Vec<u32>,
    pub phase: Phase,
}

/// Row ranges for one layer of a step.
#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerSchedule {
    rows: Range<usize>,
    kv_rows: Range<usize>,
    lr_rows: Range<usize>,
    /// Rows whose output at this layer is needed later.
    out_rows: Range<usize>,
}

fn schedule(plan: &PrefillPlan, layer: usize, n_layers: usize) -> LayerSchedule {
    let lp = plan.layer(layer);
    let end = plan.end();
    let out_rows = if layer + 1 < n_layers {
        plan.layer(layer + 1).rows.start.max(lp.rows.start)..end
    } else {
        plan.prior_len..end
    };
    LayerSchedule {
        rows: lp.rows,
        kv_rows: lp.kv_rows,
        lr_rows: lp.lr_rows,
        out_rows,
    }
}

fn counted<T: Scalar>(
    counter: &mut FlopCounter,
    cat: MacCategory,
    a: &Matrix<T>,
    b: &Matrix<T>,
) -> Result<Matrix<T>> {
    counter.add(cat, matmul_macs(a, b));
    a.matmul(b)
}

fn rms_norm<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let eps = T::of(RMS_EPS);
    let n = T::of_usize(x.cols());
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / n;
        let inv = (ms + eps).sqrt().recip();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn silu<T: Scalar>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

/// Rotates each `d_head` slice of `x` by its absolute row position.
fn apply_rope<T: Scalar>(
    x: &mut Matrix<T>,
    first_pos: usize,
    n_heads: usize,
    d_head: usize,
    base: f64,
) {
    let half = d_head / 2;
    for i in 0..x.rows() {
        let pos = (first_pos + i) as f64;
        let row = x.row_mut(i);
        for h in 0..n_heads {
            let head = &mut row[h * d_head..(h + 1) * d_head];
            for p in 0..half {
                let theta = pos * base.powf(-2.0 * p as f64 / d_head as f64);
                let (sin, cos) = (T::of(theta.sin()), T::of(theta.cos()));
                let (x1, x2) = (head[p], head[p + half]);
                head[p] = x1 * cos - x2 * sin;
                head[p + half] = x1 * sin + x2 * cos;
            }
        }
    }
}

fn split_heads<T: Scalar>(m: &Matrix<T>, n_heads: usize, d_head: usize) -> Vec<Matrix<T>> {
    (0..n_heads)
        .map(|g| m.slice_cols(g * d_head..(g + 1) * d_head))
        .collect()
}

fn rows_of<T: Scalar>(x: &Matrix<T>, x_start: usize, r: &Range<usize>) -> Matrix<T> {
    x.slice_rows(r.start - x_start..r.end - x_start)
}

fn build_adapters<T: Scalar>(
    cfg: &ModelConfig,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LoraAdapter<T>>> {
    let alpha = T::of(cfg.lora_alpha);
    let a_std = 1.0 / (d_in as f64).sqrt();
    let b_std = if cfg.rank == 0 {
        0.0
    } else {
        cfg.adapter_gain / (cfg.rank as f64).sqrt()
    };
    let shared = Matrix::random_normal(d_in, cfg.rank, a_std, rng);
    (0..cfg.n_agents)
        .map(|_| {
            let a = if cfg.shared_a {
                shared.clone()
            } else {
                Matrix::random_normal(d_in, cfg.rank, a_std, rng)
            };
            let b = Matrix::random_normal(cfg.rank, d_out, b_std, rng);
            LoraAdapter::new(a, b, alpha)
        })
        .collect()
}

impl<T: Scalar> Model<T> {
    /// Seeded scaled-Gaussian weights; the same seed always gives the same
    /// model (up to rounding between `f32` and `f64`).
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let d_kv = cfg.d_kv();
        let w_std = 1.0 / (d as f64).sqrt();
        let embedding = Matrix::random_normal(cfg.vocab, d, 1.0, &mut rng);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let wq_base = Matrix::random_normal(d, d, w_std, &mut rng);
            let q_adapters = build_adapters(cfg, d, d, &mut rng)?;
            let wk = Matrix::random_normal(d, d_kv, w_std, &mut rng);
            let wv_base = Matrix::random_normal(d, d_kv, w_std, &mut rng);
            let v_adapters = build_adapters(cfg, d, d_kv, &mut rng)?;
            let wo = Matrix::random_normal(d, d, w_std, &mut rng);
            let w1 = Matrix::random_normal(d, cfg.d_mlp, w_std, &mut rng);
            let w2 = Matrix::random_normal(cfg.d_mlp, d, 1.0 / (cfg.d_mlp as f64).sqrt(), &mut rng);
            layers.push(LayerWeights {
                wq: MultiLoraSet::new(wq_base, q_adapters, cfg.shared_a)?,
                wk,
                wv: MultiLoraSet::new(wv_base, v_adapters, cfg.shared_a)?,
                wo,
                w1,
                w2,
            });
        }
        let lm_head = Matrix::random_normal(d, cfg.vocab, w_std, &mut rng);
        Self::from_parts(cfg.clone(), embedding, layers, lm_head)
    }

    /// Assembles a model from explicit weights, checking every shape.
    pub fn from_parts(
        cfg: ModelConfig,
        embedding: Matrix<T>,
        layers: Vec<LayerWeights<T>>,
        lm_head: Matrix<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let d_kv = cfg.d_kv();
        let expect = |name: &str, m: &Matrix<T>, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::InvalidConfig(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    m.shape()
                )));
            }
            Ok(())
        };
        expect("embedding", &embedding, (cfg.vocab, d))?;
        expect("lm_head", &lm_head, (d, cfg.vocab))?;
        if layers.len() != cfg.n_layers {
            return Err(Error::InvalidConfig(format!(
                "expected {} layers, got {}",
                cfg.n_layers,
                layers.len()
            )));
        }
        for (l, lw) in layers.iter().enumerate() {
            expect(&format!("layer{l}.wq"), lw.wq.base_weight(), (d, d))?;
            expect(&format!("layer{l}.wk"), &lw.wk, (d, d_kv))?;
            expect(&format!("layer{l}.wv"), lw.wv.base_weight(), (d, d_kv))?;
            expect(&format!("layer{l}.wo"), &lw.wo, (d, d))?;
            expect(&format!("layer{l}.w1"), &lw.w1, (d, cfg.d_mlp))?;
            expect(&format!("layer{l}.w2"), &lw.w2, (cfg.d_mlp, d))?;
            for set in [&lw.wq, &lw.wv] {
                if set.n_agents() != cfg.n_agents || set.rank() != cfg.rank {
                    return Err(Error::InvalidConfig(format!(
                        "layer {l}: adapters must cover {} agents at rank {}",
                        cfg.n_agents, cfg.rank
                    )));
                }
                if cfg.shared_a && !set.shared_a() {
                    return Err(Error::InvalidConfig(format!(
                        "layer {l}: config asks for shared A"
                    )));
                }
            }
        }
        Ok(Self {
            cfg,
            embedding,
            layers,
            lm_head,
        })
    }

    pub fn into_parts(self) -> (ModelConfig, Matrix<T>, Vec<LayerWeights<T>>, Matrix<T>) {
        (self.cfg, self.embedding, self.layers, self.lm_head)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[LayerWeights<T>] {
        &self.layers
    }

    pub fn embedding(&self) -> &Matrix<T> {
        &self.embedding
    }

    pub fn lm_head(&self) -> &Matrix<T> {
        &self.lm_head
    }

    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let cast_set = |s: &MultiLoraSet<T>| -> Result<MultiLoraSet<U>> {
            let adapters = s
                .adapters()
                .iter()
                .map(|a| LoraAdapter::new(a.a().cast(), a.b().cast(), U::of(a.alpha().as_f64())))
                .collect::<Result<Vec<_>>>()?;
            MultiLoraSet::new(s.base_weight().cast(), adapters, s.shared_a())
        };
        let layers = self
            .layers
            .iter()
            .map(|lw| {
                Ok(LayerWeights {
                    wq: cast_set(&lw.wq)?,
                    wk: lw.wk.cast(),
                    wv: cast_set(&lw.wv)?,
                    wo: lw.wo.cast(),
                    w1: lw.w1.cast(),
                    w2: lw.w2.cast(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_parts(
            self.cfg.clone(),
            self.embedding.cast(),
            layers,
            self.lm_head.cast(),
        )
    }

    fn check_scheme(&self, scheme: &CacheScheme) -> Result<()> {
        scheme.validate(self.cfg.n_layers)?;
        if matches!(scheme, CacheScheme::BaseLrShared) && self.cfg.rank > 0 && !self.cfg.shared_a {
            return Err(Error::InvalidConfig(
                "BaseLRShared needs adapters with a shared down-projection".into(),
            ));
        }
        Ok(())
    }

    pub fn session(&self, scheme: CacheScheme, block: BlockConfig) -> Result<Session<T>> {
        self.check_scheme(&scheme)?;
        block.validate()?;
        Ok(Session {
            store: KvStore::new(scheme, self.cfg.cache_dims())?,
            tokens: Vec::new(),
            counter: FlopCounter::default(),
            block,
            capture: None,
        })
    }

    pub fn ledger(&self, scheme: CacheScheme) -> Result<Ledger> {
        self.check_scheme(&scheme)?;
        Ok(Ledger {
            scheme,
            len: 0,
            seen_upto: vec![0; self.cfg.n_agents],
            counter: FlopCounter::default(),
        })
    }

    /// Runs one chunk for `agent`: appends `tokens` to the trajectory (empty
    /// for a catch-up) and computes whatever the scheme's plan requires.
    pub fn step(
        &self,
        s: &mut Session<T>,
        agent: usize,
        tokens: &[u32],
        phase: Phase,
    ) -> Result<StepOutput<T>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::InvalidConfig(format!(
                "token {bad} outside vocab {}",
                self.cfg.vocab
            )));
        }
        let plan = s.store.plan_step(agent, tokens.len())?;
        s.tokens.extend_from_slice(tokens);
        let mut delta = FlopCounter {
            hidden_token_passes: (plan.hidden_tokens() * self.cfg.n_layers) as u64,
            ..FlopCounter::default()
        };
        let logits = if plan.hidden_pass.is_empty() {
            None
        } else {
            self.run_layers(s, &plan, &mut delta)?
        };
        s.store.finish_step(&plan)?;
        s.counter += delta;
        Ok(StepOutput {
            plan,
            phase,
            logits,
            delta,
        })
    }

    fn run_layers(
        &self,
        s: &mut Session<T>,
        plan: &PrefillPlan,
        delta: &mut FlopCounter,
    ) -> Result<Option<Vec<T>>> {
        let cfg = &self.cfg;
        let agent = plan.agent;
        let n = cfg.n_layers;
        let end = plan.end();
        let new = plan.prior_len..end;
        let split = s.store.scheme().splits_values();
        let boundary = s.store.scheme().hidden_boundary();

        let first = schedule(plan, 0, n);
        let mut x_start = first.rows.start;
        let mut x = Matrix::from_fn(first.rows.len(), cfg.d_model, |i, j| {
            self.embedding.get(s.tokens[x_start + i] as usize, j)
        });

        for (l, lw) in self.layers.iter().enumerate() {
            let sch = schedule(plan, l, n);
            if sch.rows.start < x_start {
                let hidden = s.store.hidden().ok_or_else(|| {
                    Error::Plan(format!(
                        "layer {l} needs rows the hidden cache does not hold"
                    ))
                })?;
                let mut joined = hidden.slice_rows(sch.rows.start..x_start);
                joined.append_rows(&x)?;
                x = joined;
            } else if sch.rows.start > x_start {
                x = rows_of(&x, x_start, &(sch.rows.start..end));
            }
            x_start = sch.rows.start;
            delta.layer_passes += sch.rows.len() as u64;
            if boundary == Some(l) && !new.is_empty() {
                s.store
                    .write_hidden(new.start, &rows_of(&x, x_start, &new))?;
            }

            let h = rms_norm(&x);
            let adapter_v = lw.wv.adapter(agent)?;
            let kv = if sch.kv_rows.is_empty() {
                None
            } else {
                let hk = rows_of(&h, x_start, &sch.kv_rows);
                let mut k = counted(delta, MacCategory::QkvProj, &hk, &lw.wk)?;
                if cfg.rope {
                    apply_rope(
                        &mut k,
                        sch.kv_rows.start,
                        cfg.n_kv_heads,
                        cfg.d_head,
                        cfg.rope_base,
                    );
                }
                let v_base = counted(delta, MacCategory::QkvProj, &hk, lw.wv.base_weight())?;
                let values = if split {
                    v_base.clone()
                } else {
                    let lr = counted(delta, MacCategory::LoraDown, &hk, adapter_v.a())?;
                    delta.add(MacCategory::LoraUp, matmul_macs(&lr, adapter_v.b()));
                    let full = v_base.add(&expand_lr(&lr, adapter_v)?)?;
                    if let Some(caps) = s.capture.as_mut() {
                        caps.push(LayerCapture {
                            layer: l,
                            rows: sch.kv_rows.clone(),
                            keys: k.clone(),
                            value_base: v_base.clone(),
                            lr,
                            value_full: full.clone(),
                        });
                    }
                    full
                };
                Some(KvRows {
                    start: sch.kv_rows.start,
                    keys: split_heads(&k, cfg.n_kv_heads, cfg.d_head),
                    values: split_heads(&values, cfg.n_kv_heads, cfg.d_head),
                })
            };
            let lr = if split && !sch.lr_rows.is_empty() {
                let hl = rows_of(&h, x_start, &sch.lr_rows);
                Some(LrRows {
                    start: sch.lr_rows.start,
                    lr: counted(delta, MacCategory::LoraDown, &hl, adapter_v.a())?,
                })
            } else {
                None
            };
            s.store.append(agent, &LayerOutputs { layer: l, kv, lr })?;

            let out = sch.out_rows.clone();
            if out.is_empty() {
                x = Matrix::zeros(0, cfg.d_model);
                x_start = end;
                continue;
            }
            let ho = rows_of(&h, x_start, &out);
            let adapter_q = lw.wq.adapter(agent)?;
            let q_lr = counted(delta, MacCategory::LoraDown, &ho, adapter_q.a())?;
            delta.add(MacCategory::LoraUp, matmul_macs(&q_lr, adapter_q.b()));
            let mut q = counted(delta, MacCategory::QkvProj, &ho, lw.wq.base_weight())?
                .add(&expand_lr(&q_lr, adapter_q)?)?;
            if cfg.rope {
                apply_rope(&mut q, out.start, cfg.n_q_heads, cfg.d_head, cfg.rope_base);
            }

            let view = s.store.view(agent, l)?;
            let no_lr = Matrix::zeros(end, 0);
            let (v_lr, b_up, scale) = match view.lr {
                Some(lr) => (
                    lr,
                    split_heads(adapter_v.b(), cfg.n_kv_heads, cfg.d_head),
                    adapter_v.scale(),
                ),
                None => (
                    &no_lr,
                    vec![Matrix::zeros(0, cfg.d_head); cfg.n_kv_heads],
                    T::zero(),
                ),
            };
            let (attn, kmacs) = gqa_attention(
                &GqaInputs {
                    q: &q,
                    k: view.keys,
                    v_base: view.values,
                    v_lr,
                    b_up: &b_up,
                    lora_scale: scale,
                    query_offset: out.start,
                    n_q_heads: cfg.n_q_heads,
                },
                s.block,
            )?;
            delta.add_kernel(kmacs);

            let mut x_out = rows_of(&x, x_start, &out);
            x_out.add_assign(&counted(delta, MacCategory::OutProj, &attn, &lw.wo)?)?;
            let h2 = rms_norm(&x_out);
            let m = counted(delta, MacCategory::Mlp, &h2, &lw.w1)?.map(silu);
            x_out.add_assign(&counted(delta, MacCategory::Mlp, &m, &lw.w2)?)?;
            x = x_out;
            x_start = out.start;
        }

        if new.is_empty() {
            return Ok(None);
        }
        let last = rms_norm(&x.slice_rows(x.rows() - 1..x.rows()));
        let logits = counted(delta, MacCategory::LmHead, &last, &self.lm_head)?;
        Ok(Some(logits.into_vec()))
    }

    /// Same schedule and counters as [`Model::step`] without doing any
    /// arithmetic, for traces too long to execute.
    pub fn account_step(
        &self,
        ledger: &mut Ledger,
        agent: usize,
        new_tokens: usize,
    ) -> Result<(PrefillPlan, FlopCounter)> {
        let cfg = &self.cfg;
        let plan = crate::kvcache::plan_from_state(
            &ledger.scheme,
            &ledger.seen_upto,
            ledger.len,
            agent,
            new_tokens,
        )?;
        let n = cfg.n_layers as u64;
        let mut delta = FlopCounter {
            hidden_token_passes: plan.hidden_tokens() as u64 * n,
            ..FlopCounter::default()
        };
        if !plan.hidden_pass.is_empty() {
            let (d, d_kv, r, dh) = (
                cfg.d_model as u64,
                cfg.d_kv() as u64,
                cfg.rank as u64,
                cfg.d_head as u64,
            );
            let split = ledger.scheme.splits_values();
            let end = plan.end() as u64;
            for l in 0..cfg.n_layers {
                let sch = schedule(&plan, l, cfg.n_layers);
                delta.layer_passes += sch.rows.len() as u64;
                let kv = sch.kv_rows.len() as u64;
                delta.qkv_proj += 2 * kv * d * d_kv;
                if !split {
                    delta.lora_down += kv * d * r;
                    delta.lora_up += kv * r * d_kv;
                } else {
                    delta.lora_down += sch.lr_rows.len() as u64 * d * r;
                }
                let o = sch.out_rows.len() as u64;
                if o == 0 {
                    continue;
                }
                delta.lora_down += o * d * r;
                delta.lora_up += o * r * d;
                delta.qkv_proj += o * d * d;
                let heads = cfg.n_q_heads as u64;
                delta.attn_qk += heads * o * end * dh;
                delta.attn_pv += heads * o * end * dh;
                if split {
                    delta.attn_lr += heads * (o * end * r + o * r * dh);
                }
                delta.out_proj += o * d * d;
                delta.mlp += 2 * o * d * cfg.d_mlp as u64;
            }
            if plan.new_tokens() > 0 {
                delta.lm_head += d * cfg.vocab as u64;
            }
        }
        ledger.len = plan.end();
        ledger.seen_upto[agent] = plan.end();
        ledger.counter += delta;
        Ok((plan, delta))
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mut tensors: Vec<(String, &Matrix<T>)> = vec![
            ("embedding".into(), &self.embedding),
            ("lm_head".into(), &self.lm_head),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            for (name, set) in [("wq", &lw.wq), ("wv", &lw.wv)] {
                tensors.push((format!("layer{l}.{name}.base"), set.base_weight()));
                for (i, ad) in set.adapters().iter().enumerate() {
                    tensors.push((format!("layer{l}.{name}.a{i}"), ad.a()));
                    tensors.push((format!("layer{l}.{name}.b{i}"), ad.b()));
                }
            }
            for (name, m) in [
                ("wk", &lw.wk),
                ("wo", &lw.wo),
                ("w1", &lw.w1),
                ("w2", &lw.w2),
            ] {
                tensors.push((format!("layer{l}.{name}"), m));
            }
        }
        write_container(w, "model", &self.cfg, &tensors)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let (cfg, mut tensors): (ModelConfig, _) = read_container(r, "model")?;
        cfg.validate()?;
        let alpha = T::of(cfg.lora_alpha);
        let embedding = take_tensor(&mut tensors, "embedding")?;
        let lm_head = take_tensor(&mut tensors, "lm_head")?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut set = |name: &str| -> Result<MultiLoraSet<T>> {
                let base = take_tensor(&mut tensors, &format!("layer{l}.{name}.base"))?;
                let adapters = (0..cfg.n_agents)
                    .map(|i| {
                        let a = take_tensor(&mut tensors, &format!("layer{l}.{name}.a{i}"))?;
                        let b = take_tensor(&mut tensors, &format!("layer{l}.{name}.b{i}"))?;
                        LoraAdapter::new(a, b, alpha)
                    })
                    .collect::<Result<Vec<_>>>()?;
                MultiLoraSet::new(base, adapters, cfg.shared_a)
            };
            let wq = set("wq")?;
            let wv = set("wv")?;
            layers.push(LayerWeights {
                wq,
                wv,
                wk: take_tensor(&mut tensors, &format!("layer{l}.wk"))?,
                wo: take_tensor(&mut tensors, &format!("layer{l}.wo"))?,
                w1: take_tensor(&mut tensors, &format!("layer{l}.w1"))?,
                w2: take_tensor(&mut tensors, &format!("layer{l}.w2"))?,
            });
        }
        if let Some((name, _)) = tensors.first() {
            return Err(Error::Format(format!(
                "unexpected tensor `{name}` in model file"
            )));
        }
        Self::from_parts(cfg, embedding, layers, lm_head)
    }
}

/// Ground truth for equivalence tests: every agent recomputes everything
/// (`NonShared`), then each agent catches up so all hold full caches.
#[derive(Debug, Clone)]
pub struct OracleRun<T> {
    pub session: Session<T>,
    /// Logits per chunk, in order.
    pub logits: Vec<Option<Vec<T>>>,
}

pub fn oracle_run<T: Scalar>(
    model: &Model<T>,
    chunks: &[Chunk],
    block: BlockConfig,
) -> Result<OracleRun<T>> {
    let mut session = model.session(CacheScheme::NonShared, block)?;
    let mut logits = Vec::with_capacity(chunks.len());
    for c in chunks {
        logits.push(
            model
                .step(&mut session, c.agent, &c.tokens, c.phase)?
                .logits,
        );
    }
    for agent in 0..model.config().n_agents {
        model.step(&mut session, agent, &[], Phase::CatchUp)?;
    }
    Ok(OracleRun { session, logits })
}
