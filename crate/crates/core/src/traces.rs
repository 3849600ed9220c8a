//! Emulated plan/action/reflect traces and their cost reports.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::BlockConfig;
use crate::engine::{Chunk, FlopCounter, Model, Phase};
use crate::error::{Error, Result};
use crate::kvcache::{
    bytes_for_state, synced_bytes, CacheBytes, CacheDims, CacheScheme, KvRows, KvStore,
    LayerOutputs, LrRows,
};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Plan,
    Action,
    Reflect,
}

impl AgentRole {
    pub const fn index(self) -> usize {
        match self {
            AgentRole::Plan => 0,
            AgentRole::Action => 1,
            AgentRole::Reflect => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceStep {
    pub agent: AgentRole,
    pub prefill: usize,
    pub gen: usize,
}

impl TraceStep {
    const fn new(agent: AgentRole, prefill: usize, gen: usize) -> Self {
        Self {
            agent,
            prefill,
            gen,
        }
    }
}

/// The 17-step plan/action/reflect schedule with `l_ctx` retrieved tokens per
/// cycle. Total length is `912 + 4 * l_ctx`.
pub fn generate_trace(l_ctx: usize) -> Vec<TraceStep> {
    use AgentRole::*;
    let mut steps = vec![
        TraceStep::new(Plan, 512, 32),
        TraceStep::new(Plan, 8, 8),
        TraceStep::new(Action, 8, 8),
    ];
    for _ in 0..4 {
        steps.push(TraceStep::new(Plan, l_ctx, 32));
        steps.push(TraceStep::new(Plan, 8, 8));
        steps.push(TraceStep::new(Action, 8, 8));
    }
    steps.push(TraceStep::new(Reflect, 32, 32));
    steps.push(TraceStep::new(Reflect, 8, 8));
    steps
}

pub fn total_seq_len(trace: &[TraceStep]) -> usize {
    trace.iter().map(|s| s.prefill + s.gen).sum()
}

pub fn dump_trace(trace: &[TraceStep]) -> Result<String> {
    Ok(serde_json::to_string_pretty(trace)?)
}

pub fn parse_trace(json: &str) -> Result<Vec<TraceStep>> {
    Ok(serde_json::from_str(json)?)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceStep>> {
    parse_trace(&std::fs::read_to_string(path)?)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Token at trajectory `position`, written during trace step `step`.
pub fn token_id(seed: u64, step: usize, position: usize, vocab: usize) -> u32 {
    let h = splitmix64(splitmix64(seed ^ splitmix64(step as u64)) ^ position as u64);
    (h % vocab as u64) as u32
}

/// Expands a trace into engine chunks: the prompt as one prefill chunk, then
/// each generated token fed back as its own decode chunk.
pub fn trace_chunks(trace: &[TraceStep], seed: u64, vocab: usize) -> Vec<(usize, Chunk)> {
    let mut pos = 0;
    let mut out = Vec::new();
    for (i, step) in trace.iter().enumerate() {
        let agent = step.agent.index();
        if step.prefill > 0 {
            let tokens = (pos..pos + step.prefill)
                .map(|p| token_id(seed, i, p, vocab))
                .collect();
            out.push((
                i,
                Chunk {
                    agent,
                    tokens,
                    phase: Phase::Prefill,
                },
            ));
            pos += step.prefill;
        }
        for _ in 0..step.gen {
            out.push((
                i,
                Chunk {
                    agent,
                    tokens: vec![token_id(seed, i, pos, vocab)],
                    phase: Phase::Decode,
                },
            ));
            pos += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Run the model.
    #[default]
    Execute,
    /// Count only; same plans and counters, no arithmetic.
    Account,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub mode: RunMode,
    pub block: BlockConfig,
    /// Seed for synthesized token ids.
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: RunMode::Execute,
            block: BlockConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub role: AgentRole,
    pub prefill: usize,
    pub gen: usize,
    pub len_before: usize,
    pub len_after: usize,
    /// Hidden-pass range of the prefill chunk (the LR prefill shows up here).
    pub hidden_pass: Range<usize>,
    pub kv_project: Range<usize>,
    pub lr_project: Range<usize>,
    pub prefill_macs: u64,
    pub macs: FlopCounter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub scheme: String,
    pub scheme_config: CacheScheme,
    pub mode: RunMode,
    pub dtype: crate::scalar::Dtype,
    pub seed: u64,
    pub total_seq_len: usize,
    pub counters: FlopCounter,
    pub total_macs: u64,
    /// Sum of MACs spent on prompt chunks, across all steps.
    pub ttft_proxy: u64,
    /// Processed tokens per multiply-accumulate.
    pub throughput_proxy: f64,
    /// Cache held at the end of the trace.
    pub cache_bytes: CacheBytes,
    /// Cache once every agent has caught up with the whole trajectory.
    pub cache_bytes_synced: CacheBytes,
    pub per_step: Vec<StepLog>,
}

/// Runs `trace` under `scheme`, one agent step after another.
pub fn run_trace<T: Scalar>(
    model: &Model<T>,
    scheme: &CacheScheme,
    trace: &[TraceStep],
    opts: &RunOptions,
) -> Result<CostReport> {
    let cfg = model.config();
    if let Some(step) = trace.iter().find(|s| s.agent.index() >= cfg.n_agents) {
        return Err(Error::InvalidConfig(format!(
            "trace uses agent {:?} but the model has {} agents",
            step.agent, cfg.n_agents
        )));
    }
    let chunks = trace_chunks(trace, opts.seed, cfg.vocab);
    let mut per_step: Vec<StepLog> = Vec::with_capacity(trace.len());
    let mut len = 0usize;
    let begin_step = |i: usize, len: usize, per_step: &mut Vec<StepLog>| {
        if per_step.last().map(|s| s.step) != Some(i) {
            let t = trace[i];
            let empty = len..len;
            per_step.push(StepLog {
                step: i,
                role: t.agent,
                prefill: t.prefill,
                gen: t.gen,
                len_before: len,
                len_after: len,
                hidden_pass: empty.clone(),
                kv_project: empty.clone(),
                lr_project: empty,
                prefill_macs: 0,
                macs: FlopCounter::default(),
            });
        }
    };

    let record = |i: usize,
                  phase: Phase,
                  plan: &crate::kvcache::PrefillPlan,
                  delta: FlopCounter,
                  per_step: &mut Vec<StepLog>| {
        let log = per_step.last_mut().expect("step started");
        debug_assert_eq!(log.step, i);
        if phase == Phase::Prefill {
            log.hidden_pass = plan.hidden_pass.clone();
            log.kv_project = plan.kv_project.clone();
            log.lr_project = plan.lr_project.clone();
            log.prefill_macs += delta.total_macs();
        }
        log.len_after = plan.end();
        log.macs += delta;
    };

    let (counters, cache_bytes, final_len) = match opts.mode {
        RunMode::Execute => {
            let mut session = model.session(scheme.clone(), opts.block)?;
            for (i, chunk) in &chunks {
                begin_step(*i, len, &mut per_step);
                let out = model.step(&mut session, chunk.agent, &chunk.tokens, chunk.phase)?;
                len = out.plan.end();
                record(*i, chunk.phase, &out.plan, out.delta, &mut per_step);
            }
            (
                session.counter(),
                session.store().cache_bytes(),
                session.store().len(),
            )
        }
        RunMode::Account => {
            let mut ledger = model.ledger(scheme.clone())?;
            for (i, chunk) in &chunks {
                begin_step(*i, len, &mut per_step);
                let (plan, delta) =
                    model.account_step(&mut ledger, chunk.agent, chunk.tokens.len())?;
                len = plan.end();
                record(*i, chunk.phase, &plan, delta, &mut per_step);
            }
            let bytes = bytes_for_state(
                scheme,
                &cfg.cache_dims(),
                ledger.len(),
                ledger.seen_upto(),
                T::DTYPE,
            );
            (ledger.counter(), bytes, ledger.len())
        }
    };
    // Steps with neither prompt nor generation still get a log line.
    let mut logs = Vec::with_capacity(trace.len());
    let mut it = per_step.into_iter().peekable();
    let mut at = 0;
    for (i, t) in trace.iter().enumerate() {
        match it.peek() {
            Some(log) if log.step == i => {
                let log = it.next().expect("peeked");
                at = log.len_after;
                logs.push(log);
            }
            _ => logs.push(StepLog {
                step: i,
                role: t.agent,
                prefill: 0,
                gen: 0,
                len_before: at,
                len_after: at,
                hidden_pass: at..at,
                kv_project: at..at,
                lr_project: at..at,
                prefill_macs: 0,
                macs: FlopCounter::default(),
            }),
        }
    }

    let total_macs = counters.total_macs();
    let total = total_seq_len(trace);
    debug_assert_eq!(total, final_len);
    Ok(CostReport {
        scheme: scheme.name().to_string(),
        scheme_config: scheme.clone(),
        mode: opts.mode,
        dtype: T::DTYPE,
        seed: opts.seed,
        total_seq_len: total,
        counters,
        total_macs,
        ttft_proxy: logs.iter().map(|l| l.prefill_macs).sum(),
        throughput_proxy: if total_macs == 0 {
            0.0
        } else {
            total as f64 / total_macs as f64
        },
        cache_bytes,
        cache_bytes_synced: synced_bytes(scheme, &cfg.cache_dims(), final_len, T::DTYPE),
        per_step: logs,
    })
}

fn synthetic_value(layer: usize, row: usize, col: usize, kind: u64) -> f64 {
    let h = splitmix64(((layer as u64) << 48) ^ ((row as u64) << 16) ^ ((col as u64) << 2) ^ kind);
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

/// Replays `trace` against a bare [`KvStore`] with synthetic rows, without a
/// model. With `catch_up`, every agent finally brings its caches to the end
/// of the trajectory.
pub fn replay_synthetic<T: Scalar>(
    scheme: CacheScheme,
    dims: CacheDims,
    trace: &[TraceStep],
    catch_up: bool,
) -> Result<KvStore<T>> {
    let mut store = KvStore::<T>::new(scheme, dims)?;
    let mut steps: Vec<(usize, usize)> = Vec::new();
    for t in trace {
        if t.prefill > 0 {
            steps.push((t.agent.index(), t.prefill));
        }
        steps.extend(std::iter::repeat_n((t.agent.index(), 1), t.gen));
    }
    if catch_up {
        steps.extend((0..dims.n_agents).map(|a| (a, 0)));
    }
    let block = |layer: usize, rows: &Range<usize>, cols: usize, kind: u64| {
        Matrix::from_fn(rows.len(), cols, |i, j| {
            T::of(synthetic_value(layer, rows.start + i, j, kind))
        })
    };
    for (agent, n) in steps {
        let plan = store.plan_step(agent, n)?;
        let split = store.scheme().splits_values();
        for l in 0..dims.n_layers {
            let lp = plan.layer(l);
            let kv = (!lp.kv_rows.is_empty()).then(|| KvRows {
                start: lp.kv_rows.start,
                keys: (0..dims.n_kv_heads)
                    .map(|g| block(l, &lp.kv_rows, dims.d_head, 2 * g as u64))
                    .collect(),
                values: (0..dims.n_kv_heads)
                    .map(|g| block(l, &lp.kv_rows, dims.d_head, 2 * g as u64 + 1))
                    .collect(),
            });
            let lr = (split && !lp.lr_rows.is_empty()).then(|| LrRows {
                start: lp.lr_rows.start,
                lr: block(l, &lp.lr_rows, dims.rank, u64::MAX - agent as u64),
            });
            store.append(agent, &LayerOutputs { layer: l, kv, lr })?;
        }
        if let Some(boundary) = store.scheme().hidden_boundary() {
            let new = plan.prior_len..plan.end();
            store.write_hidden(new.start, &block(boundary, &new, dims.d_model, 1 << 40))?;
        }
        store.finish_step(&plan)?;
    }
    Ok(store)
}

/// One cell of a combined report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub l_ctx: usize,
    pub report: CostReport,
}

fn seq_len_label(total: usize) -> String {
    format!("{:.1}k ({total})", total as f64 / 1000.0)
}

/// Markdown tables with schemes as rows and total sequence length as
/// columns: throughput proxy, TTFT proxy, and hidden-token passes.
pub fn markdown_tables(cells: &[ReportCell]) -> String {
    let mut schemes: Vec<String> = Vec::new();
    let mut cols: Vec<usize> = Vec::new();
    for c in cells {
        if !schemes.contains(&c.report.scheme) {
            schemes.push(c.report.scheme.clone());
        }
        if !cols.contains(&c.report.total_seq_len) {
            cols.push(c.report.total_seq_len);
        }
    }
    cols.sort_unstable();
    let find = |scheme: &str, total: usize| {
        cells
            .iter()
            .find(|c| c.report.scheme == scheme && c.report.total_seq_len == total)
            .map(|c| &c.report)
    };
    type Metric = fn(&CostReport) -> String;
    let tables: [(&str, Metric); 4] = [
        ("Throughput proxy (tokens per GMAC)", |r| {
            format!("{:.3}", r.throughput_proxy * 1e9)
        }),
        ("TTFT proxy (prefill GMAC)", |r| {
            format!("{:.4}", r.ttft_proxy as f64 / 1e9)
        }),
        ("Hidden-token passes (tokens x layers)", |r| {
            r.counters.hidden_token_passes.to_string()
        }),
        ("Cache bytes at end of trace", |r| {
            r.cache_bytes.total().to_string()
        }),
    ];
    let mut out = String::new();
    for (title, metric) in tables {
        let _ = writeln!(out, "### {title}\n");
        let _ = write!(out, "| Scheme |");
        for &c in &cols {
            let _ = write!(out, " {} |", seq_len_label(c));
        }
        let _ = write!(out, "\n|---|");
        for _ in &cols {
            let _ = write!(out, "---:|");
        }
        out.push('\n');
        for s in &schemes {
            let _ = write!(out, "| {s} |");
            for &c in &cols {
                let cell = find(s, c).map_or_else(|| "-".to_string(), metric);
                let _ = write!(out, " {cell} |");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub const CSV_HEADER: &str = "scheme,l_ctx,total_seq_len,mode,dtype,seed,total_macs,ttft_proxy,throughput_proxy,hidden_token_passes,layer_passes,qkv_proj,lora_down,lora_up,attn_qk,attn_pv,attn_lr,out_proj,mlp,lm_head,key_bytes,value_bytes,lr_bytes,hidden_bytes,synced_total_bytes";

pub fn csv_row(cell: &ReportCell) -> String {
    let r = &cell.report;
    let c = &r.counters;
    let mode = match r.mode {
        RunMode::Execute => "execute",
        RunMode::Account => "account",
    };
    format!(
        "{},{},{},{},{},{},{},{},{:e},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.scheme,
        cell.l_ctx,
        r.total_seq_len,
        mode,
        r.dtype,
        r.seed,
        r.total_macs,
        r.ttft_proxy,
        r.throughput_proxy,
        c.hidden_token_passes,
        c.layer_passes,
        c.qkv_proj,
        c.lora_down,
        c.lora_up,
        c.attn_qk,
        c.attn_pv,
        c.attn_lr,
        c.out_proj,
        c.mlp,
        c.lm_head,
        r.cache_bytes.key,
        r.cache_bytes.value,
        r.cache_bytes.lr,
        r.cache_bytes.hidden,
        r.cache_bytes_synced.total(),
    )
}
