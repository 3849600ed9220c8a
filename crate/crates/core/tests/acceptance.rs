//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lrshare::analysis::{verify_cosine_bound, PerturbationMode};
use lrshare::attention::{
    flash_attention_expand_first, flash_lora_attention, flash_lora_attention_with_stats,
    lr_mac_counts, naive_attention, AttentionInputs, BlockConfig,
};
use lrshare::engine::{oracle_run, Chunk, Model, ModelConfig, Phase};
use lrshare::kvcache::{
    key_ratio_closed_form, value_ratio_closed_form, CacheDims, CacheScheme, SchemeKind,
};
use lrshare::linalg::{max_relative_error, Matrix};
use lrshare::lora::expand_lr;
use lrshare::traces::{
    generate_trace, replay_synthetic, run_trace, total_seq_len, trace_chunks, RunMode, RunOptions,
};
use lrshare::Scalar;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Case {
    q: Matrix<f64>,
    k: Matrix<f64>,
    v_base: Matrix<f64>,
    v_lr: Matrix<f64>,
    b_up: Matrix<f64>,
    scale: f64,
    offset: usize,
}

fn rel_err<T: Scalar>(c: &Case, cfg: BlockConfig) -> Result<f64, String> {
    let (q, k, vb, vl, b) = (
        c.q.cast::<T>(),
        c.k.cast::<T>(),
        c.v_base.cast::<T>(),
        c.v_lr.cast::<T>(),
        c.b_up.cast::<T>(),
    );
    let inputs = AttentionInputs {
        q: &q,
        k: &k,
        v_base: &vb,
        v_lr: &vl,
        b_up: &b,
        lora_scale: T::of(c.scale),
        query_offset: c.offset,
    };
    // The oracle always runs in f64.
    let (q64, k64, vb64, vl64, b64) = (
        q.cast::<f64>(),
        k.cast::<f64>(),
        vb.cast::<f64>(),
        vl.cast::<f64>(),
        b.cast::<f64>(),
    );
    let oracle = naive_attention(&AttentionInputs {
        q: &q64,
        k: &k64,
        v_base: &vb64,
        v_lr: &vl64,
        b_up: &b64,
        lora_scale: T::of(c.scale).as_f64(),
        query_offset: c.offset,
    })
    .map_err(err)?;
    let got = flash_lora_attention(&inputs, cfg)
        .map_err(err)?
        .cast::<f64>();
    max_relative_error(&got, &oracle).map_err(err)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let blocks = [1, 3, 8, 64];
    let ranks = [0, 1, 2, 8];
    let dims = [4, 16, 64];
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    let cases = 10_000;
    for _ in 0..cases {
        let l = rng.random_range(1..=64usize);
        let l_c = rng.random_range(1..=l);
        let offset = rng.random_range(0..=l - l_c);
        let r = ranks[rng.random_range(0..ranks.len())];
        let d = dims[rng.random_range(0..dims.len())];
        let cfg = BlockConfig::new(
            blocks[rng.random_range(0..4)],
            blocks[rng.random_range(0..4)],
        )
        .map_err(err)?;
        let c = Case {
            q: Matrix::random_normal(l_c, d, 1.0, &mut rng),
            k: Matrix::random_normal(l, d, 1.0, &mut rng),
            v_base: Matrix::random_normal(l, d, 1.0, &mut rng),
            v_lr: Matrix::random_normal(l, r, 1.0, &mut rng),
            b_up: Matrix::random_normal(r, d, 1.0, &mut rng),
            scale: rng.random_range(0.25..4.0),
            offset,
        };
        worst64 = worst64.max(rel_err::<f64>(&c, cfg)?);
        worst32 = worst32.max(rel_err::<f32>(&c, cfg)?);
    }
    let elapsed = start.elapsed();
    check(
        worst64 <= 1e-10,
        format!("f64 max rel err {worst64:e} > 1e-10"),
    )?;
    check(
        worst32 <= 1e-4,
        format!("f32 max rel err {worst32:e} > 1e-4"),
    )?;
    check(
        elapsed <= Duration::from_secs(120),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "{cases} fuzzed cases, max rel err f64 {worst64:.2e} (<= 1e-10), f32 {worst32:.2e} (<= 1e-4), {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shapes = 100;
    for _ in 0..shapes {
        let l = rng.random_range(1..=96usize);
        let l_c = rng.random_range(1..=l);
        let r = rng.random_range(1..=16usize);
        let d = rng.random_range(1..=32usize);
        let cfg =
            BlockConfig::new(rng.random_range(1..=40), rng.random_range(1..=40)).map_err(err)?;
        let q = Matrix::<f64>::random_normal(l_c, d, 1.0, &mut rng);
        let k = Matrix::random_normal(l, d, 1.0, &mut rng);
        let vb = Matrix::random_normal(l, d, 1.0, &mut rng);
        let vl = Matrix::random_normal(l, r, 1.0, &mut rng);
        let b = Matrix::random_normal(r, d, 1.0, &mut rng);
        let inputs = AttentionInputs {
            q: &q,
            k: &k,
            v_base: &vb,
            v_lr: &vl,
            b_up: &b,
            lora_scale: 2.0,
            query_offset: l - l_c,
        };
        let reordered = flash_lora_attention_with_stats(&inputs, cfg)
            .map_err(err)?
            .1
            .macs
            .lr;
        let expand_first = flash_attention_expand_first(&inputs, cfg)
            .map_err(err)?
            .1
            .macs
            .lr;
        let (l64, lc, r64, d64) = (l as u64, l_c as u64, r as u64, d as u64);
        check(
            reordered == lc * l64 * r64 + lc * r64 * d64,
            format!("reordered counter {reordered} for L={l} L_c={l_c} r={r} d={d}"),
        )?;
        check(
            expand_first == l64 * r64 * d64 + lc * l64 * d64,
            format!("expand-first counter {expand_first} for L={l} L_c={l_c} r={r} d={d}"),
        )?;
        let f = lr_mac_counts(l, l_c, r, d);
        check(
            f.reorder == reordered && f.no_reorder == expand_first,
            "closed form disagrees with counters",
        )?;
    }
    let spot = lr_mac_counts(4096, 1, 8, 128);
    check(
        spot.reorder == 33_792 && spot.no_reorder == 4_718_592,
        format!("spot value {spot:?}"),
    )?;
    Ok(format!(
        "{shapes} random shapes exact; L=4096,L_c=1,r=8,d=128: {} vs {} ({:.2}%)",
        spot.reorder,
        spot.no_reorder,
        100.0 * spot.reorder as f64 / spot.no_reorder as f64
    ))
}

fn ratio(num: u64, den: u64) -> Ratio<u128> {
    Ratio::new(num as u128, den as u128)
}

fn criterion_3() -> Outcome {
    let trace = generate_trace(32);
    let n = 3;
    let mut checked = 0;
    for d_out in [256usize, 1024] {
        for rank in [4usize, 8, 16, 32] {
            let dims = CacheDims {
                n_layers: 2,
                n_kv_heads: 4,
                d_head: d_out / 4,
                rank,
                d_model: 4 * d_out,
                n_agents: n,
            };
            let replay = |kind: SchemeKind| {
                replay_synthetic::<f32>(kind.resolve(dims.n_layers, 0), dims, &trace, true)
                    .map(|s| s.cache_bytes())
            };
            let base = replay(SchemeKind::NonShared).map_err(err)?;
            for kind in [
                SchemeKind::FullShared,
                SchemeKind::SelectiveRecompute,
                SchemeKind::BaseShared,
                SchemeKind::BaseLrShared,
            ] {
                let b = replay(kind).map_err(err)?;
                let value = ratio(b.value_path(), base.value_path());
                let expect = value_ratio_closed_form(kind, n, rank, d_out);
                check(
                    value == expect,
                    format!("{kind} r={rank} d_out={d_out}: value ratio {value} != {expect}"),
                )?;
                let key = ratio(b.key, base.key);
                check(
                    key == key_ratio_closed_form(kind, n) && key == Ratio::new(1, n as u128),
                    format!("{kind} r={rank} d_out={d_out}: key ratio {key}"),
                )?;
                checked += 1;
            }
        }
    }
    let example = value_ratio_closed_form(SchemeKind::BaseShared, 3, 8, 1024);
    Ok(format!(
        "{checked} (scheme, r, d_out) cells exact; e.g. BaseShared N=3 r=8 d_out=1024 = {example}"
    ))
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 32,
        n_q_heads: 8,
        n_kv_heads: 2,
        d_head: 4,
        d_mlp: 32,
        n_agents: 3,
        rank: 4,
        vocab: 64,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn criterion_4() -> Outcome {
    let cfg = small_cfg();
    check(cfg.n_q_heads / cfg.n_kv_heads == 4, "group size must be 4")?;
    let model = Model::<f64>::build(&cfg).map_err(err)?;
    let scheme = CacheScheme::SelectiveRecompute {
        recompute_layers: [1, 2].into_iter().collect(),
    };
    let opts = RunOptions {
        block: BlockConfig::new(16, 16).map_err(err)?,
        ..RunOptions::default()
    };
    let trace = generate_trace(4);
    let report = run_trace(&model, &scheme, &trace, &opts).map_err(err)?;
    let b = report.cache_bytes;
    let one_layer = (b.key + b.value) / cfg.n_layers as u64;
    check(
        b.hidden == 2 * one_layer,
        format!("hidden {} vs one layer K+V {}", b.hidden, one_layer),
    )?;
    Ok(format!(
        "group 4, L={}: hidden cache {} B == 2 x {} B (one layer K+V)",
        report.total_seq_len, b.hidden, one_layer
    ))
}

fn criterion_5() -> Outcome {
    let expect = [
        (256, 1936),
        (512, 2960),
        (1024, 5008),
        (2048, 9104),
        (4096, 17296),
        (8192, 33680),
        (16384, 66448),
    ];
    let heads = ["1.9k", "3.0k", "5.0k", "9.1k", "17.3k", "33.7k", "66.4k"];
    for ((l, total), head) in expect.iter().zip(heads) {
        let t = generate_trace(*l);
        let got = total_seq_len(&t);
        check(t.len() == 17, format!("l_ctx={l}: {} steps", t.len()))?;
        check(got == *total, format!("l_ctx={l}: total {got} != {total}"))?;
        let rounded = format!("{:.1}k", got as f64 / 1000.0);
        check(rounded == head, format!("l_ctx={l}: {rounded} != {head}"))?;
    }
    Ok("totals 1936, 2960, 5008, 9104, 17296, 33680, 66448 (1.9k..66.4k)".into())
}

fn criterion_6() -> Outcome {
    let cfg = small_cfg();
    let n_layers = cfg.n_layers as u64;
    let model = Model::<f64>::build(&cfg).map_err(err)?;
    let block = BlockConfig::new(32, 32).map_err(err)?;

    // Shared context prefilled once by agent 0, then picked up by agents 1 and 2.
    let ctx_len = 300u64;
    let ctx: Vec<u32> = (0..ctx_len as u32).map(|i| (i * 17 + 3) % 64).collect();
    let mut passes = std::collections::BTreeMap::new();
    for kind in SchemeKind::ALL {
        let mut s = model
            .session(kind.resolve(cfg.n_layers, 0), block)
            .map_err(err)?;
        model.step(&mut s, 0, &ctx, Phase::Prefill).map_err(err)?;
        for agent in 1..3 {
            model
                .step(&mut s, agent, &[], Phase::CatchUp)
                .map_err(err)?;
        }
        passes.insert(kind, s.counter().hidden_token_passes);
    }
    let p = |k: SchemeKind| passes[&k];
    check(
        p(SchemeKind::FullShared) == ctx_len * n_layers
            && p(SchemeKind::BaseLrShared) == ctx_len * n_layers,
        format!("shared schemes: {passes:?}"),
    )?;
    check(
        p(SchemeKind::NonShared) == p(SchemeKind::BaseShared)
            && p(SchemeKind::BaseShared) == p(SchemeKind::SelectiveRecompute),
        format!("recomputing schemes differ: {passes:?}"),
    )?;
    check(
        p(SchemeKind::NonShared) == 3 * p(SchemeKind::BaseLrShared),
        format!("NonShared/BaseLRShared != 3: {passes:?}"),
    )?;

    // The accounting path reproduces executed counters exactly ...
    let small = generate_trace(16);
    for kind in SchemeKind::ALL {
        let scheme = kind.resolve(cfg.n_layers, 0);
        let exec = run_trace(
            &model,
            &scheme,
            &small,
            &RunOptions {
                block,
                ..RunOptions::default()
            },
        )
        .map_err(err)?;
        let acct = run_trace(
            &model,
            &scheme,
            &small,
            &RunOptions {
                mode: RunMode::Account,
                block,
                ..RunOptions::default()
            },
        )
        .map_err(err)?;
        check(
            exec.counters == acct.counters,
            format!("{kind}: account != execute"),
        )?;
    }
    // ... so it is used for the long generated trace.
    let trace = generate_trace(4096);
    let acct = |kind: SchemeKind| {
        run_trace(
            &model,
            &kind.resolve(cfg.n_layers, 0),
            &trace,
            &RunOptions {
                mode: RunMode::Account,
                block,
                ..RunOptions::default()
            },
        )
        .map(|r| r.counters.hidden_token_passes)
    };
    let t: Vec<(SchemeKind, u64)> = SchemeKind::ALL
        .iter()
        .map(|&k| acct(k).map(|v| (k, v)))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let get = |k: SchemeKind| {
        t.iter()
            .find(|(x, _)| *x == k)
            .map(|(_, v)| *v)
            .unwrap_or(0)
    };
    let total = total_seq_len(&trace) as u64;
    check(
        get(SchemeKind::BaseLrShared) == total * n_layers,
        "BaseLRShared != L * n_layers on trace",
    )?;
    check(
        get(SchemeKind::FullShared) == get(SchemeKind::BaseLrShared),
        "FullShared != BaseLRShared on trace",
    )?;
    check(
        get(SchemeKind::NonShared) == get(SchemeKind::BaseShared)
            && get(SchemeKind::BaseShared) == get(SchemeKind::SelectiveRecompute),
        format!("trace ordering: {t:?}"),
    )?;
    let trace_ratio = get(SchemeKind::NonShared) as f64 / get(SchemeKind::BaseLrShared) as f64;
    check(trace_ratio > 2.7, format!("trace ratio {trace_ratio}"))?;
    Ok(format!(
        "shared context: NonShared/BaseLRShared = {}/{} = 3 exactly; l_ctx=4096 trace ratio {trace_ratio:.4} (> 2.7)",
        p(SchemeKind::NonShared),
        p(SchemeKind::BaseLrShared)
    ))
}

fn criterion_7() -> Outcome {
    let r = verify_cosine_bound(256, 1000, 7, PerturbationMode::Random).map_err(err)?;
    check(r.violations == 0, format!("{} violations", r.violations))?;
    let z = verify_cosine_bound(256, 10, 7, PerturbationMode::ZeroDelta).map_err(err)?;
    check(
        z.violations == 0 && z.max_closed_form_error == Some(0.0),
        format!("zero-delta deviation {:?}", z.max_closed_form_error),
    )?;
    Ok(format!(
        "1000 trials, 0 violations (min margin {:.3e}); dY=0 exact equality",
        r.min_margin
    ))
}

/// Max relative error between rebuilt and oracle full values over every
/// agent, layer and kv head.
fn reconstruction_error(
    model: &Model<f64>,
    chunks: &[Chunk],
    layers: std::ops::Range<usize>,
) -> Result<f64, String> {
    let cfg = model.config();
    let block = BlockConfig::new(8, 8).map_err(err)?;
    let oracle = oracle_run(model, chunks, block).map_err(err)?;
    let mut s = model
        .session(CacheScheme::BaseLrShared, block)
        .map_err(err)?;
    for c in chunks {
        model
            .step(&mut s, c.agent, &c.tokens, c.phase)
            .map_err(err)?;
    }
    let store = s.store();
    let mut worst = 0.0f64;
    for agent in 0..cfg.n_agents {
        for l in layers.clone() {
            let adapter = model.layers()[l].wv.adapter(agent).map_err(err)?;
            let lr = store.agent_lr(agent, l).ok_or("missing LR cache")?;
            let delta = expand_lr(lr, adapter).map_err(err)?;
            for g in 0..cfg.n_kv_heads {
                let base = store
                    .agent_values(agent, l, g)
                    .ok_or("missing base cache")?;
                let rebuilt = base
                    .add(&delta.slice_cols(g * cfg.d_head..(g + 1) * cfg.d_head))
                    .map_err(err)?;
                let truth = oracle
                    .session
                    .store()
                    .agent_values(agent, l, g)
                    .ok_or("missing oracle cache")?;
                worst = worst.max(max_relative_error(&rebuilt, truth).map_err(err)?);
            }
        }
    }
    Ok(worst)
}

fn criterion_8() -> Outcome {
    let trace = generate_trace(8);
    let chunks: Vec<Chunk> = trace_chunks(&trace, 0, 64)
        .into_iter()
        .map(|(_, c)| c)
        .collect();

    let rank0 = Model::<f64>::build(&ModelConfig {
        rank: 0,
        ..small_cfg()
    })
    .map_err(err)?;
    let e0 = reconstruction_error(&rank0, &chunks, 0..3)?;
    check(e0 <= 1e-12, format!("rank 0: {e0:e}"))?;

    // One layer: every agent's value projection sees the same embeddings.
    let one = Model::<f64>::build(&ModelConfig {
        n_layers: 1,
        rank: 8,
        ..small_cfg()
    })
    .map_err(err)?;
    let e1 = reconstruction_error(&one, &chunks, 0..1)?;
    check(
        e1 <= 1e-12,
        format!("identical hidden states, rank 8: {e1:e}"),
    )?;
    // First layer of a deeper model, same reason.
    let deep = Model::<f64>::build(&ModelConfig {
        rank: 8,
        ..small_cfg()
    })
    .map_err(err)?;
    let e2 = reconstruction_error(&deep, &chunks, 0..1)?;
    check(e2 <= 1e-12, format!("layer 0, rank 8: {e2:e}"))?;
    Ok(format!(
        "rank 0 all layers {e0:.1e}; identical hidden states rank 8: {e1:.1e} (1 layer), {e2:.1e} (layer 0) (<= 1e-12)"
    ))
}

fn criterion_9() -> Outcome {
    let cfg = small_cfg();
    let run = || -> Result<String, String> {
        let model = Model::<f64>::build(&cfg).map_err(err)?;
        let mut out = String::new();
        for kind in SchemeKind::ALL {
            let report = run_trace(
                &model,
                &kind.resolve(cfg.n_layers, 3),
                &generate_trace(8),
                &RunOptions::default(),
            )
            .map_err(err)?;
            out.push_str(&serde_json::to_string(&report).map_err(err)?);
        }
        let bound = verify_cosine_bound(64, 50, 3, PerturbationMode::Random).map_err(err)?;
        out.push_str(&serde_json::to_string(&bound).map_err(err)?);
        let sim = lrshare::analysis::measure_similarity(
            &model,
            &[vec![1, 2, 3, 4, 5, 6, 7]],
            BlockConfig::default(),
        )
        .map_err(err)?;
        out.push_str(&serde_json::to_string(&sim).map_err(err)?);
        Ok(out)
    };
    let (a, b) = (run()?, run()?);
    check(a == b, "reports differ between runs")?;
    Ok(format!(
        "trace, bound and similarity reports byte-identical across reruns ({} bytes)",
        a.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("kernel correctness", criterion_1),
        ("reordering MAC formulas", criterion_2),
        ("memory ratios", criterion_3),
        ("GQA hidden cache", criterion_4),
        ("trace identity", criterion_5),
        ("compute scaling", criterion_6),
        ("cosine bound", criterion_7),
        ("reconstruction exactness", criterion_8),
        ("determinism", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("[PASS] criterion {}: {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] criterion {}: {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
