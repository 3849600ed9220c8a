use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lrshare::attention::{
    flash_attention_expand_first, flash_lora_attention, AttentionInputs, BlockConfig,
};
use lrshare::engine::{Model, ModelConfig};
use lrshare::kvcache::{CacheScheme, SchemeKind};
use lrshare::linalg::Matrix;
use lrshare::traces::{run_trace, AgentRole, RunMode, RunOptions, TraceStep};

/// Scalar-loop attention: softmax over the visible keys of each row, then
/// a weighted sum of full value rows.
fn loop_attention(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>, offset: usize) -> Matrix<f64> {
    let (l_c, d) = q.shape();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; l_c * d];
    for i in 0..l_c {
        let visible = offset + i + 1;
        let scores: Vec<f64> = (0..visible)
            .map(|j| (0..d).map(|t| q.get(i, t) * k.get(j, t)).sum::<f64>() * scale)
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let row = &mut out[i * d..(i + 1) * d];
        for (j, wj) in w.iter().enumerate() {
            for t in 0..d {
                row[t] += wj / z * v.get(j, t);
            }
        }
    }
    Matrix::new(l_c, d, out).unwrap()
}

fn full_values(vb: &Matrix<f64>, vl: &Matrix<f64>, b: &Matrix<f64>, s: f64) -> Matrix<f64> {
    Matrix::from_fn(vb.rows(), vb.cols(), |i, t| {
        vb.get(i, t)
            + s * (0..vl.cols())
                .map(|j| vl.get(i, j) * b.get(j, t))
                .sum::<f64>()
    })
}

fn normwise(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

fn trace_strategy() -> impl Strategy<Value = Vec<TraceStep>> {
    let role = prop_oneof![
        Just(AgentRole::Plan),
        Just(AgentRole::Action),
        Just(AgentRole::Reflect)
    ];
    prop::collection::vec((role, 0usize..12, 0usize..4), 1..7).prop_map(|steps| {
        let mut out: Vec<TraceStep> = steps
            .into_iter()
            .map(|(agent, prefill, gen)| TraceStep {
                agent,
                prefill,
                gen,
            })
            .collect();
        // Something has to be processed first.
        if out[0].prefill == 0 {
            out[0].prefill = 1;
        }
        out
    })
}

fn tiny_model(rank: usize) -> Model<f64> {
    Model::build(&ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_q_heads: 4,
        n_kv_heads: 2,
        d_head: 4,
        d_mlp: 16,
        n_agents: 3,
        rank,
        vocab: 32,
        seed: 9,
        ..ModelConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blocked_kernels_match_loop_reference(
        l in 1usize..40,
        lc_frac in 0.0f64..1.0,
        off_frac in 0.0f64..1.0,
        r in 0usize..6,
        d in 1usize..9,
        b_r in 1usize..50,
        b_c in 1usize..50,
        s in 0.1f64..3.0,
        seed in any::<u64>(),
    ) {
        let l_c = 1 + ((l - 1) as f64 * lc_frac) as usize;
        let offset = ((l - l_c) as f64 * off_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Matrix::random_normal(l_c, d, 1.0, &mut rng);
        let k = Matrix::random_normal(l, d, 1.0, &mut rng);
        let vb = Matrix::random_normal(l, d, 1.0, &mut rng);
        let vl = Matrix::random_normal(l, r, 1.0, &mut rng);
        let b = Matrix::random_normal(r, d, 1.0, &mut rng);
        let inputs = AttentionInputs { q: &q, k: &k, v_base: &vb, v_lr: &vl, b_up: &b, lora_scale: s, query_offset: offset };
        let cfg = BlockConfig::new(b_r, b_c).unwrap();
        let expected = loop_attention(&q, &k, &full_values(&vb, &vl, &b, s), offset);
        let got = flash_lora_attention(&inputs, cfg).unwrap();
        prop_assert!(normwise(&got, &expected) <= 1e-10);
        let (expand, _) = flash_attention_expand_first(&inputs, cfg).unwrap();
        prop_assert!(normwise(&expand, &expected) <= 1e-10);
    }

    #[test]
    fn pass_ordering_and_accounting_hold_on_random_traces(trace in trace_strategy(), rank in 0usize..3) {
        let model = tiny_model(rank);
        let block = BlockConfig::new(4, 4).unwrap();
        let mut passes = Vec::new();
        for kind in SchemeKind::ALL {
            let scheme = kind.resolve(3, 1);
            let exec = run_trace(&model, &scheme, &trace, &RunOptions { block, ..RunOptions::default() }).unwrap();
            let acct = run_trace(&model, &scheme, &trace, &RunOptions { mode: RunMode::Account, block, ..RunOptions::default() }).unwrap();
            prop_assert_eq!(exec.counters, acct.counters);
            prop_assert_eq!(exec.cache_bytes, acct.cache_bytes);
            passes.push((kind, exec.counters.hidden_token_passes, exec.cache_bytes_synced));
        }
        let get = |k: SchemeKind| *passes.iter().find(|p| p.0 == k).unwrap();
        let total: usize = trace.iter().map(|s| s.prefill + s.gen).sum();
        prop_assert_eq!(get(SchemeKind::FullShared).1, (total * 3) as u64);
        prop_assert_eq!(get(SchemeKind::BaseLrShared).1, get(SchemeKind::FullShared).1);
        prop_assert!(get(SchemeKind::BaseLrShared).1 <= get(SchemeKind::NonShared).1);
        prop_assert_eq!(get(SchemeKind::BaseShared).1, get(SchemeKind::NonShared).1);
        prop_assert_eq!(get(SchemeKind::SelectiveRecompute).1, get(SchemeKind::NonShared).1);
        // Once every agent holds the whole sequence, sharing more never stores
        // more (an agent alone can pay base plus LR rows).
        let v = |k: SchemeKind| get(k).2.value_path();
        prop_assert!(v(SchemeKind::FullShared) <= v(SchemeKind::BaseLrShared));
        prop_assert!(v(SchemeKind::BaseLrShared) <= v(SchemeKind::BaseShared));
        prop_assert!(v(SchemeKind::BaseShared) <= v(SchemeKind::NonShared));
    }
}

#[test]
fn single_agent_trace_is_scheme_independent() {
    let model = tiny_model(2);
    let trace = vec![
        TraceStep {
            agent: AgentRole::Plan,
            prefill: 9,
            gen: 3,
        },
        TraceStep {
            agent: AgentRole::Plan,
            prefill: 4,
            gen: 2,
        },
    ];
    let opts = RunOptions {
        block: BlockConfig::new(3, 5).unwrap(),
        ..RunOptions::default()
    };
    let reference = run_trace(&model, &CacheScheme::NonShared, &trace, &opts).unwrap();
    for kind in SchemeKind::ALL {
        let r = run_trace(&model, &kind.resolve(3, 0), &trace, &opts).unwrap();
        assert_eq!(
            r.counters.hidden_token_passes, reference.counters.hidden_token_passes,
            "{kind}"
        );
    }
}

#[test]
fn model_file_round_trip_reproduces_reports() {
    let model = tiny_model(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    model
        .save(std::io::BufWriter::new(
            std::fs::File::create(&path).unwrap(),
        ))
        .unwrap();
    let loaded =
        Model::<f64>::load(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    let trace = lrshare::traces::generate_trace(4);
    let opts = RunOptions::default();
    for kind in SchemeKind::ALL {
        let scheme = kind.resolve(3, 0);
        assert_eq!(
            run_trace(&model, &scheme, &trace, &opts).unwrap(),
            run_trace(&loaded, &scheme, &trace, &opts).unwrap()
        );
    }
}
