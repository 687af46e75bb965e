mod common;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{rng, toy_batch, toy_model};
use rationale_forge::nn::{BiRecurrentEncoder, GumbelMaskSampler, MaskMode};
use rationale_forge::rationalization::{
    enumerate_masks, regularizer, Batch, Enumeration, RegularizerConfig, TokenSequence,
};
use rationale_forge::tensor::{ParamSet, Tape, Tensor, Var};

fn encoder_params(enc: &BiRecurrentEncoder, seed: u64) -> ParamSet {
    let mut set = ParamSet::new();
    enc.init(&mut set, "enc", &mut rng(seed));
    set
}

fn swap_directions(set: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in set.iter() {
        let renamed = if name.contains(".fwd.") {
            name.replace(".fwd.", ".bwd.")
        } else {
            name.replace(".bwd.", ".fwd.")
        };
        out.insert(renamed, t.clone());
    }
    out
}

fn encode(
    enc: &BiRecurrentEncoder,
    set: &ParamSet,
    steps: &[Vec<f64>],
    batch: usize,
) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = tape.bind(set);
    let inputs: Vec<Var> = steps
        .iter()
        .map(|s| tape.constant(Tensor::matrix(batch, enc.input_dim, s.clone()).unwrap()))
        .collect();
    let valid = vec![vec![true; batch]; steps.len()];
    let out = enc
        .forward(&mut tape, &bound, "enc", &inputs, &valid)
        .unwrap();
    out.iter().map(|&v| tape.data(v).to_vec()).collect()
}

#[test]
fn reversing_input_and_swapping_directions_mirrors_the_output() {
    let enc = BiRecurrentEncoder {
        input_dim: 3,
        hidden_dim: 4,
    };
    let set = encoder_params(&enc, 1);
    let swapped = swap_directions(&set);
    let mut r = rng(2);
    let steps: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let reversed: Vec<Vec<f64>> = steps.iter().rev().cloned().collect();
    let a = encode(&enc, &set, &steps, 1);
    let b = encode(&enc, &swapped, &reversed, 1);
    let h = enc.hidden_dim;
    for t in 0..steps.len() {
        let mirror = &b[steps.len() - 1 - t];
        assert_eq!(a[t][..h], mirror[h..], "forward half at step {t}");
        assert_eq!(a[t][h..], mirror[..h], "backward half at step {t}");
    }
}

fn infer_one(e: &TokenSequence, others: &[TokenSequence]) -> (Vec<u8>, Vec<f64>) {
    let (model, params) = toy_model();
    let mut all = vec![e.clone()];
    all.extend_from_slice(others);
    let out = model.infer(&params, &all, all.len()).unwrap();
    (out[0].mask.clone(), out[0].log_probs.clone())
}

#[test]
fn padding_does_not_change_real_positions() {
    let short = TokenSequence {
        tokens: vec![3, 7, 1],
        label: 1,
        gold_mask: vec![0, 1, 0],
    };
    let long = TokenSequence {
        tokens: vec![2, 9, 4, 4, 10, 0, 6, 8],
        label: 0,
        gold_mask: vec![0; 8],
    };
    let alone = infer_one(&short, &[]);
    let padded = infer_one(&short, &[long.clone(), long]);
    assert_eq!(alone, padded);
}

#[test]
fn dropped_tokens_never_reach_the_predictor() {
    let (model, params) = toy_model();
    let base = toy_batch();
    let masks: Vec<Vec<f64>> = vec![
        vec![0.0, 1.0, 1.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 1.0],
    ];
    let run = |examples: &[TokenSequence]| -> Vec<f64> {
        let refs: Vec<&TokenSequence> = examples.iter().collect();
        let batch = Batch::new(&refs).unwrap();
        let mut tape = Tape::new();
        let bindings = model.bind(&mut tape, &params).unwrap();
        let steps: Vec<Var> = (0..batch.max_len())
            .map(|t| {
                let col = masks
                    .iter()
                    .map(|m| m.get(t).copied().unwrap_or(0.0))
                    .collect();
                tape.constant(Tensor::matrix(examples.len(), 1, col).unwrap())
            })
            .collect();
        let z = model
            .mask_input(&mut tape, &bindings, &batch, &steps)
            .unwrap();
        let lp = model.predict(&mut tape, &bindings, &z).unwrap();
        tape.data(lp).to_vec()
    };
    let reference = run(&base);
    let mut r = rng(4);
    for _ in 0..20 {
        let mut mutated = base.clone();
        for (e, m) in mutated.iter_mut().zip(&masks) {
            for (tok, &keep) in e.tokens.iter_mut().zip(m) {
                if keep == 0.0 {
                    *tok = r.gen_range(0..11);
                }
            }
        }
        assert_eq!(run(&mutated), reference);
    }
}

#[test]
fn contiguous_block_minimizes_the_regularizer() {
    for l in 1..=12usize {
        for s in [0.1, 0.2, 0.3, 0.5] {
            let cfg = RegularizerConfig {
                sparsity_weight: 1.0,
                continuity_weight: 1.0,
                target_sparsity: s,
            };
            let k = ((s * l as f64).ceil() as usize).min(l);
            let masks = enumerate_masks(l, Enumeration::ExactSize(k)).unwrap();
            let value = |m: &[u8]| {
                regularizer(&m.iter().map(|&v| v as f64).collect::<Vec<_>>(), &cfg).unwrap()
            };
            let best = masks.iter().map(|m| value(m)).fold(f64::INFINITY, f64::min);
            let block: Vec<u8> = (0..l).map(|t| u8::from(t < k)).collect();
            assert_eq!(value(&block), best, "l={l} s={s}");
        }
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut r = rng(8);
    let data: Vec<f64> = (0..5 * 7).map(|_| r.gen_range(-30.0..30.0)).collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(5, 7, data).unwrap());
    let p = tape.softmax(x).unwrap();
    let lp = tape.log_softmax(x).unwrap();
    for i in 0..5 {
        let row = &tape.data(p)[i * 7..(i + 1) * 7];
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (q, &v) in tape.data(lp)[i * 7..(i + 1) * 7].iter().zip(row) {
            assert!((q.exp() - v).abs() <= 1e-10);
        }
    }
}

#[test]
fn predictor_outputs_normalized_log_probs() {
    let (model, params) = toy_model();
    for inf in model.infer(&params, &toy_batch(), 8).unwrap() {
        let total: f64 = inf.log_probs.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() <= 1e-10);
    }
}

fn keep_frequency(gap: f64, mode: MaskMode, temperature: f64, draws: usize, seed: u64) -> f64 {
    let sampler = GumbelMaskSampler { temperature, mode };
    let mut tape = Tape::new();
    let logits: Vec<f64> = (0..draws).flat_map(|_| [gap, 0.0]).collect();
    let l = tape.constant(Tensor::matrix(draws, 2, logits).unwrap());
    let out = sampler
        .sample(&mut tape, l, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
    tape.data(out.mask).iter().sum::<f64>() / draws as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// E[σ((Δ + U)/τ)] for U ~ Logistic(0, 1), the difference of two Gumbels,
/// by the trapezoid rule.
fn relaxed_keep_expectation(gap: f64, temperature: f64) -> f64 {
    let (lo, hi, n) = (-60.0, 60.0, 120_000);
    let step = (hi - lo) / n as f64;
    let pdf = |u: f64| {
        let e = (-u.abs()).exp();
        e / ((1.0 + e) * (1.0 + e))
    };
    (0..=n)
        .map(|i| {
            let u = lo + i as f64 * step;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * sigmoid((gap + u) / temperature) * pdf(u)
        })
        .sum::<f64>()
        * step
}

#[test]
fn strongly_preferred_keep_is_almost_always_sampled() {
    assert!(keep_frequency(20.0, MaskMode::HardStraightThrough, 1.0, 20_000, 1) > 0.999);
}

#[test]
fn soft_sample_mean_matches_quadrature() {
    for (gap, tau) in [(0.0, 1.0), (1.5, 0.5), (-0.7, 2.0)] {
        let mc = keep_frequency(gap, MaskMode::Soft, tau, 40_000, 2);
        let exact = relaxed_keep_expectation(gap, tau);
        assert!(
            (mc - exact).abs() < 0.02,
            "gap {gap} tau {tau}: {mc} vs {exact}"
        );
    }
}

#[test]
fn hard_keep_rate_is_the_keep_probability() {
    for gap in [-1.0, 0.0, 2.0] {
        let mc = keep_frequency(gap, MaskMode::HardStraightThrough, 0.5, 40_000, 3);
        assert!((mc - sigmoid(gap)).abs() < 0.02, "gap {gap}: {mc}");
    }
}

#[test]
fn same_seed_same_mask() {
    let (model, params) = toy_model();
    let examples = toy_batch();
    let refs: Vec<&TokenSequence> = examples.iter().collect();
    let batch = Batch::new(&refs).unwrap();
    let sample = |seed: u64| {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, &params).unwrap();
        let m = model
            .generate(
                &mut tape,
                &b,
                &batch,
                &GumbelMaskSampler::default(),
                &mut rng(seed),
            )
            .unwrap();
        m.values(&tape, &batch)
    };
    assert_eq!(sample(5), sample(5));
}
