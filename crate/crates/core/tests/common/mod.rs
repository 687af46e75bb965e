#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rationale_forge::nn::{GumbelMaskSampler, MaskMode};
use rationale_forge::rationalization::{
    Batch, Bindings, ModelConfig, Rationalizer, RegularizerConfig, TokenSequence,
};
use rationale_forge::tensor::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use rationale_forge::tensor::{Axis, Tape, Tensor, Var};
use rationale_forge::Result;

pub const REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values in `[lo, hi)` whose magnitude stays at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// `sum(w ⊙ x)` with a fixed random `w`, so each output coordinate gets its
/// own upstream gradient.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng(seed);
    let w = Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn case(name: &'static str, inputs: Vec<Tensor>, f: OpFn) -> (&'static str, Vec<Tensor>, OpFn) {
    (name, inputs, f)
}

/// Finite-difference reports for every differentiable tape op.
pub fn op_checks() -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(7);
    let a34 = random(&mut r, 3, 4, -1.5, 1.5);
    let b34 = random(&mut r, 3, 4, -1.5, 1.5);
    let b42 = random(&mut r, 4, 2, -1.5, 1.5);
    let pos = random(&mut r, 3, 4, 0.2, 3.0);
    let nz = away_from_zero(&mut r, 3, 4, 0.05);
    let row = random(&mut r, 1, 4, -1.0, 1.0);
    let col = random(&mut r, 3, 1, -1.0, 1.0);
    let table = random(&mut r, 6, 3, -1.0, 1.0);
    // distinct values per column so the max is stable under a 1e-5 probe
    let parts: Vec<Tensor> = (0..3)
        .map(|k| {
            Tensor::matrix(
                2,
                3,
                (0..6)
                    .map(|i| (k * 6 + i) as f64 * 0.37 % 1.9 - 0.9 + k as f64 * 0.013)
                    .collect(),
            )
            .unwrap()
        })
        .collect();

    let cases = vec![
        case(
            "matmul",
            vec![a34.clone(), b42.clone()],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, 1)
            }),
        ),
        case(
            "add",
            vec![a34.clone(), b34.clone()],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                weighted_sum(t, y, 2)
            }),
        ),
        case(
            "sub",
            vec![a34.clone(), b34.clone()],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                weighted_sum(t, y, 3)
            }),
        ),
        case(
            "mul",
            vec![a34.clone(), b34.clone()],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted_sum(t, y, 4)
            }),
        ),
        case(
            "scale",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7)?;
                weighted_sum(t, y, 5)
            }),
        ),
        case(
            "add_scalar",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.add_scalar(v[0], 0.3)?;
                let y = t.mul(y, y)?;
                weighted_sum(t, y, 6)
            }),
        ),
        case(
            "sigmoid",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.sigmoid(v[0])?;
                weighted_sum(t, y, 7)
            }),
        ),
        case(
            "tanh",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.tanh(v[0])?;
                weighted_sum(t, y, 8)
            }),
        ),
        case(
            "exp",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.exp(v[0])?;
                weighted_sum(t, y, 9)
            }),
        ),
        case(
            "log",
            vec![pos],
            Box::new(|t, v| {
                let y = t.log(v[0])?;
                weighted_sum(t, y, 10)
            }),
        ),
        case(
            "abs",
            vec![nz],
            Box::new(|t, v| {
                let y = t.abs(v[0])?;
                weighted_sum(t, y, 11)
            }),
        ),
        case(
            "softmax",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.softmax(v[0])?;
                weighted_sum(t, y, 12)
            }),
        ),
        case(
            "log_softmax",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.log_softmax(v[0])?;
                weighted_sum(t, y, 13)
            }),
        ),
        case(
            "sum",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                t.sum(y)
            }),
        ),
        case(
            "mean",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                t.mean(y)
            }),
        ),
        case(
            "row_sums",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.row_sums(v[0])?;
                weighted_sum(t, y, 14)
            }),
        ),
        case(
            "concat_rows",
            vec![a34.clone(), row.clone()],
            Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1]], Axis::Rows)?;
                weighted_sum(t, y, 15)
            }),
        ),
        case(
            "concat_cols",
            vec![a34.clone(), col.clone()],
            Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1]], Axis::Cols)?;
                weighted_sum(t, y, 16)
            }),
        ),
        case(
            "slice_rows",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.slice(v[0], Axis::Rows, 1, 3)?;
                weighted_sum(t, y, 17)
            }),
        ),
        case(
            "slice_cols",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.slice(v[0], Axis::Cols, 1, 4)?;
                weighted_sum(t, y, 18)
            }),
        ),
        case(
            "embedding",
            vec![table],
            Box::new(|t, v| {
                let y = t.embedding(v[0], &[4, 0, 4, 2, 5])?;
                weighted_sum(t, y, 19)
            }),
        ),
        case(
            "expand_rows",
            vec![row],
            Box::new(|t, v| {
                let y = t.expand_rows(v[0], 5)?;
                weighted_sum(t, y, 20)
            }),
        ),
        case(
            "expand_cols",
            vec![col],
            Box::new(|t, v| {
                let y = t.expand_cols(v[0], 3)?;
                weighted_sum(t, y, 21)
            }),
        ),
        case(
            "reshape",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.reshape(v[0], &[2, 6])?;
                weighted_sum(t, y, 22)
            }),
        ),
        case(
            "gather",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.gather(v[0], &[3, 0, 2])?;
                weighted_sum(t, y, 23)
            }),
        ),
        case(
            "masked_max",
            parts,
            Box::new(|t, v| {
                let valid = vec![vec![true, true], vec![true, false], vec![false, true]];
                let y = t.masked_max(v, &valid)?;
                weighted_sum(t, y, 24)
            }),
        ),
    ];

    let cfg = GradCheckConfig::default();
    let mut r = rng(99);
    cases
        .into_iter()
        .map(|(name, inputs, f)| (name, check_gradients(f, &inputs, &cfg, &mut r).unwrap()))
        .collect()
}

/// The straight-through op's backward is the identity: the gradient of
/// `sum(w ⊙ st(x))` must equal `w` exactly, whatever the forward threshold.
pub fn straight_through_is_identity() -> bool {
    let mut r = rng(3);
    let x = random(&mut r, 4, 3, 0.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let y = tape.straight_through(xv).unwrap();
    let w: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
    let wv = tape.constant(Tensor::matrix(4, 3, w.clone()).unwrap());
    let p = tape.mul(y, wv).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    tape.grad(xv).unwrap() == w.as_slice()
}

pub fn toy_model() -> (Rationalizer, rationale_forge::rationalization::ModelParams) {
    let model = Rationalizer::new(ModelConfig {
        vocab_size: 11,
        embed_dim: 4,
        hidden_dim: 3,
        classes: 3,
        share_encoder: false,
    })
    .unwrap();
    let params = model.init(&mut rng(21));
    (model, params)
}

pub fn toy_batch() -> Vec<TokenSequence> {
    vec![
        TokenSequence {
            tokens: vec![1, 4, 9, 2, 7],
            label: 2,
            gold_mask: vec![0, 1, 1, 0, 0],
        },
        TokenSequence {
            tokens: vec![3, 10, 0],
            label: 0,
            gold_mask: vec![1, 0, 0],
        },
        TokenSequence {
            tokens: vec![5, 5, 8, 6],
            label: 1,
            gold_mask: vec![0, 0, 1, 1],
        },
    ]
}

/// Finite differences of the full generator + predictor loss (soft masks,
/// fixed noise) with respect to every parameter tensor.
pub fn composite_check(coords_per_input: usize) -> GradCheckReport {
    let (model, params) = toy_model();
    let gen_names: Vec<String> = params.generator.names().cloned().collect();
    let pred_names: Vec<String> = params.predictor.names().cloned().collect();
    let inputs: Vec<Tensor> = params
        .generator
        .iter()
        .chain(params.predictor.iter())
        .map(|(_, t)| t.clone())
        .collect();
    let examples = toy_batch();
    let refs: Vec<&TokenSequence> = examples.iter().collect();
    let batch = Batch::new(&refs).unwrap();
    let cfg = RegularizerConfig {
        sparsity_weight: 0.7,
        continuity_weight: 0.3,
        target_sparsity: 0.2,
    };
    let sampler = GumbelMaskSampler {
        temperature: 0.8,
        mode: MaskMode::Soft,
    };
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let (g, p) = vars.split_at(gen_names.len());
        let bindings = Bindings {
            generator: gen_names.iter().cloned().zip(g.iter().copied()).collect(),
            predictor: pred_names.iter().cloned().zip(p.iter().copied()).collect(),
        };
        let parts = model.mmi_loss(tape, &bindings, &batch, &cfg, &sampler, &mut rng(5))?;
        Ok(parts.total)
    };
    let gc = GradCheckConfig {
        coords_per_input,
        ..GradCheckConfig::default()
    };
    check_gradients(f, &inputs, &gc, &mut rng(17)).unwrap()
}

pub mod schedule {
    use rationale_forge::harness::{run, RunConfig};
    use rationale_forge::nn::GumbelMaskSampler;
    use rationale_forge::porat::{Ablation, Phase, PhaseTrace, ScheduleConfig, Trainer};
    use rationale_forge::rationalization::{
        ModelConfig, Rationalizer, RegularizerConfig, TokenSequence,
    };
    use rationale_forge::synthetic::{generate_corpus, CorpusSpec};
    use rationale_forge::tensor::AdamConfig;

    use super::rng;

    pub fn small_corpus(seed: u64) -> Vec<TokenSequence> {
        generate_corpus(&CorpusSpec {
            train_size: 96,
            dev_size: 8,
            test_size: 8,
            annotated_size: 8,
            seed,
            ..CorpusSpec::default()
        })
        .unwrap()
        .train
    }

    pub fn trainer(schedule: Option<ScheduleConfig>) -> Trainer {
        let model = Rationalizer::new(ModelConfig {
            vocab_size: CorpusSpec::default().vocab_size,
            embed_dim: 6,
            hidden_dim: 5,
            classes: 2,
            share_encoder: false,
        })
        .unwrap();
        let params = model.init(&mut rng(1));
        Trainer::new(
            model,
            params,
            AdamConfig::default(),
            RegularizerConfig {
                sparsity_weight: 5.0,
                continuity_weight: 0.1,
                target_sparsity: 0.2,
            },
            GumbelMaskSampler::default(),
            schedule,
        )
        .unwrap()
    }

    /// Run `steps` global steps over the small corpus, returning the traces.
    pub fn drive(trainer: &mut Trainer, steps: usize) -> Vec<PhaseTrace> {
        let data = small_corpus(3);
        let mut noise = rng(9);
        let extra_data = data.clone();
        let mut extra = move || extra_data[..16].to_vec();
        for i in 0..steps {
            let start = (i * 16) % data.len();
            let batch = &data[start..start + 16];
            trainer.advance(batch, &mut extra, &mut noise).unwrap();
        }
        std::mem::take(&mut trainer.traces)
    }

    pub fn schedule_with(interval: usize, ablation: Ablation) -> ScheduleConfig {
        ScheduleConfig {
            interval,
            ablation,
            ..ScheduleConfig::default()
        }
    }

    /// Named pass/fail checks of schedule exactness, freezing soundness and
    /// ablation algebra.
    pub fn suite() -> Vec<(String, bool)> {
        let mut checks = Vec::new();
        let total = 23;
        for n in [1usize, 3, 5, 7] {
            let mut t = trainer(Some(schedule_with(n, Ablation::Full)));
            let traces = drive(&mut t, total);
            let fired: Vec<usize> = traces.iter().map(|p| p.step).collect();
            let expected: Vec<usize> = (1..=total / n).map(|k| k * n).collect();
            checks.push((
                format!("interventions fire exactly at k*{n}"),
                fired == expected,
            ));
        }

        let mut t = trainer(Some(schedule_with(4, Ablation::Full)));
        let traces = drive(&mut t, 20);
        let mut frozen_g = true;
        let mut frozen_p = true;
        let mut joint_moves = true;
        let mut order = true;
        for trace in &traces {
            let phases: Vec<Phase> = trace.phases.iter().map(|p| p.phase).collect();
            order &= phases == [Phase::PredictorOnly, Phase::GeneratorOnly, Phase::Joint];
            for p in &trace.phases {
                match p.phase {
                    Phase::PredictorOnly => {
                        frozen_g &= p.gen_checksum_before == p.gen_checksum_after
                            && p.gen_optimizer_before == p.gen_optimizer_after;
                        frozen_g &= p.pred_checksum_before != p.pred_checksum_after;
                    }
                    Phase::GeneratorOnly => {
                        frozen_p &= p.pred_checksum_before == p.pred_checksum_after
                            && p.pred_optimizer_before == p.pred_optimizer_after;
                        frozen_p &= p.gen_checksum_before != p.gen_checksum_after;
                    }
                    Phase::Joint => {
                        joint_moves &= p.gen_checksum_before != p.gen_checksum_after
                            && p.pred_checksum_before != p.pred_checksum_after;
                    }
                }
            }
        }
        checks.push((
            "phases run predictor, generator, joint in order".into(),
            order && !traces.is_empty(),
        ));
        checks.push((
            "phase 1 leaves generator params and moments bit-identical".into(),
            frozen_g,
        ));
        checks.push((
            "phase 2 leaves predictor params and moments bit-identical".into(),
            frozen_p,
        ));
        checks.push(("phase 3 updates both players".into(), joint_moves));

        let phases_of = |ablation: Ablation| -> Vec<Vec<Phase>> {
            let mut t = trainer(Some(schedule_with(4, ablation)));
            drive(&mut t, 12)
                .iter()
                .map(|tr| tr.phases.iter().map(|p| p.phase).collect())
                .collect()
        };
        checks.push((
            "without_generator_phase skips exactly phase 2".into(),
            phases_of(Ablation::WithoutGeneratorPhase)
                == vec![vec![Phase::PredictorOnly, Phase::Joint]; 3],
        ));
        checks.push((
            "without_predictor_phase skips exactly phase 1".into(),
            phases_of(Ablation::WithoutPredictorPhase)
                == vec![vec![Phase::GeneratorOnly, Phase::Joint]; 3],
        ));
        checks.push((
            "baseline_rnp never intervenes".into(),
            phases_of(Ablation::BaselineRnp).is_empty(),
        ));

        let mut rnp = trainer(Some(schedule_with(4, Ablation::BaselineRnp)));
        let mut off = trainer(None);
        drive(&mut rnp, 15);
        drive(&mut off, 15);
        let same_params = rnp.params == off.params;
        let same_records = serde_json::to_string(&rnp.records).unwrap()
            == serde_json::to_string(&off.records).unwrap();
        checks.push((
            "baseline_rnp trainer matches scheduler-free trainer".into(),
            same_params && same_records,
        ));

        checks.push((
            "baseline_rnp run artifacts match scheduler-free run".into(),
            harness_runs_match(),
        ));
        checks
    }

    fn harness_runs_match() -> bool {
        let dir = tempfile::tempdir().unwrap();
        let base = RunConfig {
            corpus: rationale_forge::harness::CorpusSource::Spec(CorpusSpec {
                train_size: 128,
                dev_size: 32,
                test_size: 8,
                annotated_size: 32,
                seed: 4,
                ..CorpusSpec::default()
            }),
            epochs: 3,
            ..RunConfig::default()
        };
        let mut rnp = base.clone();
        rnp.schedule = Some(schedule_with(5, Ablation::BaselineRnp));
        rnp.output_dir = Some(dir.path().join("rnp"));
        let mut off = base;
        off.schedule = None;
        off.output_dir = Some(dir.path().join("off"));
        run(&rnp).unwrap();
        run(&off).unwrap();
        let read = |sub: &str, file: &str| std::fs::read(dir.path().join(sub).join(file)).unwrap();
        let tensors = |sub: &str| {
            let ck: serde_json::Value =
                serde_json::from_slice(&read(sub, "checkpoint_final.json")).unwrap();
            ck["tensors"].clone()
        };
        ["metrics.csv", "phases.jsonl", "advantage.jsonl"]
            .iter()
            .all(|f| read("rnp", f) == read("off", f))
            && tensors("rnp") == tensors("off")
    }
}
