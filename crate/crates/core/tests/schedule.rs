mod common;

use common::rng;
use common::schedule::{drive, schedule_with, small_corpus, suite, trainer};
use rationale_forge::porat::Ablation;
use rationale_forge::Error;

#[test]
fn schedule_and_freezing_suite() {
    for (name, ok) in suite() {
        assert!(ok, "{name}");
    }
}

#[test]
fn training_step_refuses_an_intervention_step() {
    let mut t = trainer(Some(schedule_with(2, Ablation::Full)));
    let data = small_corpus(1);
    let mut noise = rng(0);
    t.training_step(&data[..8], &mut noise).unwrap();
    assert!(matches!(
        t.training_step(&data[..8], &mut noise),
        Err(Error::Schedule(_))
    ));
}

#[test]
fn intervene_refuses_a_misaligned_step() {
    let mut t = trainer(Some(schedule_with(3, Ablation::Full)));
    let data = small_corpus(1);
    let mut noise = rng(0);
    let mut extra = || data[..8].to_vec();
    assert!(matches!(
        t.intervene(&data[..8], &mut extra, &mut noise),
        Err(Error::Schedule(_))
    ));
    let mut off = trainer(None);
    assert!(off.intervene(&data[..8], &mut extra, &mut noise).is_err());
}

#[test]
fn fresh_batches_per_phase_still_freeze() {
    let mut s = schedule_with(2, Ablation::Full);
    s.fresh_batch_per_phase = true;
    s.phase_steps = 2;
    let mut t = trainer(Some(s));
    for trace in drive(&mut t, 8) {
        assert_eq!(trace.phases.len(), 6);
        for p in &trace.phases {
            match p.phase {
                rationale_forge::porat::Phase::PredictorOnly => {
                    assert_eq!(p.gen_checksum_before, p.gen_checksum_after)
                }
                rationale_forge::porat::Phase::GeneratorOnly => {
                    assert_eq!(p.pred_checksum_before, p.pred_checksum_after)
                }
                rationale_forge::porat::Phase::Joint => {}
            }
        }
    }
}

#[test]
fn advantage_records_chain_consecutive_values() {
    let mut t = trainer(Some(schedule_with(3, Ablation::Full)));
    drive(&mut t, 10);
    assert_eq!(t.records.len(), 9);
    for pair in t.records.windows(2) {
        assert_eq!(pair[0].q_value, pair[1].value);
    }
    for r in &t.records {
        assert_eq!(r.error, r.realized_loss - r.value);
        assert_eq!(r.advantage, r.q_value - r.value);
    }
}
