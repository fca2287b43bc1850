use std::collections::BTreeSet;

use chrono::DateTime;
use guided_core::harness::{split, train_size, EvalReport, ExperimentConfig, SampleResult, REPORT_SCHEMA_VERSION};
use guided_core::types::TrajectoryDocument;
use guided_core::{
    validate_guideline, Dataset, Guideline, GuidelineStep, Provenance, Sample, StepRecord, TaskKind, Trajectory,
};
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.()<>/]{0,24}"
}

fn nonempty() -> impl Strategy<Value = String> {
    "[a-zA-Z][a-zA-Z0-9 ,.]{0,20}"
}

fn step(index: usize) -> impl Strategy<Value = GuidelineStep> {
    (nonempty(), text(), prop::collection::vec(text(), 0..3), prop::collection::vec(text(), 0..3)).prop_map(
        move |(title, execution, mistakes, preventions)| GuidelineStep {
            index,
            title,
            execution,
            mistakes,
            preventions,
        },
    )
}

fn guideline() -> impl Strategy<Value = Guideline> {
    (1usize..8)
        .prop_flat_map(|n| (0..n).map(|i| step(i + 1)).collect::<Vec<_>>())
        .prop_map(|steps| Guideline {
            task_id: "T".into(),
            provenance: Provenance {
                source_model: "m".into(),
                dataset_digest: "d".into(),
                template_version: "v".into(),
                created_at: DateTime::from_timestamp(1_700_000_000, 0).unwrap(),
            },
            steps,
        })
}

fn trajectory() -> impl Strategy<Value = Trajectory> {
    prop::collection::vec((text(), text(), 0u32..3), 1..6).prop_map(|steps| Trajectory {
        sample_id: "s".into(),
        steps: steps
            .into_iter()
            .enumerate()
            .map(|(i, (raw, refined, r))| StepRecord::refined(i + 1, raw, refined, r))
            .collect(),
        final_answer: "x".into(),
        executor_model: "e".into(),
        refiner_model: "r".into(),
        warnings: vec![],
    })
}

proptest! {
    #[test]
    fn guideline_round_trip(g in guideline()) {
        let bytes = g.to_json_bytes().unwrap();
        match Guideline::from_json_bytes(&bytes) {
            Ok(back) => {
                prop_assert!(validate_guideline(&g).is_empty());
                prop_assert_eq!(back.to_json_bytes().unwrap(), bytes);
            }
            Err(_) => prop_assert!(!validate_guideline(&g).is_empty()),
        }
    }

    #[test]
    fn validation_matches_invariants(g in guideline()) {
        let ok = !g.steps.is_empty()
            && g.steps.iter().all(|s| !s.execution.trim().is_empty())
            && g.steps.iter().all(|s| s.preventions.iter().all(|p| !p.trim().is_empty()))
            && g.steps.iter().map(|s| s.index).collect::<BTreeSet<_>>().len() == g.steps.len();
        prop_assert_eq!(validate_guideline(&g).is_empty(), ok);
    }

    #[test]
    fn trajectory_round_trip(t in trajectory()) {
        prop_assert!(t.is_well_formed());
        let doc = TrajectoryDocument::new(t.clone());
        let json = serde_json::to_string(&doc).unwrap();
        let back: TrajectoryDocument = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back.trajectory, t);
    }

    #[test]
    fn report_accuracy_identity(correct in prop::collection::vec(any::<bool>(), 0..40)) {
        let per_sample: Vec<SampleResult> = correct.iter().enumerate().map(|(i, c)| SampleResult {
            sample_id: format!("s{i}"),
            predicted: "p".into(),
            gold: "g".into(),
            correct: *c,
            provider_calls: 1,
        }).collect();
        let (n, acc) = EvalReport::recount(&per_sample);
        let r = EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            run_id: "r".into(),
            task_id: "T".into(),
            source_task: None,
            method: "m".into(),
            config: ExperimentConfig::guided("m"),
            dataset_digest: "d".into(),
            guideline_digest: None,
            template_versions: "v".into(),
            per_sample,
            errored: vec![],
            correct: n,
            accuracy: acc,
        };
        prop_assert!(r.accuracy_is_consistent());
        prop_assert!((0.0..=1.0).contains(&r.accuracy));
        let back: EvalReport = serde_json::from_slice(&r.to_json_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, r);
    }

    #[test]
    fn split_is_exact_and_deterministic(n in 4usize..300, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let samples = (0..n)
            .map(|i| Sample::new(format!("s{i}"), "T", "q", "a", TaskKind::FreeText))
            .collect();
        let d = Dataset::from_samples("T", samples).unwrap();
        let expected = train_size(n, fraction);
        match split(&d, fraction, seed) {
            Ok((tr, te)) => {
                prop_assert_eq!(tr.len(), expected);
                prop_assert_eq!(tr.len() + te.len(), n);
                let a: BTreeSet<_> = tr.samples.iter().map(|s| &s.id).collect();
                let b: BTreeSet<_> = te.samples.iter().map(|s| &s.id).collect();
                prop_assert!(a.is_disjoint(&b));
                let again = split(&d, fraction, seed).unwrap();
                prop_assert_eq!(again.0, tr);
            }
            Err(_) => prop_assert!(expected == 0 || expected == n),
        }
    }
}
