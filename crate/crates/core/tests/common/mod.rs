#![allow(dead_code)]

use std::path::PathBuf;

use guided_core::harness::{load_dataset, DatasetFormat, QaFields};
use guided_core::provider::{MockProvider, MockScript, Provider};
use guided_core::{
    guided_solve, read_guideline, ExecutionConfig, ExecutionError, Guideline, Pipeline, Sample, TemplateSet, Trajectory,
};
use guided_core::harness::Grader;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn geometric_guideline() -> Guideline {
    read_guideline(&fixture("geometric_shapes.guideline.json")).unwrap()
}

pub fn svg_sample() -> Sample {
    let d = load_dataset(&fixture("svg_sample.json"), DatasetFormat::BbhJson, "geometric_shapes", &QaFields::default())
        .unwrap();
    d.samples.into_iter().next().unwrap()
}

pub fn svg_mock() -> MockProvider {
    MockProvider::from_script(MockScript::load(&fixture("svg_case_study.mock.json")).unwrap())
}

pub fn case_study_config() -> ExecutionConfig {
    ExecutionConfig::new("gpt-4o", "gpt-4o").with_rounds(1)
}

/// Guided run of the SVG sample under the geometric shapes guideline.
pub fn run_case_study(provider: &dyn Provider) -> Result<Trajectory, ExecutionError> {
    let templates = TemplateSet::builtin();
    let grader = Grader::default();
    let p = Pipeline::new(provider, &templates, &grader);
    guided_solve(&p, &svg_sample(), &geometric_guideline(), &case_study_config())
}
