#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use gully_core::backend::{Backend, Client, MockBackend, MockScript, Policy, ResponseCache};
use gully_core::collage::{self, Grid};
use gully_core::dataset::{self, synthetic::SyntheticLayout, Dataset, Location, Split};
use gully_core::eval::{self, Format};
use gully_core::pipeline::{AnswerEntry, Engine, ModelRef, PipelineKind};
use gully_core::questions::QuestionSet;

pub fn small_layout(test_positive: usize, test_negative: usize, seed: u64) -> SyntheticLayout {
    SyntheticLayout {
        dev_positive: 0,
        dev_negative: 0,
        test_positive,
        test_negative,
        images_per_location: 6,
        tile: 8,
        seed,
    }
}

pub fn synth_dataset(root: &Path, layout: &SyntheticLayout) -> Dataset {
    let manifest = dataset::synthetic::write(root, layout).expect("write synthetic tree");
    dataset::ingest(root, &manifest, layout.images_per_location).expect("ingest synthetic tree")
}

/// Default mock script that knows the class of every labeled collage.
pub fn labeled_script(ds: &Dataset) -> MockScript {
    let mut script = MockScript::default();
    for loc in &ds.locations {
        if let Some(label) = loc.label {
            let c = collage::build_for_location(loc, Grid::default(), 0).unwrap();
            script.register_image(&c.to_base64_png().unwrap(), label);
        }
    }
    script
}

pub struct MockRig {
    pub engine: Engine,
    pub vlm: Arc<MockBackend>,
    pub llm: Arc<MockBackend>,
}

impl MockRig {
    pub fn upstream_calls(&self) -> u64 {
        self.vlm.calls() + self.llm.calls()
    }
}

pub fn mock_rig(script: &MockScript, cache: Option<&Path>, jobs: usize) -> MockRig {
    let policy = Policy {
        max_in_flight: jobs,
        backoff_ms: 1,
        ..Policy::default()
    };
    let vlm = Arc::new(MockBackend::new(script.clone()));
    let llm = Arc::new(MockBackend::new(script.clone()));
    let client = |b: Arc<MockBackend>| {
        let cache = cache.map(|d| ResponseCache::open(d).unwrap());
        Arc::new(Client::new(b as Arc<dyn Backend>, cache, policy))
    };
    let engine = Engine::new(ModelRef::new("mock-vlm", client(vlm.clone())))
        .with_llm(ModelRef::new("mock-llm", client(llm.clone())));
    MockRig { engine, vlm, llm }
}

/// Serialized predictions, metrics report and histogram CSV of one pipeline B run.
pub struct RunBytes {
    pub predictions: String,
    pub metrics: String,
    pub histogram: String,
}

pub fn run_pipeline_b(rig: &MockRig, ds: &Dataset, qs: &QuestionSet, jobs: usize) -> RunBytes {
    let locs: Vec<&Location> = ds.split(Split::Test).collect();
    let out = rig.engine.run_batch(&locs, PipelineKind::B, Some(qs), jobs).unwrap();
    let labels = ds.labels();
    let tally = eval::confusion(&out.predictions, &labels).unwrap();
    let entries: Vec<AnswerEntry> = out
        .answers
        .iter()
        .map(|av| AnswerEntry {
            answers: av.clone(),
            label: labels[&av.location_id],
        })
        .collect();
    let hist = eval::yes_histogram(&entries).unwrap();
    RunBytes {
        predictions: serde_json::to_string_pretty(&out.predictions).unwrap(),
        metrics: eval::render_metrics(&eval::metrics(&tally.cm), Format::Json),
        histogram: eval::render_histogram(&hist, Format::Csv),
    }
}
