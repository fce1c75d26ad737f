//! Fixtures shared by the benchmarks: a desk-size model and a handful of
//! synthetic questions to run it on.

use stcgn_core::dataset::Sample;
use stcgn_core::synth::{self, SynthSpec};
use stcgn_core::train;
use stcgn_core::{Model, ModelConfig};

pub fn desk_fixture(num: usize, max_entities: usize) -> (Model, Vec<Sample>) {
    let samples = synth::generate(&SynthSpec {
        num_instances: num,
        min_entities: max_entities.min(4),
        max_entities,
        ..SynthSpec::default()
    })
    .expect("valid synthetic spec");
    let model = train::build_model(&ModelConfig::desk(), samples.iter()).expect("desk model");
    (model, samples)
}
