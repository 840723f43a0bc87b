//! Shared fixtures for the pipeline benchmarks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dadmm_core::admm::{CommMatrix, IterState};
use dadmm_core::learned::{Model, ModelVariant};
use dadmm_core::problems::{gen_consensus, gen_least_squares, GenConfig, ProblemClass, ProblemInstance};

pub fn instance(class: ProblemClass, seed: u64) -> ProblemInstance {
    let cfg = GenConfig::default();
    match class {
        ProblemClass::Consensus => gen_consensus(&cfg, seed).unwrap(),
        ProblemClass::LeastSquares => gen_least_squares(&cfg, seed).unwrap(),
    }
}

pub fn warm_state(instance: &ProblemInstance, seed: u64) -> IterState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = instance.node_count();
    let mut block = |scale: f64| -> Vec<Vec<f64>> {
        (0..m)
            .map(|_| (0..instance.n).map(|_| (rng.random::<f64>() - 0.5) * scale).collect())
            .collect()
    };
    IterState {
        x: block(10.0),
        y: block(2.0),
        lambda: block(4.0),
        k: 1,
    }
}

pub fn unit_comm(instance: &ProblemInstance) -> CommMatrix {
    CommMatrix::unit(&instance.graph)
}

pub fn combined_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::init(ModelVariant::Combined, 2, &mut rng)
}
