//! End-to-end runs over synthetic worlds.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Checkpoint, EngineConfig, EngineState, EngineStats, StreamResult, StreamSample};
use crate::error::Result;
use crate::metrics::MetricReport;
use crate::rng::Rng;
use crate::scoring::{zero_shot_probabilities, Label};
use crate::world::{build_stream, generate_world, StreamPlan, World, WorldSpec};

/// Stream names used to derive independent generators from one seed.
const STREAM_RNG: u64 = 1;
const ENGINE_RNG: u64 = 2;

/// Summary of one stream run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub metrics: MetricReport,
    /// Fraction of final bank entries learned from true ID samples.
    pub contamination: f64,
    /// Fraction of all accepted candidates learned from true ID samples.
    pub accepted_from_id: f64,
    /// Zero-shot top-1 accuracy on the ID samples of the stream.
    pub id_accuracy: f64,
    pub bank_size: usize,
    pub stats: EngineStats,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub results: Vec<StreamResult>,
    pub summary: RunSummary,
    pub checkpoint: Checkpoint,
}

/// Seed the engine of a run with `seed` uses.
pub fn engine_seed(seed: u64) -> u64 {
    Rng::derive(seed, ENGINE_RNG).next_u64()
}

pub fn build_engine(world: &World, config: &EngineConfig, seed: u64) -> Result<EngineState> {
    EngineState::setup(
        &world.shots,
        world.class_names.clone(),
        world.class_text.clone(),
        &world.vocabulary,
        config.clone(),
        engine_seed(seed),
    )
}

pub fn world_stream(world: &World, plan: &StreamPlan, seed: u64) -> Result<Vec<StreamSample>> {
    build_stream(plan, &world.pools, &mut Rng::derive(seed, STREAM_RNG))
}

/// Runs `stream` through `engine` and summarizes the outcome. `per_phase`
/// adds per-phase metrics.
pub fn run(
    engine: &mut EngineState,
    world: &World,
    stream: &[StreamSample],
    per_phase: bool,
) -> Result<RunOutcome> {
    let results = engine.run_stream(stream, &world.encoder)?;
    let metrics = MetricReport::from_results(&results, per_phase)?;
    let truth: HashMap<&str, Label> = stream.iter().map(|s| (s.id.as_str(), s.truth)).collect();
    let from_id = |origin: &str| truth.get(origin) == Some(&Label::Id);
    let bank = engine.bank().entries();
    let contamination = if bank.is_empty() {
        0.0
    } else {
        bank.iter().filter(|e| from_id(&e.origin)).count() as f64 / bank.len() as f64
    };
    let id_accuracy = id_accuracy(engine, stream)?;
    let stats = *engine.stats();
    let summary = RunSummary {
        metrics,
        contamination,
        accepted_from_id: accepted_from_id(&results),
        id_accuracy,
        bank_size: bank.len(),
        stats,
    };
    Ok(RunOutcome {
        results,
        summary,
        checkpoint: engine.checkpoint(),
    })
}

fn id_accuracy(engine: &EngineState, stream: &[StreamSample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in stream {
        if let (Label::Id, Some(class)) = (s.truth, s.class) {
            let p = zero_shot_probabilities(&s.embedding, engine.model(), engine.config().score.tau)?;
            let best = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i);
            hit += usize::from(best == Some(class));
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

fn accepted_from_id(results: &[StreamResult]) -> f64 {
    let accepted: Vec<_> = results.iter().filter(|r| r.accepted).collect();
    if accepted.is_empty() {
        0.0
    } else {
        accepted.iter().filter(|r| r.truth == Label::Id).count() as f64 / accepted.len() as f64
    }
}

/// Generates the world for `spec` with its seed replaced by `seed`, then
/// runs the plan once.
pub fn run_synthetic(
    spec: &WorldSpec,
    config: &EngineConfig,
    plan: &StreamPlan,
    seed: u64,
) -> Result<RunOutcome> {
    let world = generate_world(&WorldSpec {
        seed,
        ..spec.clone()
    })?;
    let stream = world_stream(&world, plan, seed)?;
    let mut engine = build_engine(&world, config, seed)?;
    run(&mut engine, &world, &stream, false)
}
