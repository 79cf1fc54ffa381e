//! Contextual GP-UCB over contact schedules (the upper-level optimizer).

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collocation::{
    build_nlp, refine_merit, solve_merit, solve_nlp, Action, Context, MeritWeights, SolverConfig,
    FIRST_SLOT_VALUES, LATER_SLOT_VALUES, MAX_GOAL_DISTANCE, MERIT_CAP,
};
use crate::gp::{encode, GpState, KernelParams};
use crate::hopper::HopperParams;
use crate::terrain::{nearest_indices, sample_random_terrain, Heightmap, TerrainFeatures, TerrainModel};
use crate::{Error, Result};

/// Smallest |m| used as the fSRR denominator.
pub const FSRR_GUARD: f64 = 1e-3;

/// All canonical actions in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpace {
    actions: Vec<Action>,
}

impl ActionSpace {
    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn index_of(&self, action: &Action) -> Option<usize> {
        self.actions.binary_search(action).ok()
    }

    pub fn contains(&self, action: &Action) -> bool {
        self.index_of(action).is_some()
    }
}

pub fn enumerate_actions() -> ActionSpace {
    let mut actions = Vec::new();
    for a in FIRST_SLOT_VALUES {
        for b in LATER_SLOT_VALUES {
            for c in LATER_SLOT_VALUES {
                for d in LATER_SLOT_VALUES {
                    for e in LATER_SLOT_VALUES {
                        if let Ok(action) = Action::new([a, b, c, d, e]) {
                            actions.push(action);
                        }
                    }
                }
            }
        }
    }
    actions.sort();
    ActionSpace { actions }
}

/// Maps `[n₁,0,0,n₄,n₅]` onto `[n₁,n₄,n₅,0,0]` and validates everything
/// else as already canonical.
pub fn canonicalize(raw: [u8; 5]) -> Result<Action> {
    match raw {
        [a, 0, 0, d, e] if d != 0 && e != 0 => Action::new([a, d, e, 0, 0]),
        _ => Action::new(raw),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Flat,
    Rough,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Self::Flat),
            "rough" => Ok(Self::Rough),
            other => Err(Error::InvalidArgument(format!("unknown scenario '{other}'"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Flat => "flat",
            Self::Rough => "rough",
        })
    }
}

/// Base heightmap and the nodes varied in the rough scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct TerrainSampler {
    base: Heightmap,
    variable_indices: Vec<usize>,
    sigma: f64,
}

impl TerrainSampler {
    pub fn new(base: Heightmap, variable_indices: Vec<usize>, sigma: f64) -> Result<Self> {
        if let Some(&bad) = variable_indices.iter().find(|&&i| i >= base.len()) {
            return Err(Error::InvalidArgument(format!("variable node index {bad} out of range")));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument("terrain sigma must be positive".into()));
        }
        Ok(Self { base, variable_indices, sigma })
    }

    /// Flat default heightmap with nodes nearest 0.4, 0.5 and 0.6 m variable.
    pub fn standard() -> Self {
        let base = TerrainModel::flat_default().heightmap().clone();
        let variable_indices = nearest_indices(&base, &[0.4, 0.5, 0.6]);
        Self { base, variable_indices, sigma: 0.1 }
    }

    pub fn base(&self) -> &Heightmap {
        &self.base
    }

    pub fn variable_indices(&self) -> &[usize] {
        &self.variable_indices
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Number of terrain context features in `scenario`.
    pub fn feature_count(&self, scenario: Scenario) -> usize {
        match scenario {
            Scenario::Flat => 0,
            Scenario::Rough => self.variable_indices.len(),
        }
    }

    /// Terrain for explicit feature heights.
    pub fn terrain_for(&self, features: &TerrainFeatures) -> Result<TerrainModel> {
        if features.is_empty() {
            return Ok(TerrainModel::new(self.base.clone()));
        }
        let hm = crate::terrain::apply_features(&self.base, &self.variable_indices, features)?;
        Ok(TerrainModel::new(hm))
    }
}

/// Uniform goal distance plus, for the rough scenario, a random terrain.
pub fn sample_context<R: Rng + ?Sized>(
    rng: &mut R,
    scenario: Scenario,
    sampler: &TerrainSampler,
) -> Result<(Context, TerrainModel)> {
    let goal = rng.random_range(0.0..=MAX_GOAL_DISTANCE);
    match scenario {
        Scenario::Flat => Ok((Context::flat(goal)?, TerrainModel::new(sampler.base.clone()))),
        Scenario::Rough => {
            let (hm, features) = sample_random_terrain(rng, &sampler.variable_indices, sampler.sigma, &sampler.base)?;
            Ok((Context::new(goal, features)?, TerrainModel::new(hm)))
        }
    }
}

/// Outcome of scoring one action in one context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub converged: bool,
    /// Raw merit used for learning (capped for failed solves).
    pub raw_merit: f64,
    /// `tanh` of the raw merit.
    pub merit: f64,
    pub objective: f64,
    pub max_violation: f64,
    pub iterations: usize,
}

impl Evaluation {
    /// Score of a problem that could not even be built.
    pub fn failed() -> Self {
        Self {
            converged: false,
            raw_merit: MERIT_CAP,
            merit: refine_merit(MERIT_CAP),
            objective: f64::NAN,
            max_violation: f64::INFINITY,
            iterations: 0,
        }
    }
}

/// Scores context–action pairs; the NLP stack in production, synthetic
/// functions in tests.
pub trait MeritOracle: Sync {
    fn evaluate(&self, context: &Context, terrain: &TerrainModel, action: &Action) -> Evaluation;
}

impl<F> MeritOracle for F
where
    F: Fn(&Context, &TerrainModel, &Action) -> Evaluation + Sync,
{
    fn evaluate(&self, context: &Context, terrain: &TerrainModel, action: &Action) -> Evaluation {
        self(context, terrain, action)
    }
}

/// Builds and solves the collocation NLP from its default seed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NlpOracle {
    pub hopper: HopperParams,
    pub solver: SolverConfig,
    pub weights: MeritWeights,
}

impl MeritOracle for NlpOracle {
    fn evaluate(&self, context: &Context, terrain: &TerrainModel, action: &Action) -> Evaluation {
        let Ok(problem) = build_nlp(context, action, &self.hopper, terrain, &self.solver) else {
            return Evaluation::failed();
        };
        let solution = solve_nlp(&problem, &problem.initial_guess(), &self.solver);
        let raw = solve_merit(&solution, &self.weights);
        Evaluation {
            converged: solution.converged,
            raw_merit: raw,
            merit: refine_merit(raw),
            objective: solution.objective_value,
            max_violation: solution.max_violation(),
            iterations: solution.iterations,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub action: Action,
    pub mean: f64,
    pub std: f64,
    pub beta: f64,
    pub acquisition: f64,
}

/// `β_k = log k`.
pub fn beta(k: usize) -> f64 {
    (k.max(1) as f64).ln()
}

/// Lower-confidence-bound acquisition over the whole action space; the
/// first minimum in enumeration order wins.
pub fn select_action(gp: &GpState, context: &Context, space: &ActionSpace, k: usize) -> Result<Selection> {
    if k == 0 {
        return Err(Error::InvalidArgument("iteration index starts at 1".into()));
    }
    let dim = gp.params().context_dim();
    let queries: Vec<Vec<f64>> = space.actions().iter().map(|a| encode(context, a, dim)).collect();
    let post = gp.posterior(&queries)?;
    let b = beta(k);
    let scale = b.sqrt();
    let mut best: Option<Selection> = None;
    for (i, action) in space.actions().iter().enumerate() {
        let acquisition = post.mean[i] - scale * post.std[i];
        if best.as_ref().is_none_or(|s| acquisition < s.acquisition) {
            best = Some(Selection {
                index: i,
                action: *action,
                mean: post.mean[i],
                std: post.std[i],
                beta: b,
                acquisition,
            });
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("empty action space".into()))
}

/// Low-pass filtered squared relative residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FsrrState {
    pub value: f64,
    pub k: usize,
}

impl Default for FsrrState {
    fn default() -> Self {
        Self { value: 1.0, k: 0 }
    }
}

pub fn update_fsrr(state: FsrrState, observed: f64, predicted: f64, rho: f64) -> FsrrState {
    let rel = (observed - predicted) / observed.abs().max(FSRR_GUARD);
    FsrrState { value: rho * rel * rel + (1.0 - rho) * state.value, k: state.k + 1 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epsilon: f64,
    pub intermediate_epsilon: f64,
    pub rho: f64,
    /// Iteration cap per curriculum stage.
    pub max_iterations: usize,
    /// Iterations at the start of each stage without termination checks.
    pub burn_in: usize,
    pub seed: u64,
    pub scenario: Scenario,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            intermediate_epsilon: 0.05,
            rho: 0.1,
            max_iterations: 2000,
            burn_in: 25,
            seed: 7,
            scenario: Scenario::Flat,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config("bo.rho must lie in (0, 1]".into()));
        }
        if !(self.epsilon > 0.0 && self.intermediate_epsilon > 0.0) {
            return Err(Error::Config("bo.epsilon values must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("bo.max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub k: usize,
    pub stage: u8,
    pub context: Context,
    pub action: Action,
    pub merit: f64,
    pub raw_merit: f64,
    pub converged: bool,
    pub mean: f64,
    pub std: f64,
    pub beta: f64,
    pub fsrr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub gp: GpState,
    pub log: Vec<LogRecord>,
    pub stop: StopReason,
    pub fsrr: f64,
}

impl TrainOutcome {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }

    /// Training log as CSV. The last row's `status` column carries the
    /// stop reason.
    pub fn write_log<W: Write>(&self, out: W) -> Result<()> {
        write_log(&self.log, self.stop, out)
    }
}

pub fn write_log<W: Write>(log: &[LogRecord], stop: StopReason, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n_t = log.first().map_or(0, |r| r.context.terrain_features.len());
    let mut header: Vec<String> = ["k", "stage", "goal"].map(String::from).to_vec();
    header.extend((1..=n_t).map(|i| format!("h{i}")));
    header.extend((1..=5).map(|i| format!("s{i}")));
    header.extend(
        ["merit", "raw_merit", "converged", "mu", "sigma", "beta", "fsrr", "status"].map(String::from),
    );
    w.write_record(&header)?;
    for (i, r) in log.iter().enumerate() {
        let mut row = vec![r.k.to_string(), r.stage.to_string(), fmt_f64(r.context.goal_distance)];
        row.extend(r.context.terrain_features.node_heights.iter().map(|h| fmt_f64(*h)));
        row.extend(r.action.slots().iter().map(|s| s.to_string()));
        row.extend([
            fmt_f64(r.merit),
            fmt_f64(r.raw_merit),
            r.converged.to_string(),
            fmt_f64(r.mean),
            fmt_f64(r.std),
            fmt_f64(r.beta),
            fmt_f64(r.fsrr),
        ]);
        let status = match (i + 1 == log.len(), stop) {
            (false, _) => "running",
            (true, StopReason::Converged) => "converged",
            (true, StopReason::MaxIterations) => "not_converged",
        };
        row.push(status.into());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same value.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Everything the training loop needs besides the oracle.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub config: TrainConfig,
    pub kernel: KernelParams,
    pub sampler: TerrainSampler,
}

struct Stage {
    id: u8,
    terrain: Scenario,
    epsilon: f64,
}

/// GP-UCB training loop. For the rough scenario without a warm start, a flat stage
/// runs first until the intermediate threshold; a warm-start model skips it.
pub fn train(setup: &TrainSetup, oracle: &dyn MeritOracle, warm_start: Option<&GpState>) -> Result<TrainOutcome> {
    let cfg = &setup.config;
    cfg.validate()?;
    let n_t = setup.sampler.feature_count(cfg.scenario);
    if setup.kernel.context_dim() != 1 + n_t {
        return Err(Error::DimensionMismatch { expected: 1 + n_t, got: setup.kernel.context_dim() });
    }
    let mut gp = match warm_start {
        Some(model) => {
            let dim = setup.kernel.context_dim();
            let inputs = (0..model.len())
                .map(|i| {
                    let x = model.input(i);
                    let c = model.params().context_dim();
                    let mut z = x[..c].to_vec();
                    z.resize(dim, 0.0);
                    z.extend_from_slice(&x[c..]);
                    z
                })
                .collect();
            GpState::from_data(setup.kernel.clone(), inputs, model.merits().to_vec())?
        }
        None => GpState::new(setup.kernel.clone())?,
    };
    let stages = match (cfg.scenario, warm_start.is_some()) {
        (Scenario::Flat, _) => vec![Stage { id: 1, terrain: Scenario::Flat, epsilon: cfg.epsilon }],
        (Scenario::Rough, true) => vec![Stage { id: 2, terrain: Scenario::Rough, epsilon: cfg.epsilon }],
        (Scenario::Rough, false) => vec![
            Stage { id: 1, terrain: Scenario::Flat, epsilon: cfg.intermediate_epsilon },
            Stage { id: 2, terrain: Scenario::Rough, epsilon: cfg.epsilon },
        ],
    };
    let space = enumerate_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fsrr = FsrrState::default();
    let mut log = Vec::new();
    let mut stop = StopReason::MaxIterations;
    for stage in &stages {
        stop = StopReason::MaxIterations;
        for it in 0..cfg.max_iterations {
            let (context, terrain) = match stage.terrain {
                Scenario::Rough => sample_context(&mut rng, Scenario::Rough, &setup.sampler)?,
                Scenario::Flat => {
                    let (c, t) = sample_context(&mut rng, Scenario::Flat, &setup.sampler)?;
                    (Context::new(c.goal_distance, TerrainFeatures::zeros(n_t))?, t)
                }
            };
            let k = gp.len() + 1;
            let sel = select_action(&gp, &context, &space, k)?;
            let ev = oracle.evaluate(&context, &terrain, &sel.action);
            gp.add_observation(&encode(&context, &sel.action, gp.params().context_dim()), ev.merit)?;
            fsrr = update_fsrr(fsrr, ev.merit, sel.mean, cfg.rho);
            log.push(LogRecord {
                k,
                stage: stage.id,
                context,
                action: sel.action,
                merit: ev.merit,
                raw_merit: ev.raw_merit,
                converged: ev.converged,
                mean: sel.mean,
                std: sel.std,
                beta: sel.beta,
                fsrr: fsrr.value,
            });
            if it + 1 >= cfg.burn_in && fsrr.value <= stage.epsilon {
                stop = StopReason::Converged;
                break;
            }
        }
    }
    Ok(TrainOutcome { gp, log, stop, fsrr: fsrr.value })
}

/// Recomputes the filter from logged merits and predictions; returns the
/// largest deviation from the logged values.
pub fn replay_fsrr(log: &[LogRecord], rho: f64) -> f64 {
    let mut state = FsrrState::default();
    log.iter()
        .map(|r| {
            state = update_fsrr(state, r.merit, r.mean, rho);
            (state.value - r.fsrr).abs()
        })
        .fold(0.0, f64::max)
}

/// Constant-cost evaluation helper for synthetic oracles.
pub fn synthetic_evaluation(merit: f64) -> Evaluation {
    Evaluation {
        converged: true,
        raw_merit: merit.atanh(),
        merit,
        objective: 0.0,
        max_violation: 0.0,
        iterations: 0,
    }
}
