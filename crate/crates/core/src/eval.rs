//! Duels between trained models and the fixed-schedule baseline.

use std::collections::HashMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bo::{canonicalize, sample_context, ActionSpace, Evaluation, MeritOracle, Scenario, TerrainSampler};
use crate::collocation::{Action, Context, MAX_GOAL_DISTANCE, PHASE_SLOTS};
use crate::gp::{GpState, SlatePredictor};
use crate::terrain::{TerrainFeatures, TerrainModel};
use crate::{Error, Result};

const BASELINE_SCHEDULES: [[u8; PHASE_SLOTS]; 5] =
    [[3, 0, 0, 0, 0], [4, 3, 5, 0, 0], [5, 4, 6, 0, 0], [4, 3, 3, 3, 4], [5, 4, 3, 4, 6]];

/// The five hand-picked schedules of the heuristic opponent.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSet {
    actions: Vec<Action>,
}

impl Default for BaselineSet {
    fn default() -> Self {
        Self {
            actions: BASELINE_SCHEDULES.iter().map(|s| canonicalize(*s).expect("baseline schedule")).collect(),
        }
    }
}

impl BaselineSet {
    /// The standard set in a caller-chosen order.
    pub fn new(actions: Vec<Action>) -> Result<Self> {
        let mut sorted = actions.clone();
        sorted.sort();
        let mut standard = Self::default().actions;
        standard.sort();
        if sorted != standard {
            return Err(Error::InvalidArgument("baseline must be a permutation of the five standard schedules".into()));
        }
        Ok(Self { actions })
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }
}

/// Mean predictions of one model over a fixed slate.
#[derive(Clone, Debug)]
pub struct ActionPredictor {
    actions: Vec<Action>,
    predictor: SlatePredictor,
    context_dim: usize,
}

impl ActionPredictor {
    pub fn new(model: &GpState, space: &ActionSpace) -> Self {
        let slate: Vec<[f64; PHASE_SLOTS]> = space.actions().iter().map(|a| a.features()).collect();
        Self {
            actions: space.actions().to_vec(),
            predictor: SlatePredictor::new(model, &slate),
            context_dim: model.params().context_dim(),
        }
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    /// Posterior-mean argmin; the first action in slate order wins ties.
    pub fn predict(&self, context: &Context) -> Result<(Action, f64)> {
        let mut z = context.features();
        z.resize(self.context_dim, 0.0);
        let mean = self.predictor.predict(&z)?;
        let (i, m) = mean
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, &m)| match best {
                Some((_, b)) if b <= m => best,
                _ => Some((i, m)),
            })
            .ok_or_else(|| Error::InvalidArgument("empty action space".into()))?;
        Ok((self.actions[i], m))
    }
}

/// Action with the lowest posterior mean at `context`. Terrain features
/// beyond the model's context are dropped and missing ones read as zero.
pub fn predict_action(model: &GpState, context: &Context, space: &ActionSpace) -> Result<Action> {
    ActionPredictor::new(model, space).predict(context).map(|(a, _)| a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineChoice {
    pub action: Action,
    pub evaluation: Evaluation,
    /// Every schedule failed; `action` is the least bad one.
    pub all_failed: bool,
}

/// Failed solve or a refined merit deep in the tanh saturation.
pub fn is_failure(evaluation: &Evaluation, threshold: f64) -> bool {
    !evaluation.converged || evaluation.merit > threshold
}

fn evaluate_cached(
    cache: &mut HashMap<Action, Evaluation>,
    oracle: &dyn MeritOracle,
    context: &Context,
    terrain: &TerrainModel,
    action: &Action,
) -> Evaluation {
    cache.entry(*action).or_insert_with(|| oracle.evaluate(context, terrain, action)).clone()
}

fn baseline_cached(
    baseline: &BaselineSet,
    cache: &mut HashMap<Action, Evaluation>,
    oracle: &dyn MeritOracle,
    context: &Context,
    terrain: &TerrainModel,
    threshold: f64,
) -> BaselineChoice {
    let mut best: Option<(Action, Evaluation)> = None;
    let mut all_failed = true;
    for action in &baseline.actions {
        let ev = evaluate_cached(cache, oracle, context, terrain, action);
        all_failed &= is_failure(&ev, threshold);
        let better = match &best {
            None => true,
            Some((a, b)) => ev.merit < b.merit || (ev.merit == b.merit && action < a),
        };
        if better {
            best = Some((*action, ev));
        }
    }
    let (action, evaluation) = best.expect("baseline is never empty");
    BaselineChoice { action, evaluation, all_failed }
}

/// Solves all baseline schedules and keeps the lowest refined merit, ties
/// going to the lexicographically smaller schedule.
pub fn baseline_select(
    context: &Context,
    terrain: &TerrainModel,
    baseline: &BaselineSet,
    oracle: &dyn MeritOracle,
    failure_threshold: f64,
) -> BaselineChoice {
    baseline_cached(baseline, &mut HashMap::new(), oracle, context, terrain, failure_threshold)
}

#[derive(Clone, Debug)]
pub enum Player {
    Model { name: String, model: GpState },
    Baseline(BaselineSet),
}

impl Player {
    pub fn name(&self) -> &str {
        match self {
            Self::Model { name, .. } => name,
            Self::Baseline(_) => "baseline",
        }
    }
}

enum Prepared<'a> {
    Model(ActionPredictor),
    Baseline(&'a BaselineSet),
}

impl<'a> Prepared<'a> {
    fn new(player: &'a Player, space: &ActionSpace) -> Self {
        match player {
            Player::Model { model, .. } => Self::Model(ActionPredictor::new(model, space)),
            Player::Baseline(b) => Self::Baseline(b),
        }
    }

    fn play(
        &self,
        cache: &mut HashMap<Action, Evaluation>,
        oracle: &dyn MeritOracle,
        context: &Context,
        terrain: &TerrainModel,
        threshold: f64,
    ) -> Result<(Action, Evaluation)> {
        match self {
            Self::Model(p) => {
                let (action, _) = p.predict(context)?;
                Ok((action, evaluate_cached(cache, oracle, context, terrain, &action)))
            }
            Self::Baseline(b) => {
                let c = baseline_cached(b, cache, oracle, context, terrain, threshold);
                Ok((c.action, c.evaluation))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuelConfig {
    pub rounds: usize,
    pub seed: u64,
    pub scenario: Scenario,
    /// Refined merit above which a converged solve still counts as failed.
    pub failure_threshold: f64,
    pub tie_tolerance: f64,
}

impl Default for DuelConfig {
    fn default() -> Self {
        Self { rounds: 100, seed: 11, scenario: Scenario::Flat, failure_threshold: 0.9, tie_tolerance: 1e-9 }
    }
}

impl DuelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("a duel needs at least one round".into()));
        }
        if !(self.failure_threshold > 0.0 && self.failure_threshold < 1.0) {
            return Err(Error::InvalidArgument("failure threshold must lie in (0, 1)".into()));
        }
        if !(self.tie_tolerance.is_finite() && self.tie_tolerance >= 0.0) {
            return Err(Error::InvalidArgument("tie tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    First,
    Second,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub context: Context,
    pub action1: Action,
    pub eval1: Evaluation,
    pub failed1: bool,
    pub action2: Action,
    pub eval2: Evaluation,
    pub failed2: bool,
    pub winner: Winner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuelSummary {
    pub player1: String,
    pub player2: String,
    pub scenario: Scenario,
    pub seed: u64,
    pub rounds: usize,
    /// Wins with ties counted as half a win for each side.
    pub wins1: f64,
    pub wins2: f64,
    pub ties: usize,
    pub win_fraction1: f64,
    pub failures1: usize,
    pub failures2: usize,
    pub failure_rate1: f64,
    pub failure_rate2: f64,
    pub mean_merit1: f64,
    pub mean_merit2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DuelReport {
    pub summary: DuelSummary,
    pub records: Vec<RoundRecord>,
}

impl DuelReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n_t = self.records.first().map_or(0, |r| r.context.terrain_features.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["round".to_string(), "goal".to_string()];
        header.extend((1..=n_t).map(|i| format!("h{i}")));
        for p in ["1", "2"] {
            for f in ["action", "schedule", "merit", "raw_merit", "converged", "failed"] {
                header.push(format!("{f}{p}"));
            }
        }
        header.push("winner".into());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.round.to_string(), format!("{:?}", r.context.goal_distance)];
            row.extend(r.context.terrain_features.node_heights.iter().map(|h| format!("{h:?}")));
            for (a, e, failed) in [(&r.action1, &r.eval1, r.failed1), (&r.action2, &r.eval2, r.failed2)] {
                row.push(a.to_string());
                row.push(a.schedule_string());
                row.push(format!("{:?}", e.merit));
                row.push(format!("{:?}", e.raw_merit));
                row.push(e.converged.to_string());
                row.push(failed.to_string());
            }
            row.push(
                match r.winner {
                    Winner::First => "first",
                    Winner::Second => "second",
                    Winner::Tie => "tie",
                }
                .into(),
            );
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.summary)?;
        Ok(())
    }
}

/// Plays `config.rounds` rounds on contexts drawn from `config.seed`. Both
/// players are scored by the same oracle on the same terrain; a model only
/// sees as many context features as it was trained with.
pub fn duel(
    player1: &Player,
    player2: &Player,
    config: &DuelConfig,
    sampler: &TerrainSampler,
    space: &ActionSpace,
    oracle: &dyn MeritOracle,
) -> Result<DuelReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let contexts = (0..config.rounds)
        .map(|_| sample_context(&mut rng, config.scenario, sampler))
        .collect::<Result<Vec<_>>>()?;
    let p1 = Prepared::new(player1, space);
    let p2 = Prepared::new(player2, space);
    let th = config.failure_threshold;
    let records = contexts
        .into_par_iter()
        .enumerate()
        .map(|(round, (context, terrain))| {
            let mut cache = HashMap::new();
            let (action1, eval1) = p1.play(&mut cache, oracle, &context, &terrain, th)?;
            let (action2, eval2) = p2.play(&mut cache, oracle, &context, &terrain, th)?;
            let winner = if (eval1.merit - eval2.merit).abs() <= config.tie_tolerance {
                Winner::Tie
            } else if eval1.merit < eval2.merit {
                Winner::First
            } else {
                Winner::Second
            };
            Ok(RoundRecord {
                round,
                failed1: is_failure(&eval1, th),
                failed2: is_failure(&eval2, th),
                context,
                action1,
                eval1,
                action2,
                eval2,
                winner,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(player1.name(), player2.name(), config, &records);
    Ok(DuelReport { summary, records })
}

fn summarize(name1: &str, name2: &str, config: &DuelConfig, records: &[RoundRecord]) -> DuelSummary {
    let n = records.len();
    let count = |w: Winner| records.iter().filter(|r| r.winner == w).count();
    let ties = count(Winner::Tie);
    let wins1 = count(Winner::First) as f64 + 0.5 * ties as f64;
    let wins2 = count(Winner::Second) as f64 + 0.5 * ties as f64;
    let failures1 = records.iter().filter(|r| r.failed1).count();
    let failures2 = records.iter().filter(|r| r.failed2).count();
    let nf = n.max(1) as f64;
    DuelSummary {
        player1: name1.into(),
        player2: name2.into(),
        scenario: config.scenario,
        seed: config.seed,
        rounds: n,
        wins1,
        wins2,
        ties,
        win_fraction1: wins1 / nf,
        failures1,
        failures2,
        failure_rate1: failures1 as f64 / nf,
        failure_rate2: failures2 as f64 / nf,
        mean_merit1: records.iter().map(|r| r.eval1.merit).sum::<f64>() / nf,
        mean_merit2: records.iter().map(|r| r.eval2.merit).sum::<f64>() / nf,
    }
}

/// Centered moving average; the window shrinks at the ends.
pub fn smooth_merits(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("cannot smooth an empty series".into()));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("window must be odd and positive, got {window}")));
    }
    let half = window / 2;
    Ok((0..series.len())
        .map(|i| {
            let s = &series[i.saturating_sub(half)..(i + half + 1).min(series.len())];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub goal_distance: f64,
    pub action: Action,
    pub mean: f64,
}

/// Predicted action over goal distances `0, r, 2r, ...` up to the context
/// bound, on flat terrain.
pub fn transition_map(model: &GpState, space: &ActionSpace, resolution: f64) -> Result<Vec<TransitionRow>> {
    if !(resolution.is_finite() && resolution > 0.0 && resolution <= MAX_GOAL_DISTANCE) {
        return Err(Error::InvalidArgument(format!("resolution must lie in (0, {MAX_GOAL_DISTANCE}], got {resolution}")));
    }
    let steps = (MAX_GOAL_DISTANCE / resolution - 1e-9).ceil() as usize;
    let predictor = ActionPredictor::new(model, space);
    let n_t = model.params().context_dim() - 1;
    (0..=steps)
        .map(|i| {
            let goal = (i as f64 * resolution).min(MAX_GOAL_DISTANCE);
            let context = Context::new(goal, TerrainFeatures::zeros(n_t))?;
            let (action, mean) = predictor.predict(&context)?;
            Ok(TransitionRow { goal_distance: goal, action, mean })
        })
        .collect()
}

pub fn write_transition_map<W: Write>(rows: &[TransitionRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["goal", "s1", "s2", "s3", "s4", "s5", "phases", "schedule", "mean"])?;
    for r in rows {
        let mut row = vec![format!("{:?}", r.goal_distance)];
        row.extend(r.action.slots().iter().map(|s| s.to_string()));
        row.push(r.action.phase_count().to_string());
        row.push(r.action.schedule_string());
        row.push(format!("{:?}", r.mean));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of consecutive rows whose phase count does not drop.
pub fn monotone_fraction(rows: &[TransitionRow]) -> f64 {
    if rows.len() < 2 {
        return 1.0;
    }
    let ok = rows.windows(2).filter(|w| w[1].action.phase_count() >= w[0].action.phase_count()).count();
    ok as f64 / (rows.len() - 1) as f64
}
