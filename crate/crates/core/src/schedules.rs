//! Schedules: which objective supplies the next batch, and when to stop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::evaluation::Split;
use crate::objectives::Objective;
use crate::rng::{RngStreams, StreamRng};

/// Desk-scale per-objective update caps.
pub const PARALLEL_MAX_STEPS: usize = 3_000;
pub const SEQUENTIAL_MAX_STEPS: usize = 6_000;

/// Read-only state a strategy decides from.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleView<'a> {
    pub converged: &'a [bool],
    pub emitted: &'a [usize],
    pub max_steps: &'a [usize],
}

impl ScheduleView<'_> {
    pub fn len(&self) -> usize {
        self.emitted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emitted.is_empty()
    }

    pub fn capped(&self, i: usize) -> bool {
        self.emitted[i] >= self.max_steps[i]
    }
}

/// A sampling strategy. Custom curricula only need `sample_objectives`.
pub trait SamplingStrategy: fmt::Debug + Send {
    fn name(&self) -> &str {
        "custom"
    }

    /// Index of the objective supplying the next batch, or `None` when
    /// the strategy is exhausted.
    fn sample_objectives(&mut self, view: &ScheduleView<'_>) -> Option<usize>;

    /// Every objective converged, or any objective reached its cap.
    fn should_stop(&self, view: &ScheduleView<'_>) -> bool {
        view.converged.iter().all(|&c| c) || (0..view.len()).any(|i| view.capped(i))
    }

    /// Current phase for strategies that train objectives one at a time.
    fn phase(&self) -> Option<usize> {
        None
    }
}

/// Strict round-robin in registration order.
#[derive(Debug, Clone, Default)]
pub struct Parallel {
    next: usize,
    /// Skip objectives that have converged.
    pub skip_converged: bool,
}

impl SamplingStrategy for Parallel {
    fn name(&self) -> &str {
        "parallel"
    }

    fn sample_objectives(&mut self, view: &ScheduleView<'_>) -> Option<usize> {
        let n = view.len();
        for _ in 0..n {
            let i = self.next % n;
            self.next = (i + 1) % n;
            if !(self.skip_converged && view.converged[i]) {
                return Some(i);
            }
        }
        None
    }

    /// Only checked between rounds, so every round supplies all objectives.
    fn should_stop(&self, view: &ScheduleView<'_>) -> bool {
        let all_converged = view.converged.iter().all(|&c| c);
        all_converged || (self.next == 0 && (0..view.len()).any(|i| view.capped(i)))
    }
}

/// One objective at a time until it converges or reaches its cap.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    phase: usize,
    entered: bool,
}

impl Sequential {
    fn ended(&self, view: &ScheduleView<'_>, k: usize) -> bool {
        view.capped(k) || (k == self.phase && self.entered && view.converged[k])
    }
}

impl SamplingStrategy for Sequential {
    fn name(&self) -> &str {
        "sequential"
    }

    fn sample_objectives(&mut self, view: &ScheduleView<'_>) -> Option<usize> {
        while self.phase < view.len() {
            if !self.ended(view, self.phase) {
                // A freshly entered phase ignores convergence flags set
                // before it started.
                self.entered = true;
                return Some(self.phase);
            }
            self.phase += 1;
            self.entered = false;
        }
        None
    }

    fn should_stop(&self, view: &ScheduleView<'_>) -> bool {
        (self.phase..view.len()).all(|k| self.ended(view, k))
    }

    fn phase(&self) -> Option<usize> {
        Some(self.phase)
    }
}

/// Independent uniform draws over all objectives.
#[derive(Debug, Clone)]
pub struct RandomUniform {
    rng: StreamRng,
}

impl RandomUniform {
    pub fn new(rng: StreamRng) -> Self {
        Self { rng }
    }
}

impl SamplingStrategy for RandomUniform {
    fn name(&self) -> &str {
        "uniform"
    }

    fn sample_objectives(&mut self, view: &ScheduleView<'_>) -> Option<usize> {
        (!view.is_empty()).then(|| self.rng.random_range(0..view.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Parallel,
    Sequential,
    Uniform,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(StrategyKind::Parallel),
            "sequential" => Ok(StrategyKind::Sequential),
            "uniform" => Ok(StrategyKind::Uniform),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

impl StrategyKind {
    pub fn default_max_steps(&self) -> usize {
        match self {
            StrategyKind::Sequential => SEQUENTIAL_MAX_STEPS,
            _ => PARALLEL_MAX_STEPS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Cursor {
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScheduleState {
    cursors: Vec<Cursor>,
    pub emitted: Vec<usize>,
    pub total_emitted: usize,
    pub phase: Option<usize>,
    phase_changed: bool,
}

impl ScheduleState {
    /// `(position in epoch, epoch)` of objective `i`'s dataset cursor.
    pub fn cursor(&self, i: usize) -> (usize, usize) {
        let c = &self.cursors[i];
        (c.pos, c.epoch)
    }
}

#[derive(Debug)]
pub struct Schedule {
    objectives: Vec<Objective>,
    strategy: Box<dyn SamplingStrategy>,
    max_steps: Vec<usize>,
    global_max_steps: Option<usize>,
    streams: RngStreams,
    state: ScheduleState,
}

impl Schedule {
    pub fn new(
        objectives: Vec<Objective>,
        strategy: Box<dyn SamplingStrategy>,
        max_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        if objectives.is_empty() {
            return Err(Error::Config("a schedule needs at least one objective".into()));
        }
        for (i, o) in objectives.iter().enumerate() {
            if objectives[..i].iter().any(|p| p.id() == o.id()) {
                return Err(Error::Config(format!("duplicate objective id `{}`", o.id())));
            }
        }
        let n = objectives.len();
        Ok(Self {
            objectives,
            strategy,
            max_steps: vec![max_steps; n],
            global_max_steps: None,
            streams: RngStreams::new(seed),
            state: ScheduleState {
                cursors: vec![Cursor::default(); n],
                emitted: vec![0; n],
                ..ScheduleState::default()
            },
        })
    }

    pub fn parallel(objectives: Vec<Objective>, seed: u64) -> Result<Self> {
        Self::new(objectives, Box::new(Parallel::default()), PARALLEL_MAX_STEPS, seed)
    }

    pub fn sequential(objectives: Vec<Objective>, seed: u64) -> Result<Self> {
        Self::new(objectives, Box::new(Sequential::default()), SEQUENTIAL_MAX_STEPS, seed)
    }

    pub fn of_kind(kind: StrategyKind, objectives: Vec<Objective>, seed: u64) -> Result<Self> {
        let strategy: Box<dyn SamplingStrategy> = match kind {
            StrategyKind::Parallel => Box::new(Parallel::default()),
            StrategyKind::Sequential => Box::new(Sequential::default()),
            StrategyKind::Uniform => Box::new(RandomUniform::new(
                RngStreams::new(seed).stream("schedule/uniform"),
            )),
        };
        Self::new(objectives, strategy, kind.default_max_steps(), seed)
    }

    pub fn set_max_steps(&mut self, objective_id: &str, max_steps: usize) -> Result<()> {
        let i = self.index_of(objective_id)?;
        self.max_steps[i] = max_steps;
        Ok(())
    }

    pub fn set_all_max_steps(&mut self, max_steps: usize) {
        self.max_steps.iter_mut().for_each(|m| *m = max_steps);
    }

    pub fn set_global_max_steps(&mut self, max_steps: Option<usize>) {
        self.global_max_steps = max_steps;
    }

    pub fn strategy_name(&self) -> &str {
        self.strategy.name()
    }

    pub fn objectives(&self) -> &[Objective] {
        &self.objectives
    }

    pub fn objectives_mut(&mut self) -> &mut [Objective] {
        &mut self.objectives
    }

    pub fn into_objectives(self) -> Vec<Objective> {
        self.objectives
    }

    pub fn state(&self) -> &ScheduleState {
        &self.state
    }

    pub fn index_of(&self, objective_id: &str) -> Result<usize> {
        self.objectives
            .iter()
            .position(|o| o.id() == objective_id)
            .ok_or_else(|| Error::Routing(format!("objective `{objective_id}` is not scheduled")))
    }

    pub fn objective_mut(&mut self, objective_id: &str) -> Result<&mut Objective> {
        let i = self.index_of(objective_id)?;
        Ok(&mut self.objectives[i])
    }

    fn with_view<R>(&self, f: impl FnOnce(&ScheduleView<'_>) -> R) -> R {
        let converged: Vec<bool> = self.objectives.iter().map(|o| o.state.converged).collect();
        f(&ScheduleView {
            converged: &converged,
            emitted: &self.state.emitted,
            max_steps: &self.max_steps,
        })
    }

    /// Next objective index from the strategy.
    pub fn sample_objectives(&mut self) -> Option<usize> {
        let converged: Vec<bool> = self.objectives.iter().map(|o| o.state.converged).collect();
        let view = ScheduleView {
            converged: &converged,
            emitted: &self.state.emitted,
            max_steps: &self.max_steps,
        };
        let next = self.strategy.sample_objectives(&view);
        let phase = self.strategy.phase();
        if phase != self.state.phase {
            self.state.phase = phase;
            self.state.phase_changed = true;
            if let Some(p) = phase.filter(|&p| p < self.objectives.len()) {
                self.objectives[p].state.begin_phase();
            }
        }
        next
    }

    pub fn should_stop(&self) -> bool {
        if self
            .global_max_steps
            .is_some_and(|m| self.state.total_emitted >= m)
        {
            return true;
        }
        self.with_view(|v| self.strategy.should_stop(v))
    }

    /// True once after the sequential phase advanced.
    pub fn take_phase_change(&mut self) -> bool {
        std::mem::take(&mut self.state.phase_changed)
    }

    /// Draws the next objective and its next train batch; `None` once the
    /// strategy is exhausted.
    pub fn next_batch(&mut self) -> Result<Option<Batch>> {
        let Some(i) = self.sample_objectives() else {
            return Ok(None);
        };
        let batch = self.take_rows(i)?;
        self.state.emitted[i] += 1;
        self.state.total_emitted += 1;
        Ok(Some(batch))
    }

    fn take_rows(&mut self, i: usize) -> Result<Batch> {
        let n = self.objectives[i].source(Split::Train).len();
        let id = self.objectives[i].id().to_string();
        if n == 0 {
            return Err(Error::Data {
                objective: id,
                detail: "training data is empty".into(),
            });
        }
        let bs = self.objectives[i].batch_size();
        // Back-translation can drop rows; give up after a full epoch of
        // nothing.
        let mut scanned = 0;
        loop {
            let cursor = &mut self.state.cursors[i];
            if cursor.order.is_empty() || cursor.pos >= cursor.order.len() {
                if !cursor.order.is_empty() {
                    cursor.epoch += 1;
                    self.objectives[i].state.epochs_completed += 1;
                }
                cursor.order = (0..n).collect();
                let stream = format!("schedule/shuffle/{i}/{}", cursor.epoch);
                cursor.order.shuffle(&mut self.streams.stream(&stream));
                cursor.pos = 0;
            }
            let end = (cursor.pos + bs).min(cursor.order.len());
            let indices = cursor.order[cursor.pos..end].to_vec();
            let epoch = cursor.epoch;
            cursor.pos = end;
            scanned += indices.len();
            let rows = self.objectives[i].prepare_rows(Split::Train, epoch, &indices)?;
            if !rows.is_empty() {
                return Batch::collate(&id, &rows);
            }
            if scanned >= n {
                return Err(Error::Data {
                    objective: id,
                    detail: "no usable training examples in a full epoch".into(),
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{TextPairSource, Vocab};
    use crate::objectives::ObjectiveKind;
    use std::sync::Arc;

    fn objective(id: &str, n: usize, bs: usize) -> Objective {
        let texts: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let vocab = Arc::new(Vocab::build(&texts));
        let train = TextPairSource::new(texts.clone(), texts).unwrap();
        Objective::new(id, ObjectiveKind::Seq2Seq, vocab, train, TextPairSource::default())
            .unwrap()
            .with_batch_size(bs)
            .unwrap()
    }

    fn draw(s: &mut Schedule, n: usize) -> Vec<String> {
        let mut out = Vec::new();
        for _ in 0..n {
            if s.should_stop() {
                break;
            }
            match s.next_batch().unwrap() {
                Some(b) => out.push(b.objective_id),
                None => break,
            }
        }
        out
    }

    #[test]
    fn parallel_is_round_robin() {
        let mut s = Schedule::parallel(vec![objective("A", 8, 4), objective("B", 8, 8)], 0).unwrap();
        assert!(!s.should_stop());
        let mut sizes = Vec::new();
        for _ in 0..6 {
            let b = s.next_batch().unwrap().unwrap();
            sizes.push((b.objective_id.clone(), b.len()));
        }
        let expect: Vec<(String, usize)> = [("A", 4), ("B", 8)]
            .iter()
            .cycle()
            .take(6)
            .map(|(a, b)| (a.to_string(), *b))
            .collect();
        assert_eq!(sizes, expect);
    }

    #[test]
    fn single_objective_repeats() {
        let mut s = Schedule::parallel(vec![objective("A", 3, 1)], 0).unwrap();
        assert_eq!(draw(&mut s, 5), vec!["A"; 5]);
    }

    #[test]
    fn sequential_phases_then_exhausted() {
        let mut s = Schedule::sequential(vec![objective("A", 8, 2), objective("B", 8, 2)], 0).unwrap();
        s.set_all_max_steps(2);
        let mut seen = Vec::new();
        while let Some(b) = s.next_batch().unwrap() {
            seen.push(b.objective_id);
        }
        assert_eq!(seen, vec!["A", "A", "B", "B"]);
        assert!(s.should_stop());
    }

    #[test]
    fn parallel_caps_stop_after_ten() {
        let mut s = Schedule::parallel(vec![objective("A", 8, 2), objective("B", 8, 2)], 0).unwrap();
        s.set_all_max_steps(5);
        assert_eq!(draw(&mut s, 100).len(), 10);
    }

    #[test]
    fn converged_objectives_stop_the_schedule() {
        let mut s = Schedule::parallel(vec![objective("A", 8, 2), objective("B", 8, 2)], 0).unwrap();
        for o in s.objectives_mut() {
            o.state.converged = true;
        }
        assert!(s.should_stop());
    }

    #[test]
    fn epoch_boundary_and_reshuffle() {
        let mut s = Schedule::parallel(vec![objective("A", 10, 4)], 7).unwrap();
        let mut sizes = Vec::new();
        let mut epochs = Vec::new();
        let mut first = Vec::new();
        for _ in 0..6 {
            let b = s.next_batch().unwrap().unwrap();
            sizes.push(b.len());
            epochs.push(s.state().cursor(0).1);
            first.push(b.raw_refs.clone());
        }
        assert_eq!(sizes, vec![4, 4, 2, 4, 4, 2]);
        assert_eq!(epochs, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(s.objectives()[0].state.epochs_completed, 1);
        let epoch0: Vec<String> = first[..3].concat();
        let epoch1: Vec<String> = first[3..].concat();
        assert_ne!(epoch0, epoch1);
        let (mut a, mut b) = (epoch0.clone(), epoch1.clone());
        a.sort();
        b.sort();
        assert_eq!(a, b);

        let mut again = Schedule::parallel(vec![objective("A", 10, 4)], 7).unwrap();
        let replay: Vec<Vec<String>> =
            (0..6).map(|_| again.next_batch().unwrap().unwrap().raw_refs).collect();
        assert_eq!(replay, first);
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let mut s = Schedule::parallel(vec![objective("A", 0, 2)], 0).unwrap();
        assert!(matches!(s.next_batch(), Err(Error::Data { objective, .. }) if objective == "A"));
        assert!(matches!(Schedule::parallel(vec![], 0), Err(Error::Config(_))));
        assert!(matches!(
            Schedule::parallel(vec![objective("A", 1, 1), objective("A", 1, 1)], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn round_robin_fairness() {
        let objs = (0..3).map(|i| objective(&format!("o{i}"), 5, 2)).collect();
        let mut s = Schedule::parallel(objs, 0).unwrap();
        for _ in 0..3 * 7 {
            s.next_batch().unwrap();
        }
        assert_eq!(s.state().emitted, vec![7, 7, 7]);
    }

    #[test]
    fn uniform_draws_cover_all_objectives() {
        let objs = vec![objective("A", 4, 1), objective("B", 4, 1)];
        let mut s = Schedule::of_kind(StrategyKind::Uniform, objs, 3).unwrap();
        let seen = draw(&mut s, 40);
        assert!(seen.iter().any(|x| x == "A") && seen.iter().any(|x| x == "B"));
    }
}
