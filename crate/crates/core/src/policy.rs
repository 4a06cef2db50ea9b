//! Control rules queried by the simulator at `(t, x, label)`.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::hjb::ValueGrid;
use crate::labels::Label;
use crate::model::ControlIndex;

#[derive(Clone, Debug)]
pub enum Policy {
    /// The same control everywhere.
    Constant(ControlIndex),
    /// Markov feedback `(t, x) -> a` read off a solved value grid.
    FeedbackGrid(FeedbackRule),
    /// Per-label piecewise-constant schedules.
    OpenLoopTable(OpenLoopTable),
}

impl Policy {
    pub fn control(&self, t: f64, x: &[f64], label: &Label) -> ControlIndex {
        match self {
            Policy::Constant(a) => *a,
            Policy::FeedbackGrid(rule) => rule.control(t, x),
            Policy::OpenLoopTable(table) => table.control(t, label),
        }
    }

    /// True when the rule ignores the label, so every subfamily of particles
    /// sees the same rule.
    pub fn is_label_independent(&self) -> bool {
        match self {
            Policy::Constant(_) | Policy::FeedbackGrid(_) => true,
            Policy::OpenLoopTable(t) => t.per_label.is_empty(),
        }
    }

    /// Largest control index the rule can return.
    pub fn max_control(&self) -> ControlIndex {
        match self {
            Policy::Constant(a) => *a,
            Policy::FeedbackGrid(rule) => rule.grid.params().num_controls() - 1,
            Policy::OpenLoopTable(t) => t.max_control(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Policy::Constant(a) => format!("constant({a})"),
            Policy::FeedbackGrid(_) => "feedback".to_string(),
            Policy::OpenLoopTable(t) if t.per_label.is_empty() => "schedule".to_string(),
            Policy::OpenLoopTable(t) => format!("open-loop({} labels)", t.per_label.len()),
        }
    }
}

/// Hamiltonian argmin on the nearest time layer of a value grid.
#[derive(Clone, Debug)]
pub struct FeedbackRule {
    grid: Arc<ValueGrid>,
}

impl FeedbackRule {
    pub fn new(grid: Arc<ValueGrid>) -> Self {
        FeedbackRule { grid }
    }

    pub fn grid(&self) -> &ValueGrid {
        &self.grid
    }

    pub fn control(&self, t: f64, x: &[f64]) -> ControlIndex {
        self.grid.feedback_control(t, x[0])
    }
}

/// Feedback policy extracted from a solved grid. A single-control model
/// yields the constant policy.
pub fn extract_feedback(grid: Arc<ValueGrid>) -> Policy {
    if grid.params().num_controls() == 1 {
        Policy::Constant(0)
    } else {
        Policy::FeedbackGrid(FeedbackRule::new(grid))
    }
}

/// Piecewise-constant control in time: `segments[k] = (start, a)` applies on
/// `[start_k, start_{k+1})`; times before the first start use the first control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    segments: Vec<(f64, ControlIndex)>,
}

impl Schedule {
    pub fn constant(a: ControlIndex) -> Self {
        Schedule {
            segments: vec![(f64::NEG_INFINITY, a)],
        }
    }

    pub fn new(mut segments: Vec<(f64, ControlIndex)>) -> Self {
        assert!(!segments.is_empty(), "schedule needs at least one segment");
        segments.sort_by(|a, b| a.0.total_cmp(&b.0));
        Schedule { segments }
    }

    pub fn control(&self, t: f64) -> ControlIndex {
        let k = self.segments.partition_point(|(start, _)| *start <= t);
        self.segments[k.saturating_sub(1)].1
    }

    fn max_control(&self) -> ControlIndex {
        self.segments.iter().map(|s| s.1).max().unwrap_or(0)
    }
}

/// Open-loop controls indexed by label, with a fallback for unlisted labels.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoopTable {
    default: Schedule,
    per_label: HashMap<Label, Schedule>,
}

impl OpenLoopTable {
    pub fn new(default: Schedule) -> Self {
        OpenLoopTable {
            default,
            per_label: HashMap::new(),
        }
    }

    pub fn with_label(mut self, label: Label, schedule: Schedule) -> Self {
        self.per_label.insert(label, schedule);
        self
    }

    pub fn control(&self, t: f64, label: &Label) -> ControlIndex {
        self.per_label
            .get(label)
            .unwrap_or(&self.default)
            .control(t)
    }

    fn max_control(&self) -> ControlIndex {
        self.per_label
            .values()
            .map(Schedule::max_control)
            .chain([self.default.max_control()])
            .max()
            .unwrap_or(0)
    }
}
