//! Ordered task sampling: meta-training tasks whose average divergence grows
//! over the course of training.
//!
//! Each domain's scored sentences are sorted ascending; a sliding quantile
//! window moves from the low-divergence end to the high end as meta-steps
//! advance, and every task draws its support/query members fresh from the
//! window slice of its (round-robin assigned) domain. The uniform sampler —
//! the traditional meta-learning baseline — sees the whole pool through a
//! fixed `(0, 1)` window and freezes task membership across steps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::scoring::ScoredSentence;
use crate::seed::rng_for;
use rand::seq::SliceRandom;

/// One meta-learning task: a domain's support set for inner adaptation and a
/// disjoint query set for the outer loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// Index within its step's task list.
    pub task_id: u32,
    pub domain: String,
    pub support: Vec<SentencePair>,
    pub query: Vec<SentencePair>,
    /// Mean curriculum key over all members (support and query). The key is
    /// the stored divergence, negated when the schedule was built with
    /// `flip_sign`.
    pub mean_divergence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurriculumConfig {
    /// Total meta-steps M.
    pub meta_steps: usize,
    /// Tasks per step I.
    pub tasks_per_step: usize,
    /// Source-token budget for each task's support set.
    pub support_budget: usize,
    /// Source-token budget for each task's query set.
    pub query_budget: usize,
    /// Sliding window width as a quantile fraction.
    pub window_width: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            meta_steps: 10,
            tasks_per_step: 160,
            support_budget: 8_000,
            query_budget: 16_000,
            window_width: 0.5,
        }
    }
}

/// Sorts ascending by divergence, ties broken by pair id, so equal scores
/// always order the same way.
pub fn sort_by_divergence(mut scored: Vec<ScoredSentence>) -> Vec<ScoredSentence> {
    scored.sort_by(|a, b| {
        a.divergence
            .partial_cmp(&b.divergence)
            .unwrap()
            .then(a.pair.id.cmp(&b.pair.id))
    });
    scored
}

/// The task distribution: per-domain sorted scores plus the window rule.
#[derive(Debug, Clone)]
pub struct CurriculumSchedule {
    cfg: CurriculumConfig,
    /// Domain names in sorted order; round-robin assignment follows this.
    domains: Vec<String>,
    /// Per domain, ascending by curriculum key: `(key, scored sentence)`.
    sorted: BTreeMap<String, Vec<(f64, ScoredSentence)>>,
}

impl CurriculumSchedule {
    /// Builds the schedule. `flip_sign` negates every key before sorting, for
    /// corpora where low raw divergence marks the *hard* end.
    pub fn new(
        cfg: CurriculumConfig,
        scored_by_domain: BTreeMap<String, Vec<ScoredSentence>>,
        flip_sign: bool,
    ) -> Result<Self> {
        if cfg.meta_steps == 0 || cfg.tasks_per_step == 0 {
            return Err(Error::InvalidConfig(
                "meta_steps and tasks_per_step must be >= 1".into(),
            ));
        }
        if cfg.support_budget == 0 || cfg.query_budget == 0 {
            return Err(Error::InvalidConfig("token budgets must be >= 1".into()));
        }
        if !(cfg.window_width > 0.0 && cfg.window_width <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "window_width {} outside (0, 1]",
                cfg.window_width
            )));
        }
        // Narrower than 1/M leaves a gap between consecutive windows, making
        // part of the pool unreachable.
        if cfg.window_width * (cfg.meta_steps as f64) < 1.0 - 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "window_width {} < 1/meta_steps: windows would not cover the pool",
                cfg.window_width
            )));
        }
        if scored_by_domain.is_empty() {
            return Err(Error::EmptyCorpus("no scored domains".into()));
        }
        let mut sorted = BTreeMap::new();
        for (domain, scores) in scored_by_domain {
            if scores.is_empty() {
                return Err(Error::EmptyCorpus(domain));
            }
            let mut keyed: Vec<(f64, ScoredSentence)> = scores
                .into_iter()
                .map(|s| {
                    let key = if flip_sign { -s.divergence } else { s.divergence };
                    (key, s)
                })
                .collect();
            if keyed.iter().any(|(k, _)| !k.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    context: format!("divergence score in domain '{domain}'"),
                });
            }
            keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.pair.id.cmp(&b.1.pair.id)));
            sorted.insert(domain, keyed);
        }
        let domains = sorted.keys().cloned().collect();
        Ok(CurriculumSchedule {
            cfg,
            domains,
            sorted,
        })
    }

    pub fn config(&self) -> &CurriculumConfig {
        &self.cfg
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    /// Quantile window for a 1-based step: the window slides linearly from
    /// `(0, w)` to `(1-w, 1)`. A single-step schedule sees everything.
    pub fn window(&self, step: usize) -> Result<(f64, f64)> {
        let m = self.cfg.meta_steps;
        if step == 0 || step > m {
            return Err(Error::InvalidConfig(format!(
                "step {step} outside 1..={m}"
            )));
        }
        if m == 1 {
            return Ok((0.0, 1.0));
        }
        let w = self.cfg.window_width;
        let lo = (1.0 - w) * (step - 1) as f64 / (m - 1) as f64;
        let hi = (lo + w).min(1.0);
        Ok((lo, hi))
    }

    /// Index range of a window over `n` sorted items: generous rounding
    /// (floor the low edge, ceil the high edge) so neighbouring windows never
    /// leave an item uncovered.
    fn slice_bounds(lo: f64, hi: f64, n: usize) -> (usize, usize) {
        let start = (lo * n as f64).floor() as usize;
        let end = ((hi * n as f64).ceil() as usize).min(n);
        (start.min(end), end)
    }

    /// Samples the step's `I` tasks: domains round-robin, members uniform
    /// without replacement from each domain's window slice, support filled
    /// first and query continuing from the first rejected pair.
    pub fn assemble_tasks(&self, step: usize, seed: u64) -> Result<Vec<Task>> {
        let (lo, hi) = self.window(step)?;
        self.tasks_in_window(lo, hi, seed, step as u64, step)
    }

    /// The uniform baseline: whole pool, membership independent of step.
    /// Calling this once and reusing the result for every step is the frozen
    /// behaviour; calling it repeatedly returns bit-identical tasks.
    pub fn uniform_tasks(&self, seed: u64) -> Result<Vec<Task>> {
        self.tasks_in_window(0.0, 1.0, seed, u64::MAX, 0)
    }

    fn tasks_in_window(
        &self,
        lo: f64,
        hi: f64,
        seed: u64,
        step_coord: u64,
        step_for_errors: usize,
    ) -> Result<Vec<Task>> {
        let mut tasks = Vec::with_capacity(self.cfg.tasks_per_step);
        for i in 0..self.cfg.tasks_per_step {
            let domain = &self.domains[i % self.domains.len()];
            let items = &self.sorted[domain];
            let (start, end) = Self::slice_bounds(lo, hi, items.len());
            let slice = &items[start..end];
            let mut order: Vec<&(f64, ScoredSentence)> = slice.iter().collect();
            order.shuffle(&mut rng_for(seed, &[step_coord, i as u64]));

            let (support, after) = fill_scored(&order, self.cfg.support_budget);
            let (query, _) = fill_scored(&order[after..], self.cfg.query_budget);
            if support.is_empty() || query.is_empty() {
                return Err(Error::WindowTooSmall {
                    domain: domain.clone(),
                    step: step_for_errors,
                    detail: format!(
                        "slice of {} pairs filled support/query {}/{} under budgets {}/{}",
                        slice.len(),
                        support.len(),
                        query.len(),
                        self.cfg.support_budget,
                        self.cfg.query_budget
                    ),
                });
            }
            let total = support.len() + query.len();
            let key_sum: f64 = support.iter().chain(&query).map(|(k, _)| *k).sum();
            tasks.push(Task {
                task_id: i as u32,
                domain: domain.clone(),
                support: support.into_iter().map(|(_, p)| p).collect(),
                query: query.into_iter().map(|(_, p)| p).collect(),
                mean_divergence: key_sum / total as f64,
            });
        }
        Ok(tasks)
    }

    /// Every index a domain's windows can ever reach; used to check that the
    /// schedule wastes nothing.
    pub fn reachable_ids(&self, domain: &str) -> Result<Vec<u32>> {
        let items = self
            .sorted
            .get(domain)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown domain '{domain}'")))?;
        let mut seen = vec![false; items.len()];
        for step in 1..=self.cfg.meta_steps {
            let (lo, hi) = self.window(step)?;
            let (start, end) = Self::slice_bounds(lo, hi, items.len());
            for flag in &mut seen[start..end] {
                *flag = true;
            }
        }
        Ok(items
            .iter()
            .zip(&seen)
            .filter(|(_, &s)| s)
            .map(|((_, s), _)| s.pair.id)
            .collect())
    }
}

/// Greedy prefix fill over shuffled scored pairs: take while the source-token
/// total stays within budget, stop at the first overflow. Returns the taken
/// items and the index after the stop.
fn fill_scored(
    order: &[&(f64, ScoredSentence)],
    budget: usize,
) -> (Vec<(f64, SentencePair)>, usize) {
    let mut taken = Vec::new();
    let mut used = 0usize;
    for (i, (key, s)) in order.iter().enumerate() {
        let tokens = s.pair.src_tokens();
        if used + tokens > budget {
            return (taken, i);
        }
        used += tokens;
        taken.push((*key, s.pair.clone()));
    }
    (taken, order.len())
}

/// On-disk record of one step's tasks, sufficient to audit membership.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskManifest {
    pub step: usize,
    pub tasks: Vec<TaskEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskEntry {
    pub task_id: u32,
    pub domain: String,
    pub support_ids: Vec<u32>,
    pub query_ids: Vec<u32>,
    pub mean_divergence: f64,
}

impl TaskManifest {
    pub fn from_tasks(step: usize, tasks: &[Task]) -> Self {
        TaskManifest {
            step,
            tasks: tasks
                .iter()
                .map(|t| TaskEntry {
                    task_id: t.task_id,
                    domain: t.domain.clone(),
                    support_ids: t.support.iter().map(|p| p.id).collect(),
                    query_ids: t.query.iter().map(|p| p.id).collect(),
                    mean_divergence: t.mean_divergence,
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
