//! Stochastic delay model: at every step machine `j` delivers its update with
//! probability `p_j`, independently of the past.
//!
//! The same machine sequence arises from independent exponential work clocks
//! with rates `lambda_j` (by memorylessness), which [`continuous_schedule`]
//! simulates directly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DelayError {
    #[error("delay model needs at least one machine")]
    Empty,
    #[error("rate for machine {index} must be positive and finite, got {value}")]
    NonPositiveRate { index: usize, value: f64 },
    #[error("machine {0} has no observed updates; its rate cannot be estimated")]
    ZeroCount(usize),
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
}

/// Machine-selection distribution `P = (p_1..p_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayModel {
    p: Vec<f64>,
    cumulative: Vec<f64>,
    p_min: f64,
    p_max: f64,
}

impl DelayModel {
    pub fn uniform(m: usize) -> Result<Self, DelayError> {
        if m == 0 {
            return Err(DelayError::Empty);
        }
        Ok(Self::build(vec![1.0 / m as f64; m]))
    }

    /// `p_j = lambda_j / sum(lambda)`.
    pub fn from_rates(rates: &[f64]) -> Result<Self, DelayError> {
        if rates.is_empty() {
            return Err(DelayError::Empty);
        }
        if let Some((index, &value)) = rates
            .iter()
            .enumerate()
            .find(|(_, r)| !(**r > 0.0 && r.is_finite()))
        {
            return Err(DelayError::NonPositiveRate { index, value });
        }
        // All-equal rates map to exactly 1/m so the uniform specialization is exact.
        if rates.iter().all(|r| *r == rates[0]) {
            return Self::uniform(rates.len());
        }
        let total: f64 = rates.iter().sum();
        Ok(Self::build(rates.iter().map(|r| r / total).collect()))
    }

    /// Accepts an explicit distribution; it must already sum to one within 1e-12.
    pub fn from_probabilities(p: &[f64]) -> Result<Self, DelayError> {
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DelayError::NotNormalized(total));
        }
        Self::from_rates(p)
    }

    fn build(p: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = p
            .iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        let p_min = p.iter().copied().fold(f64::INFINITY, f64::min);
        let p_max = p.iter().copied().fold(0.0, f64::max);
        DelayModel { p, cumulative, p_min, p_max }
    }

    pub fn m(&self) -> usize {
        self.p.len()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    pub fn p(&self, j: usize) -> f64 {
        self.p[j]
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    /// `p_min / p_j`, the weight of machine `j`'s step.
    pub fn ratio(&self, j: usize) -> f64 {
        if self.p_min == self.p[j] {
            1.0
        } else {
            self.p_min / self.p[j]
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.p_min == self.p_max
    }

    /// Inverse-CDF draw: the first machine whose cumulative probability
    /// exceeds a uniform `[0, 1)` variate.
    pub fn sample_machine<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let j = self.cumulative.partition_point(|c| *c <= u);
        j.min(self.p.len() - 1)
    }
}

/// Empirical `p_j = counts_j / sum(counts)`.
pub fn estimate_rates(counts: &[u64]) -> Result<DelayModel, DelayError> {
    if counts.is_empty() {
        return Err(DelayError::Empty);
    }
    if let Some(j) = counts.iter().position(|c| *c == 0) {
        return Err(DelayError::ZeroCount(j));
    }
    let rates: Vec<f64> = counts.iter().map(|c| *c as f64).collect();
    DelayModel::from_rates(&rates)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub machine: usize,
}

/// Time-ordered wake-ups of all machines over a horizon.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventSchedule {
    pub events: Vec<Event>,
}

impl EventSchedule {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn machines(&self) -> impl Iterator<Item = usize> + '_ {
        self.events.iter().map(|e| e.machine)
    }
}

struct Pending(Event);

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    // Min-heap on time, ties broken by machine index.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .time
            .total_cmp(&self.0.time)
            .then_with(|| other.0.machine.cmp(&self.0.machine))
    }
}

/// Simulates independent exponential work clocks with rates `lambda_j` until
/// `horizon` and returns the merged wake-up sequence.
pub fn continuous_schedule<R: Rng + ?Sized>(
    rates: &[f64],
    horizon: f64,
    rng: &mut R,
) -> Result<EventSchedule, DelayError> {
    if rates.is_empty() {
        return Err(DelayError::Empty);
    }
    let clocks = rates
        .iter()
        .enumerate()
        .map(|(index, &value)| Exp::new(value).map_err(|_| DelayError::NonPositiveRate { index, value }))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some((index, &value)) = rates.iter().enumerate().find(|(_, r)| r.is_nan() || **r <= 0.0) {
        return Err(DelayError::NonPositiveRate { index, value });
    }
    let mut heap: BinaryHeap<Pending> = clocks
        .iter()
        .enumerate()
        .map(|(machine, c)| Pending(Event { time: c.sample(rng), machine }))
        .collect();
    let mut events = Vec::new();
    while let Some(Pending(ev)) = heap.pop() {
        if ev.time > horizon {
            break;
        }
        events.push(ev);
        let next = ev.time + clocks[ev.machine].sample(rng);
        heap.push(Pending(Event { time: next, machine: ev.machine }));
    }
    Ok(EventSchedule { events })
}
