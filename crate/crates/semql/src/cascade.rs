//! Adaptive model cascade for AI_FILTER.
//!
//! A cheap proxy scores every row; an importance-weighted oracle sample
//! learns two thresholds bounding the region where the proxy cannot be
//! trusted; rows inside that region go to the oracle while budget lasts.
//! All randomness is seeded, so identical inputs give identical routing.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::models::ProviderError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Precision(f64),
    Recall(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// Hard cap on oracle calls across all phases.
    pub oracle_budget: u64,
    /// Share of budget spent on the initial sample.
    pub phase2_fraction: f64,
    pub target: Option<Target>,
    /// Failure probability for the threshold guarantees.
    pub delta: f64,
    pub min_sample: usize,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            oracle_budget: 0,
            phase2_fraction: 0.5,
            target: None,
            delta: 0.05,
            min_sample: 20,
            seed: 0,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err("delta must be in [0,1]".into());
        }
        if !(self.phase2_fraction > 0.0 && self.phase2_fraction <= 1.0) {
            return Err("phase2_fraction must be in (0,1]".into());
        }
        if let Some(Target::Precision(p) | Target::Recall(p)) = self.target {
            if !(0.0 < p && p < 1.0) {
                return Err("target must be in (0,1)".into());
            }
        }
        Ok(())
    }

    fn target_precision(&self) -> f64 {
        match self.target {
            Some(Target::Precision(p)) => p,
            _ => 0.9,
        }
    }

    /// Negative-predictive-value target for tau_low. A recall target
    /// tightens the reject side instead of the accept side.
    fn target_npv(&self) -> f64 {
        match self.target {
            Some(Target::Recall(r)) => r,
            _ => 0.9,
        }
    }
}

/// Output of Phase 1: proxy confidence folded into "probability the
/// predicate holds" — a proxy answering false with confidence c scores
/// 1 - c.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub row_id: u64,
    pub score: f64,
    pub proxy_decision: bool,
}

impl ScoredRow {
    pub fn from_proxy(row_id: u64, decision: bool, confidence: f64) -> ScoredRow {
        let score = if decision { confidence } else { 1.0 - confidence };
        ScoredRow {
            row_id,
            score: score.clamp(0.0, 1.0),
            proxy_decision: decision,
        }
    }

    /// Used when the proxy call failed: dead center of the uncertainty
    /// region so the oracle (or fallback) decides.
    pub fn errored(row_id: u64) -> ScoredRow {
        ScoredRow {
            row_id,
            score: 0.5,
            proxy_decision: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub score: f64,
    pub label: bool,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeState {
    pub tau_low: f64,
    pub tau_high: f64,
    pub samples: Vec<Sample>,
    pub oracle_calls_used: u64,
    pub batch_index: u64,
}

impl Default for CascadeState {
    fn default() -> Self {
        CascadeState {
            tau_low: 0.0,
            tau_high: 1.0,
            samples: Vec::new(),
            oracle_calls_used: 0,
            batch_index: 0,
        }
    }
}

impl CascadeState {
    pub fn remaining_budget(&self, config: &CascadeConfig) -> u64 {
        config.oracle_budget.saturating_sub(self.oracle_calls_used)
    }

    pub fn check_invariants(&self, config: &CascadeConfig) {
        assert!(0.0 <= self.tau_low && self.tau_low <= self.tau_high && self.tau_high <= 1.0);
        assert!(self.oracle_calls_used <= config.oracle_budget);
        assert!(self.samples.iter().all(|s| s.weight >= 1.0));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteSource {
    ProxyAccept,
    ProxyReject,
    Oracle,
    ProxyFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutedPrediction {
    pub row_id: u64,
    pub decision: bool,
    pub source: RouteSource,
}

/// Sampling mixture: 0.2 uniform floor plus 0.8 triangular peak at the
/// most uncertain score. The floor bounds importance weights.
fn mixture_weight(score: f64) -> f64 {
    let triangular = 1.0 - 2.0 * (score - 0.5).abs();
    0.2 + 0.8 * triangular.max(0.0)
}

/// Phase 2: weighted sampling without replacement; each sampled row is
/// labeled by the oracle and carries weight 1/pi (pi = approximate
/// inclusion probability, clamped to 1). Consumes min(slice, |rows|)
/// oracle calls, fewer only if oracle calls fail.
pub fn phase2_sample(
    rows: &[ScoredRow],
    budget_slice: u64,
    seed: u64,
    oracle: &mut dyn FnMut(u64) -> Result<bool, ProviderError>,
) -> (Vec<Sample>, u64) {
    let k = (budget_slice as usize).min(rows.len());
    if k == 0 {
        return (Vec::new(), 0);
    }
    let base: Vec<f64> = rows.iter().map(|r| mixture_weight(r.score)).collect();
    let total: f64 = base.iter().sum();

    // Efraimidis-Spirakis keys give a weighted without-replacement draw.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize)> = base
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / b, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut samples = Vec::new();
    let mut calls = 0u64;
    for &(_, i) in keyed.iter().take(k) {
        let row = &rows[i];
        calls += 1;
        let Ok(label) = oracle(row.row_id) else {
            continue;
        };
        let pi = (k as f64 * base[i] / total).min(1.0);
        samples.push(Sample {
            score: row.score,
            label,
            weight: (1.0 / pi).max(1.0),
        });
    }
    (samples, calls)
}

/// One-sided empirical-Bernstein radius for the weighted mean of values in
/// [0,1], with effective sample size n_eff = (sum w)^2 / sum w^2. Isolated
/// so an alternative bound (e.g. Hoeffding) is a drop-in replacement.
fn confidence_radius(values: &[(f64, f64)], delta: f64) -> f64 {
    let sum_w: f64 = values.iter().map(|(w, _)| w).sum();
    let sum_w2: f64 = values.iter().map(|(w, _)| w * w).sum();
    if sum_w <= 0.0 || sum_w2 <= 0.0 {
        return 1.0;
    }
    let n_eff = sum_w * sum_w / sum_w2;
    if n_eff <= 1.0 {
        return 1.0;
    }
    let mean = values.iter().map(|(w, v)| w * v).sum::<f64>() / sum_w;
    let variance = values
        .iter()
        .map(|(w, v)| w * (v - mean) * (v - mean))
        .sum::<f64>()
        / sum_w;
    let log_term = (2.0 / delta).ln();
    (2.0 * variance * log_term / n_eff).sqrt() + 7.0 * log_term / (3.0 * (n_eff - 1.0))
}

/// Phase 3: scan candidate thresholds over the observed score grid.
/// tau_high is the smallest threshold whose lower-bounded precision meets
/// the target; tau_low the largest whose lower-bounded NPV does.
pub fn phase3_learn_thresholds(samples: &[Sample], config: &CascadeConfig) -> (f64, f64) {
    if samples.len() < config.min_sample {
        return (0.0, 1.0);
    }
    let all_pos = samples.iter().all(|s| s.label);
    let all_neg = samples.iter().all(|s| !s.label);
    if all_pos {
        // Degenerate: nothing to reject, accept everything seen.
        let min_s = samples.iter().map(|s| s.score).fold(1.0, f64::min);
        return (0.0, min_s);
    }
    if all_neg {
        let max_s = samples.iter().map(|s| s.score).fold(0.0, f64::max);
        return (max_s, 1.0);
    }

    let mut grid: Vec<f64> = samples.iter().map(|s| s.score).collect();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let delta_side = config.delta / 2.0;

    let mut tau_high = 1.0;
    for &t in &grid {
        let accepted: Vec<(f64, f64)> = samples
            .iter()
            .filter(|s| s.score > t)
            .map(|s| (s.weight, if s.label { 1.0 } else { 0.0 }))
            .collect();
        if accepted.is_empty() {
            continue;
        }
        let sum_w: f64 = accepted.iter().map(|(w, _)| w).sum();
        let precision = accepted.iter().map(|(w, v)| w * v).sum::<f64>() / sum_w;
        if precision - confidence_radius(&accepted, delta_side) >= config.target_precision() {
            tau_high = t;
            break;
        }
    }

    let mut tau_low = 0.0;
    for &t in grid.iter().rev() {
        let rejected: Vec<(f64, f64)> = samples
            .iter()
            .filter(|s| s.score < t)
            .map(|s| (s.weight, if s.label { 0.0 } else { 1.0 }))
            .collect();
        if rejected.is_empty() {
            continue;
        }
        let sum_w: f64 = rejected.iter().map(|(w, _)| w).sum();
        let npv = rejected.iter().map(|(w, v)| w * v).sum::<f64>() / sum_w;
        if npv - confidence_radius(&rejected, delta_side) >= config.target_npv() {
            tau_low = t;
            break;
        }
    }

    if tau_low > tau_high {
        let mid = 0.5 * (tau_low + tau_high);
        (mid, mid)
    } else {
        (tau_low, tau_high)
    }
}

/// Phase 4: spend a slice of the remaining budget labeling rows inside the
/// current uncertainty region, then re-learn thresholds.
pub fn phase4_refine(
    state: &mut CascadeState,
    batch: &[ScoredRow],
    config: &CascadeConfig,
    oracle: &mut dyn FnMut(u64) -> Result<bool, ProviderError>,
) {
    state.batch_index += 1;
    let region: Vec<ScoredRow> = batch
        .iter()
        .filter(|r| r.score >= state.tau_low && r.score <= state.tau_high)
        .copied()
        .collect();
    let remaining = state.remaining_budget(config);
    if region.is_empty() || remaining == 0 {
        return;
    }
    let slice = ((remaining as f64 * config.phase2_fraction).ceil() as u64)
        .clamp(1, remaining);
    let seed = derive_seed(config.seed, state.batch_index);
    let (samples, calls) = phase2_sample(&region, slice, seed, oracle);
    state.oracle_calls_used += calls;
    state.samples.extend(samples);
    let (lo, hi) = phase3_learn_thresholds(&state.samples, config);
    state.tau_low = lo;
    state.tau_high = hi;
}

/// Deterministic per-batch / per-partition seed derivation.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

/// Routes one batch against a threshold snapshot. Oracle answers are
/// final; oracle failures fall back to the proxy decision and bump the
/// warning counter.
pub struct RouteOutcome {
    pub predictions: Vec<RoutedPrediction>,
    pub oracle_failures: u64,
}

pub fn route(
    rows: &[ScoredRow],
    state: &mut CascadeState,
    config: &CascadeConfig,
    oracle: &mut dyn FnMut(u64) -> Result<bool, ProviderError>,
) -> RouteOutcome {
    let mut predictions = Vec::with_capacity(rows.len());
    let mut oracle_failures = 0u64;
    for row in rows {
        let pred = if row.score > state.tau_high {
            RoutedPrediction {
                row_id: row.row_id,
                decision: true,
                source: RouteSource::ProxyAccept,
            }
        } else if row.score < state.tau_low {
            RoutedPrediction {
                row_id: row.row_id,
                decision: false,
                source: RouteSource::ProxyReject,
            }
        } else if state.remaining_budget(config) > 0 {
            state.oracle_calls_used += 1;
            match oracle(row.row_id) {
                Ok(decision) => RoutedPrediction {
                    row_id: row.row_id,
                    decision,
                    source: RouteSource::Oracle,
                },
                Err(_) => {
                    oracle_failures += 1;
                    RoutedPrediction {
                        row_id: row.row_id,
                        decision: row.proxy_decision,
                        source: RouteSource::ProxyFallback,
                    }
                }
            }
        } else {
            RoutedPrediction {
                row_id: row.row_id,
                decision: row.proxy_decision,
                source: RouteSource::ProxyFallback,
            }
        };
        predictions.push(pred);
    }
    RouteOutcome {
        predictions,
        oracle_failures,
    }
}

/// Merges partition-local states: samples concatenate (canonically
/// sorted), budgets sum, thresholds are recomputed. Commutative and
/// associative because recomputation is deterministic on the sorted list.
pub fn merge_states(
    a: &CascadeState,
    b: &CascadeState,
    config: &CascadeConfig,
) -> CascadeState {
    let mut samples: Vec<Sample> = a.samples.iter().chain(&b.samples).copied().collect();
    samples.sort_by(|x, y| {
        x.score
            .partial_cmp(&y.score)
            .unwrap()
            .then(x.label.cmp(&y.label))
            .then(x.weight.partial_cmp(&y.weight).unwrap())
    });
    let (tau_low, tau_high) = phase3_learn_thresholds(&samples, config);
    CascadeState {
        tau_low,
        tau_high,
        samples,
        oracle_calls_used: a.oracle_calls_used + b.oracle_calls_used,
        batch_index: a.batch_index.max(b.batch_index),
    }
}

/// True labels keyed by row id; the test/bench oracle closure.
pub fn map_oracle(
    truth: &BTreeMap<u64, bool>,
) -> impl FnMut(u64) -> Result<bool, ProviderError> + '_ {
    move |id| {
        truth
            .get(&id)
            .copied()
            .ok_or_else(|| ProviderError::fatal(format!("no truth for row {id}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(budget: u64) -> CascadeConfig {
        CascadeConfig {
            oracle_budget: budget,
            seed: 42,
            ..CascadeConfig::default()
        }
    }

    #[test]
    fn score_convention_inverts_negative_confidence() {
        let row = ScoredRow::from_proxy(1, false, 0.8);
        assert!((row.score - 0.2).abs() < 1e-12);
        let row = ScoredRow::from_proxy(2, true, 0.8);
        assert!((row.score - 0.8).abs() < 1e-12);
    }

    #[test]
    fn phase2_zero_slice_is_free() {
        let rows: Vec<ScoredRow> = (0..10)
            .map(|i| ScoredRow::from_proxy(i, true, 0.9))
            .collect();
        let mut oracle = |_id: u64| -> Result<bool, ProviderError> { panic!("no calls expected") };
        let (samples, calls) = phase2_sample(&rows, 0, 1, &mut oracle);
        assert!(samples.is_empty());
        assert_eq!(calls, 0);
    }

    #[test]
    fn phase2_uniform_scores_give_equal_weights() {
        let rows: Vec<ScoredRow> = (0..40)
            .map(|i| ScoredRow {
                row_id: i,
                score: 0.5,
                proxy_decision: true,
            })
            .collect();
        let mut oracle = |_id: u64| Ok(true);
        let (samples, calls) = phase2_sample(&rows, 10, 7, &mut oracle);
        assert_eq!(calls, 10);
        let w0 = samples[0].weight;
        assert!(samples.iter().all(|s| (s.weight - w0).abs() < 1e-9));
        assert!(w0 >= 1.0);
    }

    #[test]
    fn phase2_prefers_uncertain_scores() {
        // 50 confident-negative rows vs 50 maximally uncertain rows.
        let mut rows = Vec::new();
        for i in 0..50 {
            rows.push(ScoredRow {
                row_id: i,
                score: 0.05,
                proxy_decision: false,
            });
        }
        for i in 50..100 {
            rows.push(ScoredRow {
                row_id: i,
                score: 0.5,
                proxy_decision: true,
            });
        }
        let mut from_low = 0u64;
        let mut from_mid = 0u64;
        for seed in 0..1000 {
            let mut oracle = |_id: u64| Ok(true);
            let (samples, _) = phase2_sample(&rows, 20, seed, &mut oracle);
            // Recover group membership from the score.
            for s in samples {
                if s.score < 0.1 {
                    from_low += 1;
                } else {
                    from_mid += 1;
                }
            }
        }
        assert!(
            from_mid > from_low,
            "uncertain group sampled {from_mid} vs {from_low}"
        );
    }

    #[test]
    fn phase2_determinism() {
        let rows: Vec<ScoredRow> = (0..30)
            .map(|i| ScoredRow::from_proxy(i, i % 2 == 0, 0.6 + (i % 4) as f64 * 0.1))
            .collect();
        let run = || {
            let mut oracle = |id: u64| Ok(id % 3 == 0);
            phase2_sample(&rows, 12, 99, &mut oracle)
        };
        assert_eq!(run().0, run().0);
    }

    #[test]
    fn phase3_small_sample_guard() {
        let samples: Vec<Sample> = (0..5)
            .map(|i| Sample {
                score: i as f64 / 5.0,
                label: i % 2 == 0,
                weight: 1.0,
            })
            .collect();
        assert_eq!(phase3_learn_thresholds(&samples, &config(10)), (0.0, 1.0));
    }

    #[test]
    fn phase3_degenerate_all_positive() {
        let samples: Vec<Sample> = (0..30)
            .map(|i| Sample {
                score: 0.3 + (i as f64) * 0.02,
                label: true,
                weight: 1.0,
            })
            .collect();
        let (lo, hi) = phase3_learn_thresholds(&samples, &config(10));
        assert_eq!(lo, 0.0);
        assert!((hi - 0.3).abs() < 1e-12);
    }

    #[test]
    fn phase3_degenerate_all_negative() {
        let samples: Vec<Sample> = (0..30)
            .map(|i| Sample {
                score: 0.1 + (i as f64) * 0.01,
                label: false,
                weight: 1.0,
            })
            .collect();
        let (lo, hi) = phase3_learn_thresholds(&samples, &config(10));
        assert!((lo - 0.39).abs() < 1e-9);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn phase3_separated_sample_shrinks_region() {
        // 200 clear positives near 0.9 and 200 clear negatives near 0.1.
        // (At 100 per side the Bernstein second-order term alone is ~0.10,
        // leaving the precision lower bound just under the 0.9 target.)
        let mut samples = Vec::new();
        for i in 0..200 {
            samples.push(Sample {
                score: 0.9 + (i % 10) as f64 * 0.005,
                label: true,
                weight: 1.0,
            });
            samples.push(Sample {
                score: 0.05 + (i % 10) as f64 * 0.005,
                label: false,
                weight: 1.0,
            });
        }
        let (lo, hi) = phase3_learn_thresholds(&samples, &config(10));
        assert!(lo > 0.04, "tau_low {lo}");
        assert!(hi < 0.95, "tau_high {hi}");
        assert!(lo <= hi);
    }

    #[test]
    fn phase3_random_labels_keep_wide_region() {
        // Labels independent of score: no threshold should certify 0.9
        // precision/NPV, so the uncertainty region stays wide.
        let mut wide = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<Sample> = (0..200)
                .map(|_| Sample {
                    score: rng.gen_range(0.0..1.0),
                    label: rng.gen_bool(0.5),
                    weight: 1.0,
                })
                .collect();
            let (lo, hi) = phase3_learn_thresholds(&samples, &config(10));
            let covered = samples
                .iter()
                .filter(|s| s.score >= lo && s.score <= hi)
                .count();
            if covered as f64 >= 0.9 * samples.len() as f64 {
                wide += 1;
            }
        }
        assert!(wide >= 18, "region wide in only {wide}/20 seeds");
    }

    #[test]
    fn route_follows_threshold_rules() {
        let cfg = config(5);
        let mut state = CascadeState {
            tau_low: 0.2,
            tau_high: 0.8,
            ..CascadeState::default()
        };
        let rows = [
            ScoredRow {
                row_id: 1,
                score: 0.95,
                proxy_decision: true,
            },
            ScoredRow {
                row_id: 2,
                score: 0.05,
                proxy_decision: false,
            },
            ScoredRow {
                row_id: 3,
                score: 0.5,
                proxy_decision: true,
            },
        ];
        let mut oracle = |id: u64| Ok(id == 3);
        let out = route(&rows, &mut state, &cfg, &mut oracle);
        assert_eq!(out.predictions[0].source, RouteSource::ProxyAccept);
        assert!(out.predictions[0].decision);
        assert_eq!(out.predictions[1].source, RouteSource::ProxyReject);
        assert_eq!(out.predictions[2].source, RouteSource::Oracle);
        assert!(out.predictions[2].decision);
        assert_eq!(state.oracle_calls_used, 1);
        state.check_invariants(&cfg);
    }

    #[test]
    fn route_budget_exhausted_falls_back_to_proxy() {
        let cfg = config(0);
        let mut state = CascadeState {
            tau_low: 0.2,
            tau_high: 0.8,
            ..CascadeState::default()
        };
        let rows = [ScoredRow {
            row_id: 1,
            score: 0.5,
            proxy_decision: true,
        }];
        let mut oracle = |_id: u64| -> Result<bool, ProviderError> { panic!("budget is 0") };
        let out = route(&rows, &mut state, &cfg, &mut oracle);
        assert_eq!(out.predictions[0].source, RouteSource::ProxyFallback);
        assert!(out.predictions[0].decision);
    }

    #[test]
    fn route_oracle_failure_counts_warning() {
        let cfg = config(5);
        let mut state = CascadeState {
            tau_low: 0.4,
            tau_high: 0.6,
            ..CascadeState::default()
        };
        let rows = [ScoredRow {
            row_id: 7,
            score: 0.5,
            proxy_decision: false,
        }];
        let mut oracle = |_id: u64| Err(ProviderError::transient("down"));
        let out = route(&rows, &mut state, &cfg, &mut oracle);
        assert_eq!(out.oracle_failures, 1);
        assert_eq!(out.predictions[0].source, RouteSource::ProxyFallback);
        assert!(!out.predictions[0].decision);
    }

    #[test]
    fn wide_thresholds_with_full_budget_reproduce_oracle() {
        let cfg = config(100);
        let mut state = CascadeState::default(); // (0, 1): everything routed
        let truth: BTreeMap<u64, bool> = (0..100).map(|i| (i, i % 3 == 0)).collect();
        let rows: Vec<ScoredRow> = (0..100)
            .map(|i| ScoredRow::from_proxy(i, i % 2 == 0, 0.7))
            .collect();
        let mut oracle = map_oracle(&truth);
        let out = route(&rows, &mut state, &cfg, &mut oracle);
        for p in &out.predictions {
            assert_eq!(p.source, RouteSource::Oracle);
            assert_eq!(p.decision, truth[&p.row_id]);
        }
        assert_eq!(state.oracle_calls_used, 100);
    }

    #[test]
    fn phase4_empty_region_is_a_noop() {
        let cfg = config(50);
        let mut state = CascadeState {
            tau_low: 0.4,
            tau_high: 0.4,
            ..CascadeState::default()
        };
        let batch = [ScoredRow {
            row_id: 1,
            score: 0.9,
            proxy_decision: true,
        }];
        let before_calls = state.oracle_calls_used;
        let mut oracle = |_id: u64| -> Result<bool, ProviderError> { panic!("empty region") };
        phase4_refine(&mut state, &batch, &cfg, &mut oracle);
        assert_eq!(state.oracle_calls_used, before_calls);
    }

    #[test]
    fn phase4_respects_budget() {
        let cfg = config(10);
        let mut state = CascadeState::default();
        let mut truth = BTreeMap::new();
        for i in 0..500u64 {
            truth.insert(i, i % 2 == 0);
        }
        for b in 0..5 {
            let batch: Vec<ScoredRow> = (b * 100..(b + 1) * 100)
                .map(|i| ScoredRow::from_proxy(i, i % 2 == 0, 0.55))
                .collect();
            let mut oracle = map_oracle(&truth);
            phase4_refine(&mut state, &batch, &cfg, &mut oracle);
            state.check_invariants(&cfg);
        }
        assert!(state.oracle_calls_used <= 10);
    }

    #[test]
    fn merge_is_commutative_and_identity_on_empty() {
        let cfg = config(10);
        let mk = |offset: u64| {
            let mut s = CascadeState::default();
            for i in 0..30u64 {
                s.samples.push(Sample {
                    score: ((i + offset) % 30) as f64 / 30.0,
                    label: (i + offset) % 2 == 0,
                    weight: 1.0 + (i % 3) as f64,
                });
            }
            s.oracle_calls_used = 3;
            s
        };
        let a = mk(0);
        let b = mk(7);
        let ab = merge_states(&a, &b, &cfg);
        let ba = merge_states(&b, &a, &cfg);
        assert_eq!(ab, ba);
        let empty = CascadeState::default();
        let ae = merge_states(&a, &empty, &cfg);
        assert_eq!(ae.samples.len(), a.samples.len());
        assert_eq!(ae.oracle_calls_used, a.oracle_calls_used);
    }

    #[test]
    fn merge_is_associative() {
        let cfg = config(10);
        let mk = |offset: u64| {
            let mut s = CascadeState::default();
            for i in 0..15u64 {
                s.samples.push(Sample {
                    score: ((i * 7 + offset) % 29) as f64 / 29.0,
                    label: (i + offset) % 3 == 0,
                    weight: 1.0 + (i % 4) as f64 * 0.5,
                });
            }
            s
        };
        let (a, b, c) = (mk(1), mk(2), mk(3));
        let left = merge_states(&merge_states(&a, &b, &cfg), &c, &cfg);
        let right = merge_states(&a, &merge_states(&b, &c, &cfg), &cfg);
        assert_eq!(left, right);
    }

    #[test]
    fn calibrated_proxy_meets_precision_target() {
        // Calibrated scores (P(label | score s) = s) with a realistic
        // bimodal proxy: most rows land near 0.03 or 0.97, a 20% slice is
        // genuinely uncertain. With enough budget for the bound to bite,
        // precision over ProxyAccept rows must reach the default 0.9
        // target (minus slack) in nearly all seeded runs, and certified
        // accept regions must actually appear.
        let mut ok = 0;
        let mut certified_runs = 0;
        let runs = 100;
        for seed in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5000u64;
            let mut rows = Vec::new();
            let mut truth = BTreeMap::new();
            for i in 0..n {
                let bucket: f64 = rng.gen_range(0.0..1.0);
                let s: f64 = if bucket < 0.4 {
                    rng.gen_range(0.95..0.99)
                } else if bucket < 0.8 {
                    rng.gen_range(0.01..0.05)
                } else {
                    rng.gen_range(0.05..0.95)
                };
                let label = rng.gen_bool(s);
                truth.insert(i, label);
                rows.push(ScoredRow {
                    row_id: i,
                    score: s,
                    proxy_decision: s >= 0.5,
                });
            }
            let cfg = CascadeConfig {
                oracle_budget: n / 2,
                seed,
                ..CascadeConfig::default()
            };
            let mut state = CascadeState::default();
            let mut oracle = map_oracle(&truth);
            let (samples, calls) = phase2_sample(
                &rows,
                (cfg.oracle_budget as f64 * cfg.phase2_fraction) as u64,
                derive_seed(seed, 0),
                &mut oracle,
            );
            state.samples = samples;
            state.oracle_calls_used = calls;
            let (lo, hi) = phase3_learn_thresholds(&state.samples, &cfg);
            state.tau_low = lo;
            state.tau_high = hi;
            if hi < 1.0 {
                certified_runs += 1;
            }
            let mut oracle = map_oracle(&truth);
            let out = route(&rows, &mut state, &cfg, &mut oracle);
            let proxy_accepts: Vec<_> = out
                .predictions
                .iter()
                .filter(|p| p.source == RouteSource::ProxyAccept)
                .collect();
            let correct = proxy_accepts.iter().filter(|p| truth[&p.row_id]).count();
            if proxy_accepts.is_empty()
                || correct as f64 / proxy_accepts.len() as f64 >= 0.9 - 0.05
            {
                ok += 1;
            }
            state.check_invariants(&cfg);
        }
        assert!(
            certified_runs as f64 >= 0.9 * runs as f64,
            "accept region certified in only {certified_runs}/{runs} runs"
        );
        assert!(
            ok as f64 >= 0.95 * runs as f64,
            "precision target met in only {ok}/{runs} runs"
        );
    }

    #[test]
    fn partition_invariance_of_merged_thresholds() {
        // 4 partitions sampled with per-partition seeds, merged, vs the
        // same partition samples concatenated sequentially: thresholds
        // must agree exactly.
        let truth: BTreeMap<u64, bool> = (0..400).map(|i| (i, i % 5 != 0)).collect();
        let rows: Vec<ScoredRow> = (0..400)
            .map(|i| ScoredRow::from_proxy(i, i % 5 != 0, 0.6 + (i % 4) as f64 * 0.1))
            .collect();
        let cfg = config(80);
        let partition_samples: Vec<Vec<Sample>> = (0..4)
            .map(|p| {
                let part: Vec<ScoredRow> =
                    rows.iter().skip(p).step_by(4).copied().collect();
                let mut oracle = map_oracle(&truth);
                phase2_sample(&part, 20, derive_seed(cfg.seed, p as u64), &mut oracle).0
            })
            .collect();

        let merged = partition_samples
            .iter()
            .fold(CascadeState::default(), |acc, s| {
                let mut other = CascadeState::default();
                other.samples = s.clone();
                merge_states(&acc, &other, &cfg)
            });

        let mut sequential: Vec<Sample> =
            partition_samples.into_iter().flatten().collect();
        sequential.sort_by(|x, y| {
            x.score
                .partial_cmp(&y.score)
                .unwrap()
                .then(x.label.cmp(&y.label))
                .then(x.weight.partial_cmp(&y.weight).unwrap())
        });
        let (lo, hi) = phase3_learn_thresholds(&sequential, &cfg);
        assert_eq!((merged.tau_low, merged.tau_high), (lo, hi));
    }
}
