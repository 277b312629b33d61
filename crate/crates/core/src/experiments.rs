//! Monte-Carlo checks of the small-noise, tail, stationary-coupling and
//! time-average estimates.
//!
//! Every estimator drives its members with a shared Brownian path per
//! replica. Replicas run in parallel; results are collected in replica order
//! and reduced with pairwise summation, so reports do not depend on the
//! number of threads.

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::ionic::{check_coefficient_condition, IonicModel};
use crate::noise::NoiseSpectrum;
use crate::operator::BidomainOperator;
use crate::sim::{simulate_coupled_replica, SimConfig, State};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McConfig {
    pub replicas: usize,
    pub seed: u64,
    /// Half-width of the confidence interval in standard errors.
    pub confidence: f64,
}

impl McConfig {
    pub fn new(replicas: usize, seed: u64) -> Self {
        McConfig { replicas, seed, confidence: 4.0 }
    }

    fn check(&self) -> Result<()> {
        if self.replicas < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: self.replicas });
        }
        if !(self.confidence > 0.0) {
            return Err(Error::invalid("confidence multiplier must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

/// Pairwise (cascade) summation; fixed association for a given length.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Sample mean and standard error `sd/√M` (unbiased variance).
pub fn mc_estimate(samples: &[f64]) -> Result<Estimate> {
    let m = samples.len();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    let mean = pairwise_sum(samples) / m as f64;
    let dev: Vec<f64> = samples.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (m - 1) as f64;
    Ok(Estimate { mean, se: (var / m as f64).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "within_bound")]
    WithinBound,
    #[serde(rename = "violated_beyond_CI")]
    ViolatedBeyondCi,
    #[serde(rename = "inconclusive")]
    Inconclusive,
}

impl Verdict {
    /// Within unless `estimate − z·se > bound`.
    pub fn compare(estimate: f64, se: f64, bound: f64, z: f64) -> Verdict {
        if estimate - z * se > bound {
            Verdict::ViolatedBeyondCi
        } else {
            Verdict::WithinBound
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Quantity {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
}

impl Quantity {
    fn new(name: impl Into<String>, e: Estimate, bound: Option<f64>) -> Self {
        Quantity { name: name.into(), estimate: e.mean, se: e.se, bound }
    }
}

/// Per-replica statistics, one row per included replica.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReplicaTable {
    pub columns: Vec<String>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl ReplicaTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("replica");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (r, vals) in &self.rows {
            s.push_str(&r.to_string());
            for v in vals {
                s.push(',');
                s.push_str(&v.to_string());
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub inputs: serde_json::Value,
    /// Headline quantity compared against `bound`.
    pub estimate: f64,
    pub se: f64,
    pub bound: f64,
    pub verdict: Verdict,
    pub quantities: Vec<Quantity>,
    pub replicas: usize,
    pub excluded_replicas: usize,
    pub diagnostics: Vec<String>,
    #[serde(skip)]
    pub per_replica: ReplicaTable,
}

/// Everything a trajectory needs besides noise amplitudes and seeds.
#[derive(Debug, Clone, Copy)]
pub struct SimInputs<'a> {
    pub op: &'a BidomainOperator,
    pub model: &'a IonicModel,
    pub spectrum: &'a NoiseSpectrum,
    pub config: &'a SimConfig,
    pub initial: &'a State,
}

impl SimInputs<'_> {
    fn echo(&self) -> serde_json::Value {
        json!({
            "nodes": self.op.len(),
            "dimension": self.op.grid().dimension(),
            "model": self.model.name(),
            "noise_modes": self.spectrum.modes(),
            "noise_trace": self.spectrum.trace(),
            "dt": self.config.dt,
            "t_final": self.config.t_final,
            "scheme": self.config.scheme,
        })
    }
}

/// Maximum tolerated share of blown-up replicas.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.05;

/// Runs `f` for every replica id. Blow-ups are dropped and counted; any
/// other error aborts.
fn run_replicas<T: Send>(mc: &McConfig, f: impl Fn(u64) -> Result<T> + Sync) -> Result<(Vec<(u64, T)>, usize)> {
    let results: Vec<Result<T>> = (0..mc.replicas as u64).into_par_iter().map(&f).collect();
    let mut kept = Vec::with_capacity(results.len());
    let mut excluded = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(v) => kept.push((r as u64, v)),
            Err(Error::BlowUp { .. }) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((kept, excluded))
}

fn too_many_excluded(mc: &McConfig, excluded: usize) -> bool {
    excluded as f64 > MAX_EXCLUDED_FRACTION * mc.replicas as f64
}

/// Deviation config: ledger (and therefore the sup) sampled every step.
fn every_step(cfg: &SimConfig) -> SimConfig {
    let mut c = cfg.clone();
    c.record_every = 1;
    c.keep_states = false;
    c
}

fn column(rows: &[(u64, Vec<f64>)], j: usize) -> Vec<f64> {
    rows.iter().map(|(_, v)| v[j]).collect()
}

fn finish_inconclusive(
    name: &str,
    inputs: serde_json::Value,
    mc: &McConfig,
    bound: f64,
    diagnostics: Vec<String>,
) -> ExperimentReport {
    ExperimentReport {
        experiment: name.to_string(),
        inputs,
        estimate: f64::NAN,
        se: f64::NAN,
        bound,
        verdict: Verdict::Inconclusive,
        quantities: Vec::new(),
        replicas: mc.replicas,
        excluded_replicas: 0,
        diagnostics,
        per_replica: ReplicaTable::default(),
    }
}

/// Summary of the ε-ladder beyond the report itself.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderPoint {
    pub epsilon: f64,
    pub deviation: Estimate,
    pub ratio: Estimate,
}

/// `D(ε) = E sup_t (‖u_ε − u‖²_H + ‖w_ε − w‖²_H)` on a ladder of `ε`.
///
/// The headline quantity is the paired growth of `D(ε)/ε` from the largest
/// to the smallest positive `ε`; a linear bound `D ≤ Cε` forbids it from
/// being positive beyond the CI. `Ĉ = max D(ε)/ε`, the max/min spread of the
/// ratios, and whether `D` decreases strictly along the ladder are reported
/// as extra quantities and diagnostics.
pub fn small_noise_deviation(epsilons: &[f64], inputs: SimInputs<'_>, mc: &McConfig) -> Result<ExperimentReport> {
    mc.check()?;
    if epsilons.is_empty() {
        return Err(Error::invalid("need at least one epsilon"));
    }
    let mut ladder: Vec<f64> = epsilons.to_vec();
    ladder.sort_by(|a, b| b.total_cmp(a));
    let mut members = vec![0.0];
    members.extend(&ladder);
    let cfg = every_step(inputs.config);

    let (rows, excluded) = run_replicas(mc, |r| {
        let rec = simulate_coupled_replica(
            inputs.initial,
            &cfg,
            inputs.op,
            inputs.model,
            inputs.spectrum,
            &members,
            mc.seed,
            r,
        )?;
        Ok((1..members.len()).map(|j| rec.sup_difference(j)).collect::<Vec<f64>>())
    })?;

    let echo = json!({
        "sim": inputs.echo(),
        "epsilons": ladder,
        "replicas": mc.replicas,
        "seed": mc.seed,
        "confidence": mc.confidence,
    });
    if rows.len() < 2 {
        return Ok(finish_inconclusive(
            "small_noise",
            echo,
            mc,
            0.0,
            vec![format!("{excluded} of {} replicas blew up", mc.replicas)],
        ));
    }

    let z = mc.confidence;
    let mut quantities = Vec::new();
    let mut points = Vec::new();
    for (j, &eps) in ladder.iter().enumerate() {
        let d = mc_estimate(&column(&rows, j))?;
        quantities.push(Quantity::new(format!("D(eps={eps})"), d, None));
        if eps > 0.0 {
            let ratio = Estimate { mean: d.mean / eps, se: d.se / eps };
            quantities.push(Quantity::new(format!("D/eps(eps={eps})"), ratio, None));
            points.push(LadderPoint { epsilon: eps, deviation: d, ratio });
        }
    }
    let mut diagnostics = Vec::new();
    let (estimate, se, verdict) = if points.len() >= 2 {
        let big = ladder.iter().position(|&e| e == points[0].epsilon).unwrap();
        let small = ladder.iter().position(|&e| e == points[points.len() - 1].epsilon).unwrap();
        let growth: Vec<f64> = rows
            .iter()
            .map(|(_, v)| v[small] / ladder[small] - v[big] / ladder[big])
            .collect();
        let g = mc_estimate(&growth)?;
        quantities.push(Quantity::new("ratio_growth", g, Some(0.0)));
        (g.mean, g.se, Verdict::compare(g.mean, g.se, 0.0, z))
    } else {
        diagnostics.push("fewer than two positive epsilons: nothing to compare".into());
        (f64::NAN, f64::NAN, Verdict::Inconclusive)
    };

    if !points.is_empty() {
        let c_hat = points.iter().map(|p| p.ratio.mean).fold(f64::NEG_INFINITY, f64::max);
        let hi = points.iter().max_by(|a, b| a.ratio.mean.total_cmp(&b.ratio.mean)).unwrap();
        let lo = points.iter().min_by(|a, b| a.ratio.mean.total_cmp(&b.ratio.mean)).unwrap();
        let spread = hi.ratio.mean / lo.ratio.mean;
        // most favourable spread inside the CIs
        let spread_lo = (hi.ratio.mean - z * hi.ratio.se) / (lo.ratio.mean + z * lo.ratio.se);
        quantities.push(Quantity { name: "C_hat".into(), estimate: c_hat, se: hi.ratio.se, bound: None });
        quantities.push(Quantity { name: "ratio_max_min".into(), estimate: spread, se: f64::NAN, bound: Some(3.0) });
        quantities.push(Quantity {
            name: "ratio_max_min_ci_low".into(),
            estimate: spread_lo,
            se: f64::NAN,
            bound: Some(3.0),
        });
        let strictly = points.windows(2).all(|w| {
            let (a, b) = (w[0].deviation, w[1].deviation);
            a.mean - b.mean > z * (a.se * a.se + b.se * b.se).sqrt()
        });
        diagnostics.push(format!("D strictly decreasing along the ladder beyond CI: {strictly}"));
    }
    if too_many_excluded(mc, excluded) {
        diagnostics.push(format!("{excluded} of {} replicas blew up", mc.replicas));
    }
    let verdict = if too_many_excluded(mc, excluded) { Verdict::Inconclusive } else { verdict };

    let columns = ladder.iter().map(|e| format!("sup_dev_eps_{e}")).collect();
    Ok(ExperimentReport {
        experiment: "small_noise".into(),
        inputs: echo,
        estimate,
        se,
        bound: 0.0,
        verdict,
        quantities,
        replicas: mc.replicas,
        excluded_replicas: excluded,
        diagnostics,
        per_replica: ReplicaTable { columns, rows },
    })
}

/// `3·exp(−r²/(4γε²T))`.
pub fn tail_bound(r: f64, epsilon: f64, gamma: f64, t: f64) -> f64 {
    3.0 * (-(r * r) / (4.0 * gamma * epsilon * epsilon * t)).exp()
}

/// Range where the tail comparison is informative.
pub const TAIL_BOUND_RANGE: (f64, f64) = (0.02, 0.9);

/// Empirical `P{sup_t(‖u_ε−u‖² + ‖w_ε−w‖²) ≥ r²}` against the tail bound.
pub fn tail_probability(r: f64, epsilon: f64, inputs: SimInputs<'_>, mc: &McConfig) -> Result<ExperimentReport> {
    mc.check()?;
    if !(r > 0.0 && epsilon > 0.0) {
        return Err(Error::invalid(format!("need r > 0 and epsilon > 0, got {r}, {epsilon}")));
    }
    let gamma = inputs.spectrum.trace();
    let t = inputs.config.steps() as f64 * inputs.config.dt;
    let bound = tail_bound(r, epsilon, gamma, t);
    let echo = json!({
        "sim": inputs.echo(),
        "r": r,
        "epsilon": epsilon,
        "gamma": gamma,
        "T": t,
        "replicas": mc.replicas,
        "seed": mc.seed,
        "confidence": mc.confidence,
    });
    let mut diagnostics = Vec::new();
    if !(bound > TAIL_BOUND_RANGE.0 && bound < TAIL_BOUND_RANGE.1) {
        diagnostics.push(format!(
            "bound {bound:.4} outside ({}, {}): comparison would be uninformative",
            TAIL_BOUND_RANGE.0, TAIL_BOUND_RANGE.1
        ));
    }
    let c = inputs.op.constants();
    let condition = check_coefficient_condition(inputs.model, c.alpha, c.poincare_cp)?;
    if !condition.satisfied {
        diagnostics.push(format!(
            "coefficient condition fails (margin {:.4e}); the bound is not claimed",
            condition.margin
        ));
    }
    if !diagnostics.is_empty() {
        return Ok(finish_inconclusive("tail", echo, mc, bound, diagnostics));
    }

    let cfg = every_step(inputs.config);
    let members = [0.0, epsilon];
    let r2 = r * r;
    let (rows, excluded) = run_replicas(mc, |rep| {
        let rec = simulate_coupled_replica(
            inputs.initial,
            &cfg,
            inputs.op,
            inputs.model,
            inputs.spectrum,
            &members,
            mc.seed,
            rep,
        )?;
        let sup = rec.sup_difference(1);
        Ok(vec![sup, if sup >= r2 { 1.0 } else { 0.0 }])
    })?;
    let hits = column(&rows, 1);
    let m = hits.len() as f64;
    let p = pairwise_sum(&hits) / m.max(1.0);
    let se = (p * (1.0 - p) / m.max(1.0)).sqrt();
    let mut verdict = Verdict::compare(p, se, bound, mc.confidence);
    if too_many_excluded(mc, excluded) || rows.is_empty() {
        diagnostics.push(format!("{excluded} of {} replicas blew up", mc.replicas));
        verdict = Verdict::Inconclusive;
    }
    let sup = mc_estimate(&column(&rows, 0)).ok();
    let mut quantities = vec![Quantity { name: "frequency".into(), estimate: p, se, bound: Some(bound) }];
    if let Some(s) = sup {
        quantities.push(Quantity::new("mean_sup_deviation", s, Some(r2)));
    }
    Ok(ExperimentReport {
        experiment: "tail".into(),
        inputs: echo,
        estimate: p,
        se,
        bound,
        verdict,
        quantities,
        replicas: mc.replicas,
        excluded_replicas: excluded,
        diagnostics,
        per_replica: ReplicaTable { columns: vec!["sup_deviation".into(), "exceeds".into()], rows },
    })
}

/// Trapezoidal time-average of `values` over `times ∈ [a, b]`.
fn window_average(times: &[f64], values: &[f64], a: f64, b: f64) -> f64 {
    let tol = 1e-9 * b.abs().max(1.0);
    let mut acc = 0.0;
    let mut span = 0.0;
    for i in 1..times.len() {
        let (t0, t1) = (times[i - 1], times[i]);
        if t0 >= a - tol && t1 <= b + tol {
            acc += 0.5 * (values[i - 1] + values[i]) * (t1 - t0);
            span += t1 - t0;
        }
    }
    if span > 0.0 {
        acc / span
    } else {
        f64::NAN
    }
}

/// Settings of the stationary coupling run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationarySettings {
    pub eps1: f64,
    pub eps2: f64,
    pub burn_in: f64,
    pub horizon: f64,
    /// User assertion that the uniqueness hypotheses for the stationary
    /// solution hold; they are not re-derived here.
    pub stationarity_hypotheses: bool,
}

/// Long-run mean of `‖u_{ε₁} − u_{ε₂}‖² + ‖w_{ε₁} − w_{ε₂}‖²` against
/// `(ε₁ − ε₂)²γ`.
///
/// Each replica runs to `2B + H` and averages over `[B, B+H]`; the average
/// over `[2B, 2B+H]` checks the burn-in: the paired change must stay within
/// one standard error of the estimate or within the CI of the change itself.
pub fn stationary_coupling(s: StationarySettings, inputs: SimInputs<'_>, mc: &McConfig) -> Result<ExperimentReport> {
    mc.check()?;
    if !(s.eps1 >= 0.0 && s.eps2 >= 0.0 && s.burn_in >= 0.0 && s.horizon > 0.0) {
        return Err(Error::invalid(format!("invalid stationary settings {s:?}")));
    }
    let gamma = inputs.spectrum.trace();
    let bound = (s.eps1 - s.eps2).powi(2) * gamma;
    let echo = json!({
        "sim": inputs.echo(),
        "eps1": s.eps1,
        "eps2": s.eps2,
        "burn_in": s.burn_in,
        "horizon": s.horizon,
        "stationarity_hypotheses": s.stationarity_hypotheses,
        "gamma": gamma,
        "replicas": mc.replicas,
        "seed": mc.seed,
        "confidence": mc.confidence,
    });
    let mut diagnostics = Vec::new();
    if !inputs.config.source.is_time_independent() {
        diagnostics.push("source must be time-independent for a stationary solution".into());
    }
    if !s.stationarity_hypotheses {
        diagnostics.push("stationarity_hypotheses not asserted".into());
    }
    if !diagnostics.is_empty() {
        return Ok(finish_inconclusive("stationary", echo, mc, bound, diagnostics));
    }

    let mut cfg = inputs.config.clone();
    cfg.t_final = 2.0 * s.burn_in + s.horizon;
    cfg.keep_states = false;
    let members = [s.eps1, s.eps2];
    let (rows, excluded) = run_replicas(mc, |r| {
        let rec = simulate_coupled_replica(
            inputs.initial,
            &cfg,
            inputs.op,
            inputs.model,
            inputs.spectrum,
            &members,
            mc.seed,
            r,
        )?;
        let d = &rec.differences[1];
        let a1 = window_average(&rec.times, d, s.burn_in, s.burn_in + s.horizon);
        let a2 = window_average(&rec.times, d, 2.0 * s.burn_in, 2.0 * s.burn_in + s.horizon);
        Ok(vec![a1, a2, a2 - a1])
    })?;
    if rows.len() < 2 {
        return Ok(finish_inconclusive(
            "stationary",
            echo,
            mc,
            bound,
            vec![format!("{excluded} of {} replicas blew up", mc.replicas)],
        ));
    }
    let est = mc_estimate(&column(&rows, 0))?;
    let doubled = mc_estimate(&column(&rows, 1))?;
    let change = mc_estimate(&column(&rows, 2))?;
    let burn_in_ok = change.mean.abs() <= est.se.max(mc.confidence * change.se);
    let mut verdict = Verdict::compare(est.mean, est.se, bound, mc.confidence);
    if !burn_in_ok {
        diagnostics.push(format!(
            "burn-in too short: doubling it moves the estimate by {:.3e} (SE {:.3e})",
            change.mean, est.se
        ));
        verdict = Verdict::Inconclusive;
    }
    if too_many_excluded(mc, excluded) {
        diagnostics.push(format!("{excluded} of {} replicas blew up", mc.replicas));
        verdict = Verdict::Inconclusive;
    }
    Ok(ExperimentReport {
        experiment: "stationary".into(),
        inputs: echo,
        estimate: est.mean,
        se: est.se,
        bound,
        verdict,
        quantities: vec![
            Quantity::new("mean_sq_difference", est, Some(bound)),
            Quantity::new("mean_sq_difference_doubled_burn_in", doubled, Some(bound)),
            Quantity::new("burn_in_change", change, None),
        ],
        replicas: mc.replicas,
        excluded_replicas: excluded,
        diagnostics,
        per_replica: ReplicaTable {
            columns: vec!["avg_burn_in".into(), "avg_doubled_burn_in".into(), "change".into()],
            rows,
        },
    })
}

/// Largest tolerated relative gap between time averages at successive
/// horizons.
pub const SUPPORT_GAP: f64 = 0.2;

fn relative_gap(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

/// Least-squares line `y ≈ c0 + c1·x`.
fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let sxy: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let sxx: Vec<f64> = x.iter().map(|a| (a - mx) * (a - mx)).collect();
    let slope = pairwise_sum(&sxy) / pairwise_sum(&sxx);
    (my - slope * mx, slope)
}

fn scaled_state(s: &State, k: f64) -> State {
    State { u: s.u.map(|v| k * v), w: s.w.map(|v| k * v), t: s.t }
}

/// Time averages `(1/T)∫₀ᵀ(‖u‖²_V + ‖w‖²_H)dt` at each horizon, plus a
/// regression of the cumulative integral `≈ K₁‖v₀‖² + K₂T` from the original
/// and a √2-scaled initial state on the same noise path.
pub fn invariant_support(horizons: &[f64], inputs: SimInputs<'_>, mc: &McConfig) -> Result<ExperimentReport> {
    mc.check()?;
    let mut hs = horizons.to_vec();
    hs.sort_by(f64::total_cmp);
    if hs.is_empty() || hs[0] <= 0.0 {
        return Err(Error::invalid("horizons must be positive and non-empty"));
    }
    let t_max = *hs.last().unwrap();
    let mut cfg = inputs.config.clone();
    cfg.t_final = t_max;
    cfg.keep_states = false;
    let eps = cfg.epsilon;
    let g = inputs.op.grid();
    let v0 = inputs.initial.u.norm_h_sq() + g.gradient_sq(inputs.initial.u.values()) + inputs.initial.w.norm_h_sq();
    // factors applied to ‖v₀‖²
    let scalings: Vec<f64> = if v0 > 0.0 { vec![1.0, 2.0] } else { vec![1.0] };

    let echo = json!({
        "sim": inputs.echo(),
        "epsilon": eps,
        "horizons": hs,
        "initial_norm_sq": v0,
        "replicas": mc.replicas,
        "seed": mc.seed,
        "confidence": mc.confidence,
    });

    let (rows, excluded) = run_replicas(mc, |r| {
        let mut out = Vec::new();
        let mut fits = Vec::new();
        for &k in &scalings {
            let init = scaled_state(inputs.initial, k.sqrt());
            let rec = simulate_coupled_replica(
                &init,
                &cfg,
                inputs.op,
                inputs.model,
                inputs.spectrum,
                &[eps],
                mc.seed,
                r,
            )?;
            let ledger = &rec.members[0].ledger.rows;
            let times: Vec<f64> = ledger.iter().map(|row| row.t).collect();
            let dens: Vec<f64> = ledger.iter().map(|row| row.norm_u_v2 + row.norm_w_h2).collect();
            let mut cum = vec![0.0; times.len()];
            for i in 1..times.len() {
                cum[i] = cum[i - 1] + 0.5 * (dens[i - 1] + dens[i]) * (times[i] - times[i - 1]);
            }
            if k == 1.0 {
                for &h in &hs {
                    let i = times.iter().position(|&t| t >= h - 1e-9 * h).unwrap_or(times.len() - 1);
                    out.push(cum[i] / times[i]);
                }
            }
            let (intercept, slope) = line_fit(&times[1..], &cum[1..]);
            fits.push((intercept, slope));
        }
        for (intercept, slope) in &fits {
            out.push(*intercept);
            out.push(*slope);
        }
        Ok(out)
    })?;
    if rows.len() < 2 {
        return Ok(finish_inconclusive(
            "support",
            echo,
            mc,
            SUPPORT_GAP,
            vec![format!("{excluded} of {} replicas blew up", mc.replicas)],
        ));
    }

    let z = mc.confidence;
    let mut quantities = Vec::new();
    let mut averages = Vec::new();
    for (j, h) in hs.iter().enumerate() {
        let e = mc_estimate(&column(&rows, j))?;
        quantities.push(Quantity::new(format!("time_average(T={h})"), e, None));
        averages.push(e);
    }
    let mut worst = 0.0f64;
    let mut worst_se = 0.0f64;
    let mut beyond = false;
    for w in averages.windows(2) {
        let gap = relative_gap(w[0].mean, w[1].mean);
        let m = w[0].mean.abs().max(w[1].mean.abs()).max(f64::MIN_POSITIVE);
        let gap_se = (w[0].se.powi(2) + w[1].se.powi(2)).sqrt() / m;
        if gap > worst {
            worst = gap;
            worst_se = gap_se;
        }
        beyond |= gap - z * gap_se > SUPPORT_GAP;
    }
    let verdict = if too_many_excluded(mc, excluded) {
        Verdict::Inconclusive
    } else if worst < SUPPORT_GAP {
        Verdict::WithinBound
    } else if beyond {
        Verdict::ViolatedBeyondCi
    } else {
        Verdict::Inconclusive
    };
    quantities.push(Quantity { name: "max_relative_gap".into(), estimate: worst, se: worst_se, bound: Some(SUPPORT_GAP) });

    let base = hs.len();
    let mut columns: Vec<String> = hs.iter().map(|h| format!("avg_T_{h}")).collect();
    for (i, k) in scalings.iter().enumerate() {
        let intercept = mc_estimate(&column(&rows, base + 2 * i))?;
        let slope = mc_estimate(&column(&rows, base + 2 * i + 1))?;
        let scale = *k;
        quantities.push(Quantity::new(format!("intercept(v0_scale={scale})"), intercept, None));
        quantities.push(Quantity::new(format!("K2_hat(v0_scale={scale})"), slope, None));
        if v0 > 0.0 {
            let k1 = Estimate { mean: intercept.mean / (scale * v0), se: intercept.se / (scale * v0) };
            quantities.push(Quantity::new(format!("K1_hat(v0_scale={scale})"), k1, None));
        }
        columns.push(format!("intercept_scale_{scale}"));
        columns.push(format!("slope_scale_{scale}"));
    }
    let mut diagnostics = Vec::new();
    if scalings.len() == 2 {
        let dslope: Vec<f64> = rows.iter().map(|(_, v)| v[base + 3] - v[base + 1]).collect();
        let d = mc_estimate(&dslope)?;
        quantities.push(Quantity::new("K2_shift_on_doubling", d, Some(0.0)));
        diagnostics.push(format!(
            "slope shift on doubling |v0|^2: {:.3e} +- {:.3e} ({} CI)",
            d.mean,
            d.se,
            if d.mean.abs() <= z * d.se { "within" } else { "outside" }
        ));
    }
    if too_many_excluded(mc, excluded) {
        diagnostics.push(format!("{excluded} of {} replicas blew up", mc.replicas));
    }
    Ok(ExperimentReport {
        experiment: "support".into(),
        inputs: echo,
        estimate: worst,
        se: worst_se,
        bound: SUPPORT_GAP,
        verdict,
        quantities,
        replicas: mc.replicas,
        excluded_replicas: excluded,
        diagnostics,
        per_replica: ReplicaTable { columns, rows },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::make_grid;
    use crate::noise::{make_spectrum, DecayRule};
    use crate::operator::{build_operator, ConductivitySpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    #[test]
    fn estimate_examples() {
        assert_eq!(mc_estimate(&[1.0, 1.0, 1.0]).unwrap(), Estimate { mean: 1.0, se: 0.0 });
        let e = mc_estimate(&[0.0, 2.0]).unwrap();
        assert!((e.mean - 1.0).abs() < 1e-15 && (e.se - 1.0).abs() < 1e-15);
        assert!(matches!(mc_estimate(&[1.0]), Err(Error::TooFewSamples { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = mc_estimate(&xs).unwrap();
        assert!(e.mean.abs() < 0.04);
        assert!((e.se - 0.01).abs() < 1e-3);
    }

    #[test]
    fn verdict_soundness() {
        assert_eq!(Verdict::compare(1.1, 0.05, 1.0, 4.0), Verdict::WithinBound);
        assert_eq!(Verdict::compare(1.3, 0.05, 1.0, 4.0), Verdict::ViolatedBeyondCi);
    }

    #[test]
    fn bound_arithmetic() {
        let b = tail_bound(0.1f64.sqrt(), 0.1, 0.5, 1.0);
        assert!((b - 3.0 * (-5.0f64).exp()).abs() < 1e-15);
        assert!((b - 0.0202).abs() < 1e-4);
        assert!(((0.2f64 - 0.1).powi(2) * 1.0 - 0.01).abs() < 1e-15);
    }

    fn small_setup() -> (BidomainOperator, IonicModel, NoiseSpectrum) {
        let g = make_grid(1, &[PI], 17).unwrap();
        let op = build_operator(&ConductivitySpec::uniform(&g, 2.0, 2.0), &g).unwrap();
        let model = IonicModel::FitzHughNagumo { eta: 1.0, a: 0.1, b: 1.0, c: 1.0 };
        let spec = make_spectrum(DecayRule::PowerLaw { scale: 1.0, exponent: 2.0 }, 16, &op).unwrap();
        (op, model, spec)
    }

    #[test]
    fn zero_epsilon_gives_zero_deviation() {
        let (op, model, spec) = small_setup();
        let st = State::constant(op.grid(), 0.2, 0.0);
        let cfg = SimConfig::new(0.02, 0.4);
        let inputs = SimInputs { op: &op, model: &model, spectrum: &spec, config: &cfg, initial: &st };
        let rep = small_noise_deviation(&[0.0, 0.1], inputs, &McConfig::new(8, 1)).unwrap();
        let d0 = rep.quantities.iter().find(|q| q.name == "D(eps=0)").unwrap();
        assert_eq!((d0.estimate, d0.se), (0.0, 0.0));
    }

    #[test]
    fn reports_are_reproducible() {
        let (op, model, spec) = small_setup();
        let st = State::constant(op.grid(), 0.2, 0.0);
        let cfg = SimConfig::new(0.02, 0.4);
        let inputs = SimInputs { op: &op, model: &model, spectrum: &spec, config: &cfg, initial: &st };
        let mc = McConfig::new(16, 5);
        let a = small_noise_deviation(&[0.2, 0.1], inputs, &mc).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| small_noise_deviation(&[0.2, 0.1], inputs, &mc).unwrap());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.per_replica.to_csv(), b.per_replica.to_csv());
    }

    #[test]
    fn equal_amplitudes_never_separate() {
        let (op, model, spec) = small_setup();
        let st = State::constant(op.grid(), 0.2, 0.0);
        let cfg = SimConfig::new(0.05, 1.0);
        let inputs = SimInputs { op: &op, model: &model, spectrum: &spec, config: &cfg, initial: &st };
        let s = StationarySettings { eps1: 0.1, eps2: 0.1, burn_in: 0.5, horizon: 1.0, stationarity_hypotheses: true };
        let rep = stationary_coupling(s, inputs, &McConfig::new(4, 2)).unwrap();
        assert_eq!(rep.estimate, 0.0);
        let s = StationarySettings { stationarity_hypotheses: false, ..s };
        let rep = stationary_coupling(s, inputs, &McConfig::new(4, 2)).unwrap();
        assert_eq!(rep.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn equilibrium_support_is_zero() {
        let (op, model, spec) = small_setup();
        let st = State::zeros(op.grid());
        let cfg = SimConfig::new(0.05, 1.0);
        let inputs = SimInputs { op: &op, model: &model, spectrum: &spec, config: &cfg, initial: &st };
        let rep = invariant_support(&[1.0, 2.0], inputs, &McConfig::new(3, 0)).unwrap();
        assert_eq!(rep.quantities[0].estimate, 0.0);
        assert_eq!(rep.quantities[1].estimate, 0.0);
        assert_eq!(rep.verdict, Verdict::WithinBound);
    }

    #[test]
    fn tail_guard_outside_range() {
        let (op, model, spec) = small_setup();
        let st = State::zeros(op.grid());
        let cfg = SimConfig::new(0.05, 1.0);
        let inputs = SimInputs { op: &op, model: &model, spectrum: &spec, config: &cfg, initial: &st };
        let rep = tail_probability(10.0, 0.1, inputs, &McConfig::new(10, 0)).unwrap();
        assert_eq!(rep.verdict, Verdict::Inconclusive);
        assert!(rep.estimate.is_nan());
    }

    #[test]
    fn tail_bound_calibration() {
        let g = make_grid(1, &[PI], 17).unwrap();
        let op = build_operator(&ConductivitySpec::uniform(&g, 2.0, 2.0), &g).unwrap();
        let model = IonicModel::AllenCahn { eta: 0.2 };
        let spec = make_spectrum(DecayRule::PowerLaw { scale: 0.5, exponent: 2.0 }, 16, &op).unwrap();
        let st = State::zeros(&g);
        let cfg = SimConfig::new(0.02, 1.0);
        let inputs = SimInputs { op: &op, model: &model, spectrum: &spec, config: &cfg, initial: &st };
        // bound ≈ 0.3 for r² = 4γε²T ln 10
        let eps = 0.1;
        let r = (4.0 * spec.trace() * eps * eps * 1.0 * 10f64.ln()).sqrt();
        let rep = tail_probability(r, eps, inputs, &McConfig::new(50, 0)).unwrap();
        assert!((rep.bound - 0.3).abs() < 1e-12);
        assert_ne!(rep.verdict, Verdict::Inconclusive);
        let rep = tail_probability(3.0 * r, eps, inputs, &McConfig::new(50, 0)).unwrap();
        // bound now below the informative range
        assert_eq!(rep.verdict, Verdict::Inconclusive);
    }
}
