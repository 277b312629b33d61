//! Q-Wiener noise `W = Σ_k √γ_k ψ_k W_k` diagonal in the operator eigenbasis,
//! and the stochastic convolution `W_A`, which is an Ornstein–Uhlenbeck
//! process per mode.
//!
//! Only positive modes `k ≥ 1` carry noise; the constant mode is left
//! deterministic. Every `(master seed, replica, mode)` triple owns its own
//! ChaCha stream, so a mode's path does not depend on how many other modes
//! are active or on the order replicas are executed in.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::operator::BidomainOperator;

/// How the weights `γ_k` are generated.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecayRule {
    /// `γ_k = scale · k^{−exponent}`
    PowerLaw { scale: f64, exponent: f64 },
    /// `γ_1, γ_2, …` verbatim
    Explicit { gammas: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSpectrum {
    /// `gammas[j]` is the weight of mode `k = j + 1`.
    gammas: Vec<f64>,
    rule: DecayRule,
    trace: f64,
}

impl NoiseSpectrum {
    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    /// Weight of mode `k ≥ 1`; zero beyond the truncation.
    pub fn gamma(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.gammas.get(k - 1).copied().unwrap_or(0.0)
        }
    }

    pub fn modes(&self) -> usize {
        self.gammas.len()
    }

    pub fn rule(&self) -> &DecayRule {
        &self.rule
    }

    /// `γ = Σ γ_k` over the retained modes.
    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// Trace of the untruncated power law: partial sum plus the midpoint
    /// integral tail `C (K+½)^{1−p}/(p−1)`. Infinite for `p ≤ 1`; equal to
    /// the partial sum for explicit lists.
    pub fn extrapolated_trace(&self) -> f64 {
        match self.rule {
            DecayRule::PowerLaw { scale, exponent } => {
                if scale == 0.0 {
                    0.0
                } else if exponent <= 1.0 {
                    f64::INFINITY
                } else {
                    let k = self.gammas.len() as f64;
                    self.trace + scale * (k + 0.5).powf(1.0 - exponent) / (exponent - 1.0)
                }
            }
            DecayRule::Explicit { .. } => self.trace,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.gammas.iter().all(|&g| g == 0.0)
    }
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Builds `γ_1..γ_K`. `K` may not exceed the number of positive modes.
pub fn make_spectrum(rule: DecayRule, modes: usize, op: &BidomainOperator) -> Result<NoiseSpectrum> {
    let available = op.len().saturating_sub(1);
    if modes > available {
        return Err(Error::invalid(format!(
            "{modes} noise modes requested, operator has {available} positive modes"
        )));
    }
    spectrum_unchecked(rule, modes)
}

/// Builds a spectrum without an operator; used where only the weights matter.
pub fn spectrum_unchecked(rule: DecayRule, modes: usize) -> Result<NoiseSpectrum> {
    let gammas: Vec<f64> = match &rule {
        DecayRule::PowerLaw { scale, exponent } => {
            if !scale.is_finite() || !exponent.is_finite() {
                return Err(Error::invalid("power-law noise parameters must be finite"));
            }
            (1..=modes).map(|k| scale * (k as f64).powf(-exponent)).collect()
        }
        DecayRule::Explicit { gammas } => {
            if gammas.len() != modes {
                return Err(Error::invalid(format!(
                    "explicit spectrum lists {} weights for {modes} modes",
                    gammas.len()
                )));
            }
            gammas.clone()
        }
    };
    for (j, &g) in gammas.iter().enumerate() {
        if !(g >= 0.0) || !g.is_finite() {
            return Err(Error::NegativeCoefficient { mode: j + 1, value: g });
        }
    }
    let trace = pairwise_sum(&gammas);
    Ok(NoiseSpectrum { gammas, rule, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesVerdict {
    Converges,
    Diverges,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesReport {
    pub partial_sum: f64,
    /// Fitted decay exponent `q` of the terms, `t_k ~ k^{−q}`.
    pub tail_exponent: Option<f64>,
    /// Partial sum plus the fitted power-law tail (infinite if divergent).
    pub extrapolated: f64,
    pub verdict: SeriesVerdict,
}

/// `S_half = Σγ_kλ_k^{1/2}` and `S_sq = Σγ_k²λ_k²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummabilityReport {
    pub trace: f64,
    pub s_half: SeriesReport,
    pub s_sq: SeriesReport,
}

/// Least-squares slope of `ln t_k` on `ln k` over `k ∈ [K/8, K/3]`, with
/// convergence when the terms decay faster than `k^{−1.2}`, divergence when
/// slower than `k^{−0.8}`.
fn series_report(terms: &[f64]) -> SeriesReport {
    let partial_sum = pairwise_sum(terms);
    let kmax = terms.len();
    let lo = (kmax / 8).max(2);
    let hi = kmax / 3;
    let window: Vec<(f64, f64)> = (lo..=hi)
        .filter(|&k| k >= 1 && k <= kmax && terms[k - 1] > 0.0)
        .map(|k| ((k as f64).ln(), terms[k - 1].ln()))
        .collect();
    let tail_zero = kmax > 0 && terms[lo.min(kmax) - 1..].iter().all(|&t| t == 0.0);
    if tail_zero || kmax == 0 {
        return SeriesReport {
            partial_sum,
            tail_exponent: None,
            extrapolated: partial_sum,
            verdict: SeriesVerdict::Converges,
        };
    }
    if window.len() < 4 {
        return SeriesReport {
            partial_sum,
            tail_exponent: None,
            extrapolated: partial_sum,
            verdict: SeriesVerdict::Inconclusive,
        };
    }
    let n = window.len() as f64;
    let mx = window.iter().map(|p| p.0).sum::<f64>() / n;
    let my = window.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = window.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = window.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let q = -sxy / sxx;
    let verdict = if q > 1.2 {
        SeriesVerdict::Converges
    } else if q < 0.8 {
        SeriesVerdict::Diverges
    } else {
        SeriesVerdict::Inconclusive
    };
    let extrapolated = if q > 1.0 {
        let k = kmax as f64;
        let last = terms[kmax - 1];
        partial_sum + last * k.powf(q) * (k + 0.5).powf(1.0 - q) / (q - 1.0)
    } else {
        f64::INFINITY
    };
    SeriesReport {
        partial_sum,
        tail_exponent: Some(q),
        extrapolated,
        verdict,
    }
}

pub fn check_summability(spectrum: &NoiseSpectrum, op: &BidomainOperator) -> SummabilityReport {
    let lambdas = op.eigenvalues();
    let half: Vec<f64> = spectrum
        .gammas
        .iter()
        .enumerate()
        .map(|(j, g)| g * lambdas[j + 1].max(0.0).sqrt())
        .collect();
    let sq: Vec<f64> = spectrum
        .gammas
        .iter()
        .enumerate()
        .map(|(j, g)| (g * lambdas[j + 1]).powi(2))
        .collect();
    SummabilityReport {
        trace: spectrum.trace,
        s_half: series_report(&half),
        s_sq: series_report(&sq),
    }
}

/// SplitMix64 finaliser, used to spread seeds before they key a stream.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stream for `(master, replica, mode)`: the key selects the ChaCha seed,
/// the mode selects the stream within it.
pub fn mode_stream(master: u64, replica: u64, mode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(master ^ splitmix64(replica)));
    rng.set_stream(mode);
    rng
}

/// One independent stream per noise mode of one replica.
#[derive(Debug, Clone)]
pub struct NoiseStreams {
    streams: Vec<ChaCha8Rng>,
}

impl NoiseStreams {
    pub fn new(master: u64, replica: u64, modes: usize) -> Self {
        NoiseStreams {
            streams: (1..=modes as u64).map(|k| mode_stream(master, replica, k)).collect(),
        }
    }

    pub fn modes(&self) -> usize {
        self.streams.len()
    }

    /// One standard normal per mode.
    pub fn fill_normals(&mut self, out: &mut [f64]) {
        for (x, rng) in out.iter_mut().zip(&mut self.streams) {
            *x = rng.sample(StandardNormal);
        }
    }
}

/// Brownian coordinates `W_k(t)`, `k = 1..K`.
#[derive(Debug, Clone)]
pub struct WienerState {
    values: Vec<f64>,
    t: f64,
    streams: NoiseStreams,
}

impl WienerState {
    pub fn new(master: u64, replica: u64, modes: usize) -> Self {
        WienerState {
            values: vec![0.0; modes],
            t: 0.0,
            streams: NoiseStreams::new(master, replica, modes),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Draws `ΔW_k ~ N(0, dt)` for every mode and advances the state.
    pub fn sample_increment(&mut self, dt: f64) -> Result<Vec<f64>> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!("increment needs dt > 0, got {dt}")));
        }
        let mut inc = vec![0.0; self.values.len()];
        self.streams.fill_normals(&mut inc);
        let s = dt.sqrt();
        for (x, w) in inc.iter_mut().zip(&mut self.values) {
            *x *= s;
            *w += *x;
        }
        self.t += dt;
        Ok(inc)
    }
}

/// `W(t)` at the nodes: `Σ_k √γ_k ψ_k W_k(t)`.
pub fn wiener_field(op: &BidomainOperator, spectrum: &NoiseSpectrum, state: &WienerState) -> Vec<f64> {
    let mut c = vec![0.0; op.len()];
    for (j, (&g, &w)) in spectrum.gammas.iter().zip(&state.values).enumerate() {
        c[j + 1] = g.sqrt() * w;
    }
    op.to_nodal(&c)
}

/// Per-mode OU factors for one step `dt`: decay `e^{−λ_k dt}` and the
/// standard deviation `√(γ_k(1 − e^{−2λ_k dt})/(2λ_k))` of the fresh part.
#[derive(Debug, Clone, PartialEq)]
pub struct OuFactors {
    pub decay: Vec<f64>,
    pub std: Vec<f64>,
}

/// `(1 − e^{−2λt})/(2λ)`, continuous at `λ = 0`.
pub fn ou_variance_factor(lambda: f64, t: f64) -> f64 {
    let x = 2.0 * lambda * t;
    if x.abs() < 1e-8 {
        t * (1.0 - 0.5 * x)
    } else {
        -(-x).exp_m1() / (2.0 * lambda)
    }
}

impl OuFactors {
    pub fn new(spectrum: &NoiseSpectrum, op: &BidomainOperator, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!("convolution step needs dt > 0, got {dt}")));
        }
        let lambdas = op.eigenvalues();
        let mut decay = Vec::with_capacity(spectrum.modes());
        let mut std = Vec::with_capacity(spectrum.modes());
        for (j, &g) in spectrum.gammas.iter().enumerate() {
            let k = j + 1;
            let l = lambdas[k];
            if g > 0.0 && !(l > 0.0) {
                return Err(Error::ZeroEigenvalueNoise { mode: k, eigenvalue: l });
            }
            decay.push((-l * dt).exp());
            std.push((g * ou_variance_factor(l, dt)).sqrt());
        }
        Ok(OuFactors { decay, std })
    }
}

/// Stochastic convolution coordinates `W_A^k(t)`, `k = 1..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvolutionState {
    values: Vec<f64>,
    t: f64,
}

impl ConvolutionState {
    pub fn zero(modes: usize) -> Self {
        ConvolutionState { values: vec![0.0; modes], t: 0.0 }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Exact OU update with caller-supplied standard normals.
    pub fn advance(&mut self, factors: &OuFactors, dt: f64, xi: &[f64]) {
        for (((v, d), s), x) in self.values.iter_mut().zip(&factors.decay).zip(&factors.std).zip(xi) {
            *v = d * *v + s * x;
        }
        self.t += dt;
    }

    /// Nodal values `Σ_k W_A^k ψ_k`.
    pub fn to_nodal(&self, op: &BidomainOperator) -> Vec<f64> {
        let mut c = vec![0.0; op.len()];
        c[1..=self.values.len()].copy_from_slice(&self.values);
        op.to_nodal(&c)
    }
}

/// One exact step of the stochastic convolution.
pub fn convolution_step(
    state: &ConvolutionState,
    spectrum: &NoiseSpectrum,
    op: &BidomainOperator,
    dt: f64,
    streams: &mut NoiseStreams,
) -> Result<ConvolutionState> {
    let factors = OuFactors::new(spectrum, op, dt)?;
    let mut xi = vec![0.0; spectrum.modes()];
    streams.fill_normals(&mut xi);
    let mut next = state.clone();
    next.advance(&factors, dt, &xi);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::make_grid;
    use crate::operator::{build_operator, ConductivitySpec};
    use std::f64::consts::PI;

    fn laplacian(n: usize) -> BidomainOperator {
        let g = make_grid(1, &[PI], n).unwrap();
        build_operator(&ConductivitySpec::uniform(&g, 2.0, 2.0), &g).unwrap()
    }

    #[test]
    fn spectrum_examples() {
        let s = spectrum_unchecked(DecayRule::PowerLaw { scale: 1.0, exponent: 3.0 }, 512).unwrap();
        let zeta3 = 1.202_056_903_159_594_3;
        assert!((s.extrapolated_trace() - zeta3).abs() < 1e-3);
        let one = spectrum_unchecked(DecayRule::Explicit { gammas: vec![1.0] }, 1).unwrap();
        assert_eq!(one.trace(), 1.0);
        let zero = spectrum_unchecked(DecayRule::Explicit { gammas: vec![0.0; 4] }, 4).unwrap();
        assert_eq!(zero.trace(), 0.0);
        assert!(zero.is_zero());
        assert!(matches!(
            spectrum_unchecked(DecayRule::Explicit { gammas: vec![1.0, -0.5] }, 2),
            Err(Error::NegativeCoefficient { mode: 2, .. })
        ));
        let op = laplacian(9);
        assert!(make_spectrum(DecayRule::PowerLaw { scale: 1.0, exponent: 2.0 }, 9, &op).is_err());
        assert!(make_spectrum(DecayRule::PowerLaw { scale: 1.0, exponent: 2.0 }, 8, &op).is_ok());
    }

    #[test]
    fn trace_is_the_sum() {
        let s = spectrum_unchecked(DecayRule::PowerLaw { scale: 0.3, exponent: 1.5 }, 300).unwrap();
        let direct: f64 = s.gammas().iter().sum();
        assert!((s.trace() - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn summability_verdicts() {
        let op = laplacian(257);
        let s = make_spectrum(DecayRule::PowerLaw { scale: 1.0, exponent: 3.0 }, 256, &op).unwrap();
        let r = check_summability(&s, &op);
        assert_eq!(r.s_half.verdict, SeriesVerdict::Converges);
        assert_eq!(r.s_sq.verdict, SeriesVerdict::Converges);
        let s = make_spectrum(DecayRule::PowerLaw { scale: 1.0, exponent: 1.0 }, 256, &op).unwrap();
        let r = check_summability(&s, &op);
        assert_eq!(r.s_half.verdict, SeriesVerdict::Diverges);
        let zero = make_spectrum(DecayRule::Explicit { gammas: vec![0.0; 10] }, 10, &op).unwrap();
        assert_eq!(check_summability(&zero, &op).s_half.verdict, SeriesVerdict::Converges);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = NoiseStreams::new(7, 3, 4);
        let mut b = NoiseStreams::new(7, 3, 4);
        let mut c = NoiseStreams::new(7, 4, 4);
        let (mut xa, mut xb, mut xc) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]);
        a.fill_normals(&mut xa);
        b.fill_normals(&mut xb);
        c.fill_normals(&mut xc);
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        // more modes leave the leading modes untouched
        let mut wide = NoiseStreams::new(7, 3, 9);
        let mut xw = vec![0.0; 9];
        wide.fill_normals(&mut xw);
        assert_eq!(&xw[..4], &xa[..]);
    }

    #[test]
    fn increment_moments() {
        let dt = 0.01;
        let modes = 3;
        let m = 100_000;
        let mut st = WienerState::new(11, 0, modes);
        let mut sums = vec![0.0; modes];
        let mut sq = vec![0.0; modes];
        let mut cross = 0.0;
        for _ in 0..m {
            let inc = st.sample_increment(dt).unwrap();
            for k in 0..modes {
                sums[k] += inc[k];
                sq[k] += inc[k] * inc[k];
            }
            cross += inc[0] * inc[1];
        }
        let mf = m as f64;
        for k in 0..modes {
            let mean = sums[k] / mf;
            assert!(mean.abs() < 4.0 * (dt / mf).sqrt());
            let var = sq[k] / mf - mean * mean;
            // Var of the sample variance of N(0,dt) is 2dt²/M
            assert!((var - dt).abs() < 4.0 * dt * (2.0 / mf).sqrt());
        }
        let corr = cross / mf / dt;
        assert!(corr.abs() < 4.0 / mf.sqrt());
        assert!(st.sample_increment(0.0).is_err());
    }

    #[test]
    fn nodal_wiener_variance() {
        let op = laplacian(17);
        let s = make_spectrum(DecayRule::PowerLaw { scale: 1.0, exponent: 2.0 }, 16, &op).unwrap();
        let node = 5;
        let t = 0.5;
        let expected: f64 = (1..=16).map(|k| s.gamma(k) * op.eigenvectors()[(node, k)].powi(2) * t).sum();
        let m = 20_000;
        let samples: Vec<f64> = (0..m)
            .map(|r| {
                let mut st = WienerState::new(5, r, 16);
                st.sample_increment(t).unwrap();
                wiener_field(&op, &s, &st)[node]
            })
            .collect();
        let var = samples.iter().map(|x| x * x).sum::<f64>() / m as f64;
        let se = (samples.iter().map(|x| (x * x - var).powi(2)).sum::<f64>() / (m as f64 - 1.0)).sqrt()
            / (m as f64).sqrt();
        assert!((var - expected).abs() < 4.0 * se, "{var} vs {expected} ± {se}");
    }

    #[test]
    fn convolution_examples() {
        let op = laplacian(33);
        let gammas: Vec<f64> = (1..=8).map(|k| if k == 3 { 0.0 } else { 1.0 / k as f64 }).collect();
        let s = make_spectrum(DecayRule::Explicit { gammas }, 8, &op).unwrap();
        let st = ConvolutionState::zero(8);
        assert!(st.values().iter().all(|&v| v == 0.0));
        let mut streams = NoiseStreams::new(1, 0, 8);
        let mut cur = st;
        for _ in 0..50 {
            cur = convolution_step(&cur, &s, &op, 0.1, &mut streams).unwrap();
        }
        assert_eq!(cur.values()[2], 0.0);
        assert!((cur.time() - 5.0).abs() < 1e-12);
        assert!(convolution_step(&cur, &s, &op, -0.1, &mut streams).is_err());
    }

    #[test]
    fn split_step_variance_identity() {
        for &(l, dt) in &[(0.5, 0.3), (40.0, 0.01), (1e-3, 2.0)] {
            let half = ou_variance_factor(l, dt / 2.0);
            let two_halves = (-l * dt / 2.0f64).exp().powi(2) * half + half;
            let one = ou_variance_factor(l, dt);
            assert!((two_halves - one).abs() <= 1e-12 * one);
        }
    }

    #[test]
    fn long_run_variance() {
        let op = laplacian(33);
        let s = make_spectrum(DecayRule::PowerLaw { scale: 1.0, exponent: 2.0 }, 4, &op).unwrap();
        let f = OuFactors::new(&s, &op, 0.05).unwrap();
        let m = 10_000u64;
        let mut acc = vec![Vec::new(); 4];
        for r in 0..m {
            let mut streams = NoiseStreams::new(42, r, 4);
            let mut st = ConvolutionState::zero(4);
            let mut xi = vec![0.0; 4];
            for _ in 0..100 {
                streams.fill_normals(&mut xi);
                st.advance(&f, 0.05, &xi);
            }
            for k in 0..4 {
                acc[k].push(st.values()[k]);
            }
        }
        for k in 0..4 {
            let l = op.eigenvalues()[k + 1];
            let expected = s.gamma(k + 1) * ou_variance_factor(l, 5.0);
            let x2: Vec<f64> = acc[k].iter().map(|x| x * x).collect();
            let mean = x2.iter().sum::<f64>() / m as f64;
            let se = (x2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0)).sqrt()
                / (m as f64).sqrt();
            assert!((mean - expected).abs() < 4.0 * se, "mode {}: {mean} vs {expected}", k + 1);
        }
    }
}
