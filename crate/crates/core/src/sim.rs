//! Time integration of
//!
//! ```text
//! du = [−𝔸u − f(u,w) + I] dt + ε dW,    dw = −g(u,w) dt
//! ```
//!
//! in the eigenbasis of `𝔸`. The linear part and the noise are exact per
//! mode; the reaction is frozen over each step. `w` gets the exponential
//! step of its own linear part `−g₂w`, since `g₂` may be stiff.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ionic::{fit_condition_c3, IonicModel, SampleBox};
use crate::mesh::{Field, Grid};
use crate::noise::{NoiseSpectrum, NoiseStreams, OuFactors};
use crate::operator::BidomainOperator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Exponential Euler with exact noise.
    ImexSpectral,
    /// Euler–Maruyama on the full drift; needs `dt·λ_max < 2`.
    ExplicitEm,
}

/// Rectangular stimulation electrode active on `[t_on, t_off)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Electrode {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    pub amplitude: f64,
    pub t_on: f64,
    pub t_off: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Zero,
    /// Time-independent nodal field.
    Constant { values: Vec<f64> },
    Electrodes { electrodes: Vec<Electrode> },
}

impl Source {
    pub fn is_time_independent(&self) -> bool {
        match self {
            Source::Zero | Source::Constant { .. } => true,
            Source::Electrodes { electrodes } => electrodes
                .iter()
                .all(|e| e.amplitude == 0.0 || (e.t_on <= 0.0 && e.t_off.is_infinite())),
        }
    }

    fn check(&self, grid: &Grid) -> Result<()> {
        match self {
            Source::Constant { values } if values.len() != grid.len() => Err(Error::GridMismatch),
            Source::Constant { values } if values.iter().any(|v| !v.is_finite()) => {
                Err(Error::invalid("source values must be finite"))
            }
            _ => Ok(()),
        }
    }

    /// `I(t)` at the nodes; `None` when identically zero.
    fn eval(&self, grid: &Grid, t: f64) -> Option<Vec<f64>> {
        match self {
            Source::Zero => None,
            Source::Constant { values } => Some(values.clone()),
            Source::Electrodes { electrodes } => {
                let mut out = vec![0.0; grid.len()];
                let mut any = false;
                for e in electrodes.iter().filter(|e| t >= e.t_on && t < e.t_off) {
                    for (node, v) in out.iter_mut().enumerate() {
                        let x = grid.coords(node);
                        let inside = (0..grid.dimension()).all(|d| x[d] >= e.lower[d] && x[d] <= e.upper[d]);
                        if inside {
                            *v += e.amplitude;
                            any = true;
                        }
                    }
                }
                any.then_some(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_final: f64,
    pub scheme: Scheme,
    pub epsilon: f64,
    pub source: Source,
    /// Steps between ledger rows; the last step is always recorded.
    pub record_every: usize,
    /// `(a, b, c)` for the dissipation residual; fitted on the default box
    /// when absent.
    pub c3: Option<(f64, f64, f64)>,
    /// Keep nodal states at every ledger row.
    pub keep_states: bool,
}

pub const BLOWUP_THRESHOLD: f64 = 1e12;

impl SimConfig {
    pub fn new(dt: f64, t_final: f64) -> Self {
        SimConfig {
            dt,
            t_final,
            scheme: Scheme::ImexSpectral,
            epsilon: 0.0,
            source: Source::Zero,
            record_every: 1,
            c3: None,
            keep_states: false,
        }
    }

    pub fn validate(&self, op: &BidomainOperator) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(format!("sim.dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_final >= self.dt) || !self.t_final.is_finite() {
            return Err(Error::invalid(format!(
                "sim.t_final must be >= dt, got t_final = {} with dt = {}",
                self.t_final, self.dt
            )));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("sim.epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("sim.record_every must be >= 1"));
        }
        if self.scheme == Scheme::ExplicitEm {
            let x = self.dt * op.lambda_max();
            if x >= 2.0 {
                return Err(Error::ExplicitUnstable(x));
            }
        }
        self.source.check(op.grid())
    }

    /// Number of steps; the final time `steps·dt` lies within `dt` of `T`.
    pub fn steps(&self) -> usize {
        ((self.t_final / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn resolve_c3(&self, model: &IonicModel) -> Result<(f64, f64, f64)> {
        match self.c3 {
            Some(c) => Ok(c),
            None => Ok(fit_condition_c3(model, SampleBox::default(), 201)?
                .constants()
                .unwrap_or((f64::NAN, f64::NAN, f64::NAN))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub u: Field,
    pub w: Field,
    pub t: f64,
}

impl State {
    pub fn new(u: Field, w: Field) -> Result<Self> {
        u.check_same_grid(&w)?;
        Ok(State { u, w, t: 0.0 })
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        State { u: Field::zeros(grid), w: Field::zeros(grid), t: 0.0 }
    }

    pub fn constant(grid: &Arc<Grid>, u: f64, w: f64) -> Self {
        State { u: Field::constant(grid, u), w: Field::constant(grid, w), t: 0.0 }
    }
}

/// One ledger sample. Serialised with the CSV column names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LedgerRow {
    pub t: f64,
    #[serde(rename = "norm_u_H2")]
    pub norm_u_h2: f64,
    #[serde(rename = "norm_w_H2")]
    pub norm_w_h2: f64,
    #[serde(rename = "norm_u_V2")]
    pub norm_u_v2: f64,
    #[serde(rename = "u_L4_4")]
    pub u_l4_4: f64,
    pub a_uu: f64,
    /// `(f,u)_H + (g,w)_H − a‖u‖⁴_{L⁴} + b(‖u‖²_H + ‖w‖²_H) + c|D|`;
    /// non-negative whenever the dissipativity condition holds pointwise.
    pub c3_residual: f64,
}

pub const LEDGER_COLUMNS: [&str; 7] = ["t", "norm_u_H2", "norm_w_H2", "norm_u_V2", "u_L4_4", "a_uu", "c3_residual"];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EnergyLedger {
    pub rows: Vec<LedgerRow>,
}

impl EnergyLedger {
    pub fn to_csv(&self) -> String {
        let mut s = LEDGER_COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.t, r.norm_u_h2, r.norm_w_h2, r.norm_u_v2, r.u_l4_4, r.a_uu, r.c3_residual
            );
        }
        s
    }

    pub fn sup_energy(&self) -> f64 {
        self.rows.iter().map(|r| r.norm_u_h2 + r.norm_w_h2).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub ledger: EnergyLedger,
    pub final_state: State,
    /// Nodal states at the ledger rows when `keep_states` is set.
    pub states: Vec<State>,
    pub steps: usize,
}

/// Members of a coupled family driven by one Brownian path.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledRecord {
    pub epsilons: Vec<f64>,
    pub members: Vec<TrajectoryRecord>,
    /// `‖u_j − u_0‖²_H + ‖w_j − w_0‖²_H` at each ledger time, per member.
    pub differences: Vec<Vec<f64>>,
    pub times: Vec<f64>,
}

impl CoupledRecord {
    /// `sup_t` of the squared difference against member 0.
    pub fn sup_difference(&self, j: usize) -> f64 {
        self.differences[j].iter().copied().fold(0.0, f64::max)
    }
}

/// Per-step factors shared by every member.
struct Stepper<'a> {
    op: &'a BidomainOperator,
    model: &'a IonicModel,
    cfg: &'a SimConfig,
    grid: Arc<Grid>,
    decay: Vec<f64>,
    phi: Vec<f64>,
    ou: OuFactors,
    w_decay: f64,
    w_phi: f64,
    noise_scale: Vec<f64>,
    c3: (f64, f64, f64),
}

fn phi(lambda: f64, dt: f64) -> f64 {
    let x = lambda * dt;
    if x.abs() < 1e-10 {
        dt * (1.0 - 0.5 * x)
    } else {
        -(-x).exp_m1() / lambda
    }
}

impl<'a> Stepper<'a> {
    fn new(
        op: &'a BidomainOperator,
        model: &'a IonicModel,
        spectrum: &NoiseSpectrum,
        cfg: &'a SimConfig,
    ) -> Result<Self> {
        cfg.validate(op)?;
        model.validate()?;
        if spectrum.modes() + 1 > op.len() {
            return Err(Error::invalid("noise spectrum has more modes than the operator"));
        }
        let dt = cfg.dt;
        let lambdas = op.eigenvalues();
        let (decay, phis) = match cfg.scheme {
            Scheme::ImexSpectral => (
                lambdas.iter().map(|l| (-l * dt).exp()).collect(),
                lambdas.iter().map(|&l| phi(l, dt)).collect(),
            ),
            Scheme::ExplicitEm => (lambdas.iter().map(|l| 1.0 - l * dt).collect(), vec![dt; lambdas.len()]),
        };
        let ou = OuFactors::new(spectrum, op, dt)?;
        let noise_scale = match cfg.scheme {
            Scheme::ImexSpectral => ou.std.clone(),
            Scheme::ExplicitEm => spectrum.gammas().iter().map(|g| (g * dt).sqrt()).collect(),
        };
        let g2 = model.g2();
        let (w_decay, w_phi) = match cfg.scheme {
            Scheme::ImexSpectral => ((-g2 * dt).exp(), phi(g2, dt)),
            Scheme::ExplicitEm => (1.0 - g2 * dt, dt),
        };
        Ok(Stepper {
            op,
            model,
            cfg,
            grid: Arc::clone(op.grid()),
            decay,
            phi: phis,
            ou,
            w_decay,
            w_phi,
            noise_scale,
            c3: cfg.resolve_c3(model)?,
        })
    }

    fn source(&self, t: f64) -> Option<Vec<f64>> {
        self.cfg.source.eval(&self.grid, t)
    }

    /// `(−f(u,w) + I)` transformed to the eigenbasis, and the `w` update.
    fn reaction(&self, u: &[f64], w: &mut [f64], source: Option<&[f64]>) -> DVector<f64> {
        let mut r = DVector::<f64>::zeros(u.len());
        for i in 0..u.len() {
            let mut v = -self.model.f(u[i], w[i]);
            if let Some(s) = source {
                v += s[i];
            }
            r[i] = v;
        }
        for i in 0..u.len() {
            w[i] = self.w_decay * w[i] - self.w_phi * self.model.g1(u[i]);
        }
        self.op.forward() * r
    }

    fn ledger_row(&self, t: f64, u: &[f64], uhat: &DVector<f64>, w: &[f64]) -> LedgerRow {
        let g = &self.grid;
        let norm_u_h2 = g.norm_sq(u);
        let norm_w_h2 = g.norm_sq(w);
        let grad = g.gradient_sq(u);
        let u_l4_4 = g.l4_pow4(u);
        let a_uu: f64 = uhat.iter().zip(self.op.eigenvalues()).map(|(c, l)| l * c * c).sum();
        let fu: Vec<f64> = u.iter().zip(w).map(|(&a, &b)| self.model.f(a, b)).collect();
        let gw: Vec<f64> = u.iter().zip(w).map(|(&a, &b)| self.model.g(a, b)).collect();
        let (a, b, c) = self.c3;
        let c3_residual =
            g.inner(&fu, u) + g.inner(&gw, w) - a * u_l4_4 + b * (norm_u_h2 + norm_w_h2) + c * g.measure();
        LedgerRow {
            t,
            norm_u_h2,
            norm_w_h2,
            norm_u_v2: norm_u_h2 + grad,
            u_l4_4,
            a_uu,
            c3_residual,
        }
    }

    fn nodal(&self, uhat: &DVector<f64>) -> Vec<f64> {
        (self.op.eigenvectors() * uhat).iter().copied().collect()
    }
}

fn blown_up(row: &LedgerRow) -> bool {
    let vals = [row.norm_u_h2, row.norm_w_h2, row.norm_u_v2, row.u_l4_4, row.a_uu];
    vals.iter().any(|v| !v.is_finite() || *v > BLOWUP_THRESHOLD)
}

struct Member {
    eps: f64,
    uhat: DVector<f64>,
    /// Only for the transformed path: `W_A` in the eigenbasis (unscaled).
    conv: Option<DVector<f64>>,
    w: Vec<f64>,
    u: Vec<f64>,
    ledger: EnergyLedger,
    states: Vec<State>,
    last_finite: Option<LedgerRow>,
}

fn check_initial(initial: &State, op: &BidomainOperator) -> Result<()> {
    initial.u.check_same_grid(&initial.w)?;
    if !op.grid().same_shape(initial.u.grid()) {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// Shared driver. Every member consumes the same normals each step.
#[allow(clippy::too_many_arguments)]
fn run(
    initial: &State,
    cfg: &SimConfig,
    op: &BidomainOperator,
    model: &IonicModel,
    spectrum: &NoiseSpectrum,
    epsilons: &[f64],
    seed: u64,
    replica: u64,
    transformed: bool,
) -> Result<CoupledRecord> {
    check_initial(initial, op)?;
    if epsilons.is_empty() {
        return Err(Error::invalid("need at least one epsilon"));
    }
    if let Some(e) = epsilons.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be >= 0, got {e}")));
    }
    let st = Stepper::new(op, model, spectrum, cfg)?;
    let n = op.len();
    let k = spectrum.modes();
    let noisy = !spectrum.is_zero() && epsilons.iter().any(|&e| e > 0.0);
    let mut streams = NoiseStreams::new(seed, replica, k);
    let mut xi = vec![0.0; k];

    let uhat0 = DVector::from_vec(op.to_spectral(initial.u.values()));
    let mut members: Vec<Member> = epsilons
        .iter()
        .map(|&eps| Member {
            eps,
            uhat: uhat0.clone(),
            conv: transformed.then(|| DVector::zeros(k)),
            w: initial.w.values().to_vec(),
            u: Vec::new(),
            ledger: EnergyLedger::default(),
            states: Vec::new(),
            last_finite: None,
        })
        .collect();

    let steps = cfg.steps();
    let mut times = Vec::new();
    let mut differences = vec![Vec::new(); members.len()];
    let t0 = initial.t;

    for step in 0..=steps {
        let t = t0 + step as f64 * cfg.dt;
        for m in members.iter_mut() {
            m.u = match &m.conv {
                None => st.nodal(&m.uhat),
                Some(c) => {
                    let mut total = m.uhat.clone();
                    for j in 0..k {
                        total[j + 1] += m.eps * c[j];
                    }
                    st.nodal(&total)
                }
            };
        }
        let record = step % cfg.record_every == 0 || step == steps;
        if record {
            times.push(t);
            for m in members.iter_mut() {
                let spectral = match &m.conv {
                    None => m.uhat.clone(),
                    Some(c) => {
                        let mut total = m.uhat.clone();
                        for j in 0..k {
                            total[j + 1] += m.eps * c[j];
                        }
                        total
                    }
                };
                let row = st.ledger_row(t, &m.u, &spectral, &m.w);
                if blown_up(&row) {
                    return Err(Error::BlowUp { t, last_finite: m.last_finite.map(Box::new) });
                }
                m.last_finite = Some(row);
                m.ledger.rows.push(row);
                if cfg.keep_states {
                    m.states.push(nodal_state(&st.grid, &m.u, &m.w, t)?);
                }
            }
            let (u0, w0) = (members[0].u.clone(), members[0].w.clone());
            for (j, m) in members.iter().enumerate() {
                let du: Vec<f64> = m.u.iter().zip(&u0).map(|(a, b)| a - b).collect();
                let dw: Vec<f64> = m.w.iter().zip(&w0).map(|(a, b)| a - b).collect();
                differences[j].push(st.grid.norm_sq(&du) + st.grid.norm_sq(&dw));
            }
        } else {
            for m in &members {
                let e = st.grid.norm_sq(&m.u) + st.grid.norm_sq(&m.w);
                if !e.is_finite() || e > BLOWUP_THRESHOLD {
                    return Err(Error::BlowUp { t, last_finite: m.last_finite.map(Box::new) });
                }
            }
        }
        if step == steps {
            break;
        }

        if noisy {
            streams.fill_normals(&mut xi);
        }
        let source = st.source(t);
        for m in members.iter_mut() {
            let rhat = st.reaction(&m.u, &mut m.w, source.as_deref());
            for i in 0..n {
                m.uhat[i] = st.decay[i] * m.uhat[i] + st.phi[i] * rhat[i];
            }
            if noisy {
                match &mut m.conv {
                    None if m.eps != 0.0 => {
                        for j in 0..k {
                            m.uhat[j + 1] += m.eps * st.noise_scale[j] * xi[j];
                        }
                    }
                    None => {}
                    Some(c) => {
                        for j in 0..k {
                            c[j] = st.ou.decay[j] * c[j] + st.ou.std[j] * xi[j];
                        }
                    }
                }
            }
        }
    }

    let t_end = t0 + steps as f64 * cfg.dt;
    let mut out = Vec::with_capacity(members.len());
    for m in members {
        let final_state = nodal_state(&st.grid, &m.u, &m.w, t_end)?;
        out.push(TrajectoryRecord { ledger: m.ledger, final_state, states: m.states, steps });
    }
    Ok(CoupledRecord { epsilons: epsilons.to_vec(), members: out, differences, times })
}

fn nodal_state(grid: &Arc<Grid>, u: &[f64], w: &[f64], t: f64) -> Result<State> {
    Ok(State {
        u: Field::new(Arc::clone(grid), u.to_vec())?,
        w: Field::new(Arc::clone(grid), w.to_vec())?,
        t,
    })
}

/// One trajectory with noise amplitude `cfg.epsilon`, replica stream 0.
pub fn simulate(
    initial: &State,
    cfg: &SimConfig,
    op: &BidomainOperator,
    model: &IonicModel,
    spectrum: &NoiseSpectrum,
    seed: u64,
) -> Result<TrajectoryRecord> {
    simulate_replica(initial, cfg, op, model, spectrum, seed, 0)
}

pub fn simulate_replica(
    initial: &State,
    cfg: &SimConfig,
    op: &BidomainOperator,
    model: &IonicModel,
    spectrum: &NoiseSpectrum,
    seed: u64,
    replica: u64,
) -> Result<TrajectoryRecord> {
    let mut rec = run(initial, cfg, op, model, spectrum, &[cfg.epsilon], seed, replica, false)?;
    Ok(rec.members.remove(0))
}

/// Runs one member per `ε`, all on the same Brownian path. Differences are
/// measured against the first member.
pub fn simulate_coupled(
    initial: &State,
    cfg: &SimConfig,
    op: &BidomainOperator,
    model: &IonicModel,
    spectrum: &NoiseSpectrum,
    epsilons: &[f64],
    seed: u64,
) -> Result<CoupledRecord> {
    simulate_coupled_replica(initial, cfg, op, model, spectrum, epsilons, seed, 0)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled_replica(
    initial: &State,
    cfg: &SimConfig,
    op: &BidomainOperator,
    model: &IonicModel,
    spectrum: &NoiseSpectrum,
    epsilons: &[f64],
    seed: u64,
    replica: u64,
) -> Result<CoupledRecord> {
    run(initial, cfg, op, model, spectrum, epsilons, seed, replica, false)
}

/// Integrates `U = u − εW_A` and reports `u = U + εW_A`, with `W_A` advanced
/// by the exact OU recursion on the same normals as [`simulate`]. Only the
/// exponential scheme is supported.
pub fn simulate_transformed(
    initial: &State,
    cfg: &SimConfig,
    op: &BidomainOperator,
    model: &IonicModel,
    spectrum: &NoiseSpectrum,
    seed: u64,
) -> Result<TrajectoryRecord> {
    if cfg.scheme != Scheme::ImexSpectral {
        return Err(Error::invalid("the transformed path needs the imex_spectral scheme"));
    }
    let mut rec = run(initial, cfg, op, model, spectrum, &[cfg.epsilon], seed, 0, true)?;
    Ok(rec.members.remove(0))
}
