//! Fixed-step explicit Runge-Kutta integration of rectified-flow ODEs.
//!
//! Inversion walks the grid upward (image latent at t = 0 toward noise at
//! t = 1), denoising walks it downward. Step size dt_i = t_i - t_{i-1} is
//! always positive; direction lives in the step formulas:
//!
//! inversion:  K_s = v(z + dt sum_{j<s} a_sj K_j, t_{i-1} + c_s dt),
//!             z' = z + dt sum_j b_j K_j
//! denoising:  K_s = v(z - dt sum_{j<s} a_sj K_j, t_i - c_s dt),
//!             z' = z - dt sum_j b_j K_j
//!
//! Every velocity evaluation is counted; a plain order-r solve costs r*N
//! evaluations, slope reuse costs N+1, Euler costs N.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::latent::LatentState;
use crate::linalg::ls_slope;
use crate::tableau::{validate_tableau, ButcherTableau};
use crate::velocity::{PromptEmbedding, VelocityError, VelocityField};

#[derive(Clone, Debug, PartialEq)]
pub enum SolverError {
    ZeroSteps,
    NodeCount { expected: usize, got: usize },
    NonMonotoneNodes { index: usize },
    NodeOutOfRange { index: usize, value: f64 },
    InvalidTableau { name: String, detail: String },
    NonFiniteState { step: usize, stage: usize },
    ReuseIncompatible { tableau: String },
    NonUniformGrid,
    ScheduleLength { expected: usize, got: usize },
    ScheduleShape,
    ScheduleMagnitude { norm: f64, bound: f64 },
    MissingClosedForm,
    TooFewStepSizes { got: usize },
    StepSizesNotHalving { index: usize },
    Saturated { h: f64, error: f64 },
    Velocity(VelocityError),
}

impl fmt::Display for SolverError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverError::ZeroSteps => write!(f, "time grid needs at least one step"),
            SolverError::NodeCount { expected, got } => {
                write!(f, "expected {expected} nodes, got {got}")
            }
            SolverError::NonMonotoneNodes { index } => {
                write!(f, "grid nodes must be strictly increasing (violated at index {index})")
            }
            SolverError::NodeOutOfRange { index, value } => {
                write!(f, "grid node {value} at index {index} outside [0, 1]")
            }
            SolverError::InvalidTableau { name, detail } => {
                write!(f, "tableau '{name}' is invalid: {detail}")
            }
            SolverError::NonFiniteState { step, stage } => {
                write!(f, "non-finite state at step {step}, stage {stage}")
            }
            SolverError::ReuseIncompatible { tableau } => write!(
                f,
                "slope reuse requires a 2-stage tableau with weights [0, 1]; '{tableau}' does not qualify"
            ),
            SolverError::NonUniformGrid => {
                write!(f, "perturbed integration requires a uniform time grid")
            }
            SolverError::ScheduleLength { expected, got } => {
                write!(f, "perturbation schedule holds {got} step entries, grid has {expected} steps")
            }
            SolverError::ScheduleShape => {
                write!(f, "perturbation shape does not match the state shape")
            }
            SolverError::ScheduleMagnitude { norm, bound } => {
                write!(f, "perturbation norm {norm} exceeds declared bound {bound}")
            }
            SolverError::MissingClosedForm => {
                write!(f, "order estimation needs a field with a closed-form solution")
            }
            SolverError::TooFewStepSizes { got } => {
                write!(f, "order estimation needs at least 3 step sizes, got {got}")
            }
            SolverError::StepSizesNotHalving { index } => {
                write!(f, "step sizes must halve between entries (violated at index {index})")
            }
            SolverError::Saturated { h, error } => write!(
                f,
                "error {error:e} at largest step {h} is at rounding level; order not estimable"
            ),
            SolverError::Velocity(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for SolverError {}

impl From<VelocityError> for SolverError {
    fn from(e: VelocityError) -> Self {
        SolverError::Velocity(e)
    }
}

/// Integration direction over the ascending grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Image toward noise: steps i = 1..N ascending.
    Invert,
    /// Noise toward image: steps i = N..1 descending.
    Denoise,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Invert => write!(f, "invert"),
            Direction::Denoise => write!(f, "denoise"),
        }
    }
}

/// Ascending time nodes t_0 < ... < t_N inside [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

/// Node layout for [`make_time_grid`].
#[derive(Clone, Debug, PartialEq)]
pub enum GridSchedule {
    Uniform,
    Explicit(Vec<f64>),
}

pub fn make_time_grid(n_steps: usize, schedule: GridSchedule) -> Result<TimeGrid, SolverError> {
    match schedule {
        GridSchedule::Uniform => TimeGrid::uniform(n_steps),
        GridSchedule::Explicit(nodes) => {
            if nodes.len() != n_steps + 1 {
                return Err(SolverError::NodeCount { expected: n_steps + 1, got: nodes.len() });
            }
            TimeGrid::explicit(nodes)
        }
    }
}

impl TimeGrid {
    /// t_i = i / n over [0, 1].
    pub fn uniform(n_steps: usize) -> Result<Self, SolverError> {
        if n_steps == 0 {
            return Err(SolverError::ZeroSteps);
        }
        let nodes = (0..=n_steps).map(|i| i as f64 / n_steps as f64).collect();
        Ok(TimeGrid { nodes })
    }

    pub fn explicit(nodes: Vec<f64>) -> Result<Self, SolverError> {
        if nodes.len() < 2 {
            return Err(SolverError::ZeroSteps);
        }
        for (i, &v) in nodes.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(SolverError::NodeOutOfRange { index: i, value: v });
            }
            if i > 0 && v <= nodes[i - 1] {
                return Err(SolverError::NonMonotoneNodes { index: i });
            }
        }
        Ok(TimeGrid { nodes })
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// dt_i = t_i - t_{i-1} for step i in 1..=N; always positive.
    pub fn dt(&self, i: usize) -> f64 {
        self.nodes[i] - self.nodes[i - 1]
    }

    pub fn start(&self) -> f64 {
        self.nodes[0]
    }

    pub fn end(&self) -> f64 {
        *self.nodes.last().expect("grid is nonempty")
    }

    pub fn span(&self) -> f64 {
        self.end() - self.start()
    }

    pub fn is_uniform(&self, rel_tol: f64) -> bool {
        let h = self.span() / self.n_steps() as f64;
        (1..=self.n_steps()).all(|i| libm::fabs(self.dt(i) - h) <= rel_tol * h)
    }
}

/// Outcome of one directional solve.
#[derive(Clone, Debug)]
pub struct SolveResult {
    pub final_state: LatentState,
    /// (t, state) including the initial point, recorded only when requested.
    pub trajectory: Option<Vec<(f64, LatentState)>>,
    /// Slopes K_1..K_r of the last executed step.
    pub slopes_last_step: Vec<LatentState>,
    /// Velocity-field evaluations consumed.
    pub nfe: u64,
}

fn check_tableau(tab: &ButcherTableau) -> Result<(), SolverError> {
    let violations = validate_tableau(tab);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(SolverError::InvalidTableau {
            name: tab.name().into(),
            detail: alloc::format!("{}", violations[0]),
        })
    }
}

/// One explicit RK step in either direction. `preset_k1` short-circuits the
/// first stage for slope reuse; only actual evaluations are counted.
fn rk_step_core<F: VelocityField + ?Sized>(
    field: &F,
    z: &LatentState,
    i: usize,
    grid: &TimeGrid,
    tab: &ButcherTableau,
    condition: Option<&PromptEmbedding>,
    guidance: f64,
    direction: Direction,
    preset_k1: Option<LatentState>,
) -> Result<(LatentState, Vec<LatentState>, u64), SolverError> {
    let r = tab.r();
    let dt = grid.dt(i);
    let (sign, base_t) = match direction {
        Direction::Invert => (1.0, grid.node(i - 1)),
        Direction::Denoise => (-1.0, grid.node(i)),
    };

    let mut slopes: Vec<LatentState> = Vec::with_capacity(r);
    let mut nfe = 0u64;
    for s in 0..r {
        if s == 0 {
            if let Some(k1) = preset_k1.clone() {
                slopes.push(k1);
                continue;
            }
        }
        let mut arg = z.clone();
        for (j, k) in slopes.iter().enumerate().take(s) {
            let a = tab.a(s, j);
            if a != 0.0 {
                arg.axpy(sign * dt * a, k);
            }
        }
        if !arg.is_finite() {
            return Err(SolverError::NonFiniteState { step: i, stage: s + 1 });
        }
        let t_stage = base_t + sign * tab.c()[s] * dt;
        let k = field.eval(&arg, t_stage, condition, guidance, None)?;
        nfe += 1;
        if !k.is_finite() {
            return Err(SolverError::NonFiniteState { step: i, stage: s + 1 });
        }
        slopes.push(k);
    }

    // Increment function: sum_j b_j K_j, applied once with the signed step.
    let mut increment = LatentState::zeros(z.shape());
    for (j, k) in slopes.iter().enumerate() {
        let b = tab.b()[j];
        if b != 0.0 {
            increment.axpy(b, k);
        }
    }
    let mut z_next = z.clone();
    z_next.axpy(sign * dt, &increment);
    if !z_next.is_finite() {
        return Err(SolverError::NonFiniteState { step: i, stage: r });
    }
    Ok((z_next, slopes, nfe))
}

/// One inversion step: advances the state from t_{i-1} to t_i.
pub fn rk_invert_step<F: VelocityField + ?Sized>(
    field: &F,
    z_prev: &LatentState,
    i: usize,
    grid: &TimeGrid,
    tab: &ButcherTableau,
    condition: Option<&PromptEmbedding>,
    guidance: f64,
) -> Result<(LatentState, Vec<LatentState>, u64), SolverError> {
    check_tableau(tab)?;
    rk_step_core(field, z_prev, i, grid, tab, condition, guidance, Direction::Invert, None)
}

/// One denoising step: advances the state from t_i to t_{i-1}.
pub fn rk_denoise_step<F: VelocityField + ?Sized>(
    field: &F,
    z_cur: &LatentState,
    i: usize,
    grid: &TimeGrid,
    tab: &ButcherTableau,
    condition: Option<&PromptEmbedding>,
    guidance: f64,
) -> Result<(LatentState, Vec<LatentState>, u64), SolverError> {
    check_tableau(tab)?;
    rk_step_core(field, z_cur, i, grid, tab, condition, guidance, Direction::Denoise, None)
}

/// Baseline sampler: z_{t_{i-1}} = z_{t_i} + (t_{i-1} - t_i) v(z_{t_i}, t_i),
/// which is the 1-stage tableau walked down the grid.
pub fn euler_denoise<F: VelocityField + ?Sized>(
    field: &F,
    z_n: &LatentState,
    grid: &TimeGrid,
    condition: Option<&PromptEmbedding>,
    guidance: f64,
) -> Result<SolveResult, SolverError> {
    let tab = crate::tableau::registry_get("euler").expect("euler is a registry tableau");
    solve(field, z_n, grid, Direction::Denoise, &tab, condition, guidance, false, false)
}

/// Full directional solve with optional slope reuse and trajectory recording.
#[allow(clippy::too_many_arguments)]
pub fn solve<F: VelocityField + ?Sized>(
    field: &F,
    z_init: &LatentState,
    grid: &TimeGrid,
    direction: Direction,
    tab: &ButcherTableau,
    condition: Option<&PromptEmbedding>,
    guidance: f64,
    reuse: bool,
    record_trajectory: bool,
) -> Result<SolveResult, SolverError> {
    check_tableau(tab)?;
    if reuse && !tab.supports_reuse() {
        return Err(SolverError::ReuseIncompatible { tableau: tab.name().into() });
    }

    let n = grid.n_steps();
    let start_t = match direction {
        Direction::Invert => grid.start(),
        Direction::Denoise => grid.end(),
    };
    let mut trajectory = if record_trajectory {
        let mut v = Vec::with_capacity(n + 1);
        v.push((start_t, z_init.clone()));
        Some(v)
    } else {
        None
    };

    let mut z = z_init.clone();
    let mut nfe = 0u64;
    let mut carry: Option<LatentState> = None;
    let mut last_slopes = Vec::new();

    let run_step = |z: &LatentState,
                        i: usize,
                        carry: Option<LatentState>|
     -> Result<(LatentState, Vec<LatentState>, u64), SolverError> {
        rk_step_core(field, z, i, grid, tab, condition, guidance, direction, carry)
    };

    match direction {
        Direction::Invert => {
            for i in 1..=n {
                let (z_next, slopes, used) = run_step(&z, i, carry.take())?;
                if reuse {
                    carry = Some(slopes[1].clone());
                }
                nfe += used;
                z = z_next;
                last_slopes = slopes;
                if let Some(tr) = trajectory.as_mut() {
                    tr.push((grid.node(i), z.clone()));
                }
            }
        }
        Direction::Denoise => {
            for i in (1..=n).rev() {
                let (z_next, slopes, used) = run_step(&z, i, carry.take())?;
                if reuse {
                    carry = Some(slopes[1].clone());
                }
                nfe += used;
                z = z_next;
                last_slopes = slopes;
                if let Some(tr) = trajectory.as_mut() {
                    tr.push((grid.node(i - 1), z.clone()));
                }
            }
        }
    }

    let expected = if reuse { n as u64 + 1 } else { (tab.r() * n) as u64 };
    assert_eq!(nfe, expected, "evaluation count audit failed");

    Ok(SolveResult { final_state: z, trajectory, slopes_last_step: last_slopes, nfe })
}

/// Invert-then-denoise reconstruction metrics.
#[derive(Clone, Debug)]
pub struct RoundtripReport {
    pub noise: LatentState,
    pub reconstructed: LatentState,
    pub l2_error: f64,
    pub rel_error: f64,
    pub nfe_total: u64,
}

pub fn roundtrip<F: VelocityField + ?Sized>(
    field: &F,
    z0: &LatentState,
    grid: &TimeGrid,
    tab: &ButcherTableau,
    condition: Option<&PromptEmbedding>,
    guidance: f64,
    reuse: bool,
) -> Result<RoundtripReport, SolverError> {
    let up = solve(field, z0, grid, Direction::Invert, tab, condition, guidance, reuse, false)?;
    let down =
        solve(field, &up.final_state, grid, Direction::Denoise, tab, condition, guidance, reuse, false)?;
    let l2_error = down.final_state.dist_l2(z0);
    let rel_error = l2_error / z0.norm_l2().max(1e-30);
    Ok(RoundtripReport {
        noise: up.final_state,
        reconstructed: down.final_state,
        l2_error,
        rel_error,
        nfe_total: up.nfe + down.nfe,
    })
}

/// Empirical convergence order from a halving step-size sweep.
#[derive(Clone, Debug)]
pub struct OrderEstimate {
    pub empirical_order: f64,
    /// (step size actually used, denoising error against the closed form).
    pub errors: Vec<(f64, f64)>,
}

/// Saturation threshold: errors below this at the largest step are rounding
/// noise and carry no order information.
pub const SATURATION_FLOOR: f64 = 1e2 * f64::EPSILON;

/// Denoise from the closed-form state at t = 1 back to t = 0 for every step
/// size and fit the log-log error slope.
pub fn estimate_order<F: VelocityField + ?Sized>(
    field: &F,
    tab: &ButcherTableau,
    z0: &LatentState,
    h_list: &[f64],
) -> Result<OrderEstimate, SolverError> {
    if h_list.len() < 3 {
        return Err(SolverError::TooFewStepSizes { got: h_list.len() });
    }
    for (i, pair) in h_list.windows(2).enumerate() {
        if libm::fabs(pair[1] / pair[0] - 0.5) > 1e-9 {
            return Err(SolverError::StepSizesNotHalving { index: i + 1 });
        }
    }
    let z_end = field.exact_solution(z0, 1.0).ok_or(SolverError::MissingClosedForm)?;

    let mut errors = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let n = libm::round(1.0 / h).max(1.0) as usize;
        let grid = TimeGrid::uniform(n)?;
        let res = solve(field, &z_end, &grid, Direction::Denoise, tab, None, 1.0, false, false)?;
        let err = res.final_state.dist_l2(z0);
        errors.push((1.0 / n as f64, err));
    }

    if errors[0].1 < SATURATION_FLOOR || errors.iter().any(|&(_, e)| e == 0.0) {
        return Err(SolverError::Saturated { h: errors[0].0, error: errors[0].1 });
    }

    let log_h: Vec<f64> = errors.iter().map(|&(h, _)| libm::log(h)).collect();
    let log_e: Vec<f64> = errors.iter().map(|&(_, e)| libm::log(e)).collect();
    Ok(OrderEstimate { empirical_order: ls_slope(&log_h, &log_e), errors })
}

/// Perturbations injected into a denoising solve: one initial-state kick and
/// one in-increment kick per step.
#[derive(Clone, Debug)]
pub struct PerturbationSchedule {
    pub delta_init: LatentState,
    pub per_step: Vec<LatentState>,
    pub magnitude_bound: f64,
}

impl PerturbationSchedule {
    /// Checked constructor: every perturbation norm must respect the bound.
    pub fn new(
        delta_init: LatentState,
        per_step: Vec<LatentState>,
        magnitude_bound: f64,
    ) -> Result<Self, SolverError> {
        let slack = magnitude_bound * (1.0 + 1e-12) + 1e-300;
        for d in core::iter::once(&delta_init).chain(per_step.iter()) {
            let n = d.norm_l2();
            if n > slack {
                return Err(SolverError::ScheduleMagnitude { norm: n, bound: magnitude_bound });
            }
        }
        Ok(PerturbationSchedule { delta_init, per_step, magnitude_bound })
    }

    pub fn zero(shape: crate::latent::Shape, n_steps: usize) -> Self {
        PerturbationSchedule {
            delta_init: LatentState::zeros(shape),
            per_step: (0..n_steps).map(|_| LatentState::zeros(shape)).collect(),
            magnitude_bound: 0.0,
        }
    }

    /// Largest per-step perturbation norm.
    pub fn max_step_norm(&self) -> f64 {
        self.per_step.iter().map(|d| d.norm_l2()).fold(0.0, f64::max)
    }

    pub fn max_step_norm_linf(&self) -> f64 {
        self.per_step.iter().map(|d| d.norm_linf()).fold(0.0, f64::max)
    }
}

/// Denoising solve with the perturbed recursion
/// z'_{t_{i-1}} = z'_{t_i} + h [Phi_i(z'_{t_i}) + delta_i], starting from
/// z'_{t_N} = z_{t_N} + delta_init. Requires a uniform grid.
pub fn perturbed_solve<F: VelocityField + ?Sized>(
    field: &F,
    z_init: &LatentState,
    grid: &TimeGrid,
    tab: &ButcherTableau,
    pert: &PerturbationSchedule,
    condition: Option<&PromptEmbedding>,
    guidance: f64,
) -> Result<SolveResult, SolverError> {
    check_tableau(tab)?;
    if !grid.is_uniform(1e-9) {
        return Err(SolverError::NonUniformGrid);
    }
    let n = grid.n_steps();
    if pert.per_step.len() != n {
        return Err(SolverError::ScheduleLength { expected: n, got: pert.per_step.len() });
    }
    if pert.delta_init.shape() != z_init.shape()
        || pert.per_step.iter().any(|d| d.shape() != z_init.shape())
    {
        return Err(SolverError::ScheduleShape);
    }

    let mut z = z_init.clone();
    z.axpy(1.0, &pert.delta_init);
    let mut nfe = 0u64;
    let mut last_slopes = Vec::new();
    for i in (1..=n).rev() {
        let (mut z_next, slopes, used) =
            rk_step_core(field, &z, i, grid, tab, condition, guidance, Direction::Denoise, None)?;
        z_next.axpy(grid.dt(i), &pert.per_step[i - 1]);
        if !z_next.is_finite() {
            return Err(SolverError::NonFiniteState { step: i, stage: tab.r() });
        }
        nfe += used;
        z = z_next;
        last_slopes = slopes;
    }
    Ok(SolveResult { final_state: z, trajectory: None, slopes_last_step: last_slopes, nfe })
}
