//! End-to-end procedures: reconstruction, semantic editing with cached
//! decoupled attention, the fidelity-ordering experiment and the
//! perturbation-bound experiment.
//!
//! Editing follows the two-stage recipe exactly: the inversion stage walks
//! the grid upward with a per-evaluation counter c = N*r, N*r-1, ..., 1 and
//! snapshots attention whenever c is in the plan's index list; the editing
//! stage starts from the inverted noise, counts c = 1, 2, ..., N*r upward and
//! merges the matching snapshot back in. Index k therefore pairs the
//! k-th-from-last inversion evaluation with the k-th editing evaluation.
//! States update stagewise (z += b_s dt K_s after every stage), which sums to
//! the same increment as the step-level formula.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::attention::{
    cache_hook, AttentionCache, AttentionError, BlockScope, HookMode,
    ManipulationPlan, RecordingHook, RegionOp, RegionOps, ResponseMap, RunRecord,
};
use crate::latent::{LatentState, Shape};
use crate::metrics::{latent_metrics, MetricReport, MetricsError};
use crate::mmdit::ToyMMDiT;
use crate::rng::SeededRng;
use crate::solver::{
    perturbed_solve, roundtrip, solve, Direction, PerturbationSchedule, SolverError, TimeGrid,
};
use crate::tableau::ButcherTableau;
use crate::velocity::{PromptEmbedding, VelocityError, VelocityField};

/// Amplification factor applied to the Lipschitz constant in the
/// perturbation bound: Lambda = (41/24) L at step sizes h <= 1/L.
pub const LAMBDA_FACTOR: f64 = 41.0 / 24.0;

#[derive(Clone, Debug, PartialEq)]
pub enum PipelineError {
    Solver(SolverError),
    Velocity(VelocityError),
    Attention(AttentionError),
    Metrics(MetricsError),
    BadConfig { message: String },
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Solver(e) => write!(f, "{e}"),
            PipelineError::Velocity(e) => write!(f, "{e}"),
            PipelineError::Attention(e) => write!(f, "{e}"),
            PipelineError::Metrics(e) => write!(f, "{e}"),
            PipelineError::BadConfig { message } => write!(f, "bad configuration: {message}"),
        }
    }
}

impl core::error::Error for PipelineError {}

impl From<SolverError> for PipelineError {
    fn from(e: SolverError) -> Self {
        PipelineError::Solver(e)
    }
}

impl From<VelocityError> for PipelineError {
    fn from(e: VelocityError) -> Self {
        PipelineError::Velocity(e)
    }
}

impl From<AttentionError> for PipelineError {
    fn from(e: AttentionError) -> Self {
        PipelineError::Attention(e)
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        PipelineError::Metrics(e)
    }
}

/// Reconstruction (invert then denoise) with quality metrics against the
/// source latent.
#[derive(Clone, Debug)]
pub struct ReconstructionReport {
    pub noise: LatentState,
    pub reconstructed: LatentState,
    pub metrics: MetricReport,
    pub nfe_total: u64,
}

pub fn reconstruct<F: VelocityField + ?Sized>(
    field: &F,
    z0: &LatentState,
    grid: &TimeGrid,
    tab: &ButcherTableau,
    condition: Option<&PromptEmbedding>,
    guidance: f64,
    reuse: bool,
) -> Result<ReconstructionReport, PipelineError> {
    let rt = roundtrip(field, z0, grid, tab, condition, guidance, reuse)?;
    let metrics = latent_metrics(z0, &rt.reconstructed)?;
    Ok(ReconstructionReport {
        noise: rt.noise,
        reconstructed: rt.reconstructed,
        metrics,
        nfe_total: rt.nfe_total,
    })
}

/// Hook wiring for one stagewise pass.
enum StagePass<'a> {
    Plain,
    Save { cache: &'a mut AttentionCache, plan: &'a ManipulationPlan },
    Manipulate { cache: &'a mut AttentionCache, plan: &'a ManipulationPlan },
    RecordAll { record: &'a mut RunRecord },
}

/// One direction of the editing recipe, stage-accumulated, with the
/// per-evaluation counter driving hook activation.
fn stagewise_pass<F: VelocityField + ?Sized>(
    field: &F,
    z_start: &LatentState,
    grid: &TimeGrid,
    tab: &ButcherTableau,
    prompt: &PromptEmbedding,
    guidance: f64,
    direction: Direction,
    mut pass: StagePass<'_>,
) -> Result<(LatentState, u64), PipelineError> {
    let n = grid.n_steps();
    let r = tab.r();
    let mut counter: u64 = match direction {
        Direction::Invert => (n * r) as u64,
        Direction::Denoise => 1,
    };
    let mut nfe = 0u64;
    let mut z = z_start.clone();

    let step_indices: Vec<usize> = match direction {
        Direction::Invert => (1..=n).collect(),
        Direction::Denoise => (1..=n).rev().collect(),
    };
    for i in step_indices {
        let dt = grid.dt(i);
        let (sign, base_t) = match direction {
            Direction::Invert => (1.0, grid.node(i - 1)),
            Direction::Denoise => (-1.0, grid.node(i)),
        };
        let mut slopes: Vec<LatentState> = Vec::with_capacity(r);
        let mut z_next = z.clone();
        for s in 0..r {
            let mut arg = z.clone();
            for (j, k) in slopes.iter().enumerate().take(s) {
                let a = tab.a(s, j);
                if a != 0.0 {
                    arg.axpy(sign * dt * a, k);
                }
            }
            let t_stage = base_t + sign * tab.c()[s] * dt;
            let k = match &mut pass {
                StagePass::Plain => field.eval(&arg, t_stage, Some(prompt), guidance, None)?,
                StagePass::Save { cache, plan } if plan.applies_at(counter) => {
                    let mut hook = cache_hook(cache, counter, HookMode::Save, plan);
                    field.eval(&arg, t_stage, Some(prompt), guidance, Some(&mut hook))?
                }
                StagePass::Manipulate { cache, plan } if plan.applies_at(counter) => {
                    let mut hook = cache_hook(cache, counter, HookMode::Manipulate, plan);
                    field.eval(&arg, t_stage, Some(prompt), guidance, Some(&mut hook))?
                }
                StagePass::Save { .. } | StagePass::Manipulate { .. } => {
                    field.eval(&arg, t_stage, Some(prompt), guidance, None)?
                }
                StagePass::RecordAll { record } => {
                    record.begin_eval();
                    let mut hook = RecordingHook::new(record);
                    field.eval(&arg, t_stage, Some(prompt), guidance, Some(&mut hook))?
                }
            };
            nfe += 1;
            if !k.is_finite() {
                return Err(SolverError::NonFiniteState { step: i, stage: s + 1 }.into());
            }
            z_next.axpy(sign * dt * tab.b()[s], &k);
            slopes.push(k);
            counter = match direction {
                Direction::Invert => counter - 1,
                Direction::Denoise => counter + 1,
            };
        }
        z = z_next;
        if !z.is_finite() {
            return Err(SolverError::NonFiniteState { step: i, stage: r }.into());
        }
    }
    Ok((z, nfe))
}

/// Configuration of one semantic edit.
#[derive(Clone, Debug)]
pub struct EditConfig {
    pub source_prompt: Vec<u32>,
    pub target_prompt: Vec<u32>,
    pub tableau: ButcherTableau,
    pub steps: usize,
    pub plan: ManipulationPlan,
    pub guidance_invert: f64,
    pub guidance_edit: f64,
}

impl EditConfig {
    /// Default guidance split: 1.0 on the inversion branch, 3.0 on the
    /// editing branch.
    pub fn new(
        source_prompt: Vec<u32>,
        target_prompt: Vec<u32>,
        tableau: ButcherTableau,
        steps: usize,
    ) -> Self {
        EditConfig {
            source_prompt,
            target_prompt,
            tableau,
            steps,
            plan: ManipulationPlan::editing_default(),
            guidance_invert: 1.0,
            guidance_edit: 3.0,
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.steps == 0 {
            return Err(PipelineError::BadConfig { message: "steps must be >= 1".into() });
        }
        let max_fe = (self.steps * self.tableau.r()) as u64;
        for &d in &self.plan.d_list {
            if d == 0 || d > max_fe {
                return Err(PipelineError::BadConfig {
                    message: format!("d_list entry {d} outside 1..={max_fe}"),
                });
            }
        }
        Ok(())
    }
}

/// Outcome of one edit. `deviation_from_source` compares the edited latent
/// against the same-solver reconstruction so solver truncation error cancels
/// and only the editing-branch changes remain.
#[derive(Clone, Debug)]
pub struct EditReport {
    pub edited: LatentState,
    pub reconstruction: LatentState,
    pub noise: LatentState,
    pub deviation_from_source: f64,
    /// Inversion plus editing evaluations; the reconstruction pass is
    /// reporting machinery and is not counted.
    pub nfe_total: u64,
}

pub fn edit(model: &ToyMMDiT, z0: &LatentState, cfg: &EditConfig) -> Result<EditReport, PipelineError> {
    cfg.validate()?;
    let source = model.embed_prompt(&cfg.source_prompt)?;
    let target = model.embed_prompt(&cfg.target_prompt)?;
    let grid = TimeGrid::uniform(cfg.steps)?;
    let mut cache = AttentionCache::new();

    let (noise, nfe_invert) = stagewise_pass(
        model,
        z0,
        &grid,
        &cfg.tableau,
        &source,
        cfg.guidance_invert,
        Direction::Invert,
        StagePass::Save { cache: &mut cache, plan: &cfg.plan },
    )?;
    let (reconstruction, _) = stagewise_pass(
        model,
        &noise,
        &grid,
        &cfg.tableau,
        &source,
        cfg.guidance_invert,
        Direction::Denoise,
        StagePass::Plain,
    )?;
    let (edited, nfe_edit) = stagewise_pass(
        model,
        &noise,
        &grid,
        &cfg.tableau,
        &target,
        cfg.guidance_edit,
        Direction::Denoise,
        StagePass::Manipulate { cache: &mut cache, plan: &cfg.plan },
    )?;

    let deviation_from_source = edited.dist_l2(&reconstruction);
    Ok(EditReport {
        edited,
        reconstruction,
        noise,
        deviation_from_source,
        nfe_total: nfe_invert + nfe_edit,
    })
}

/// Run the response-map recipe: denoise a seeded noise latent while recording
/// every layer's cross-attention quadrants, then aggregate per word.
#[allow(clippy::too_many_arguments)]
pub fn response_map_run(
    model: &ToyMMDiT,
    prompt_tokens: &[u32],
    word_indices: &[usize],
    steps: usize,
    tab: &ButcherTableau,
    guidance: f64,
    seed: u64,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<ResponseMap>, PipelineError> {
    let prompt = model.embed_prompt(prompt_tokens)?;
    let grid = TimeGrid::uniform(steps)?;
    let mut rng = SeededRng::new(seed);
    let z_noise = rng.normal_latent(model.latent_shape());

    let mut record = RunRecord::new();
    stagewise_pass(
        model,
        &z_noise,
        &grid,
        tab,
        &prompt,
        guidance,
        Direction::Denoise,
        StagePass::RecordAll { record: &mut record },
    )?;

    let cfg = model.config();
    Ok(crate::attention::aggregate_response_maps(
        &record,
        word_indices,
        cfg.grid_h,
        cfg.grid_w,
        out_h,
        out_w,
    )?)
}

/// Base configuration for the fidelity-ordering experiment.
#[derive(Clone, Debug)]
pub struct FidelityConfig {
    pub n_cases: usize,
    pub steps: usize,
    pub tableau: ButcherTableau,
    pub guidance_invert: f64,
    pub guidance_edit: f64,
    pub prompt_len: usize,
    pub scope: BlockScope,
    pub d_list: Vec<u64>,
    pub seed: u64,
}

impl FidelityConfig {
    pub fn new(tableau: ButcherTableau, n_cases: usize, steps: usize, seed: u64) -> Self {
        FidelityConfig {
            n_cases,
            steps,
            tableau,
            guidance_invert: 1.0,
            guidance_edit: 3.0,
            prompt_len: 6,
            scope: BlockScope::all(),
            d_list: alloc::vec![1],
            seed,
        }
    }
}

/// Deviations of one prompt pair under the three plans.
#[derive(Clone, Debug, PartialEq)]
pub struct FidelityCase {
    pub case_index: usize,
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub dev_none: f64,
    pub dev_mean: f64,
    pub dev_replace: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct FidelitySummary {
    /// Fraction of evaluated cases with dev(replace) <= dev(none).
    pub win_replace_vs_none: f64,
    /// Fraction with dev(replace) <= dev(mean).
    pub win_replace_vs_mean: f64,
    /// Fraction with the full ordering dev(replace) <= dev(mean) <= dev(none).
    pub win_mean_between: f64,
    /// Cases entering the win rates (degenerate ones are excluded).
    pub evaluated: usize,
    pub cases: Vec<FidelityCase>,
}

/// Deviations of a single (source, target) pair under plans none / mean-all /
/// replace-all. The inversion and reconstruction are shared across plans.
pub fn fidelity_case(
    model: &ToyMMDiT,
    cfg: &FidelityConfig,
    case_index: usize,
    z0: &LatentState,
    source_tokens: &[u32],
    target_tokens: &[u32],
) -> Result<FidelityCase, PipelineError> {
    let source = model.embed_prompt(source_tokens)?;
    let target = model.embed_prompt(target_tokens)?;
    let grid = TimeGrid::uniform(cfg.steps)?;

    let save_plan = ManipulationPlan {
        ops: RegionOps::splat(RegionOp::Replace),
        scope: cfg.scope.clone(),
        d_list: cfg.d_list.clone(),
    };
    let mut cache = AttentionCache::new();
    let (noise, _) = stagewise_pass(
        model,
        z0,
        &grid,
        &cfg.tableau,
        &source,
        cfg.guidance_invert,
        Direction::Invert,
        StagePass::Save { cache: &mut cache, plan: &save_plan },
    )?;
    let (recon, _) = stagewise_pass(
        model,
        &noise,
        &grid,
        &cfg.tableau,
        &source,
        cfg.guidance_invert,
        Direction::Denoise,
        StagePass::Plain,
    )?;

    let mut run_plan = |ops: RegionOps| -> Result<f64, PipelineError> {
        let plan =
            ManipulationPlan { ops, scope: cfg.scope.clone(), d_list: cfg.d_list.clone() };
        let (edited, _) = if plan.is_empty() {
            stagewise_pass(
                model,
                &noise,
                &grid,
                &cfg.tableau,
                &target,
                cfg.guidance_edit,
                Direction::Denoise,
                StagePass::Plain,
            )?
        } else {
            stagewise_pass(
                model,
                &noise,
                &grid,
                &cfg.tableau,
                &target,
                cfg.guidance_edit,
                Direction::Denoise,
                StagePass::Manipulate { cache: &mut cache, plan: &plan },
            )?
        };
        Ok(edited.dist_l2(&recon))
    };

    let dev_none = run_plan(RegionOps::none())?;
    let dev_mean = run_plan(RegionOps::splat(RegionOp::Mean))?;
    let dev_replace = run_plan(RegionOps::splat(RegionOp::Replace))?;

    let degenerate = source_tokens == target_tokens
        || (dev_none == 0.0 && dev_mean == 0.0 && dev_replace == 0.0);
    Ok(FidelityCase {
        case_index,
        source: source_tokens.to_vec(),
        target: target_tokens.to_vec(),
        dev_none,
        dev_mean,
        dev_replace,
        degenerate,
    })
}

/// Seeded one-token-edit cases scored under the three plans.
pub fn fidelity_ordering_experiment(
    model: &ToyMMDiT,
    cfg: &FidelityConfig,
) -> Result<FidelitySummary, PipelineError> {
    if cfg.n_cases == 0 {
        return Err(PipelineError::BadConfig { message: "n_cases must be >= 1".into() });
    }
    if cfg.prompt_len == 0 || cfg.prompt_len > model.config().n_text {
        return Err(PipelineError::BadConfig {
            message: format!(
                "prompt_len {} outside 1..={}",
                cfg.prompt_len,
                model.config().n_text
            ),
        });
    }

    let mut master = SeededRng::new(cfg.seed);
    let mut cases = Vec::with_capacity(cfg.n_cases);
    for case_index in 0..cfg.n_cases {
        let mut rng = master.split();
        let z0 = rng.normal_latent(model.latent_shape());
        let source: Vec<u32> =
            (0..cfg.prompt_len).map(|_| rng.next_below(crate::mmdit::VOCAB_SIZE as u64) as u32).collect();
        let mut target = source.clone();
        let pos = rng.next_below(cfg.prompt_len as u64) as usize;
        let mut replacement = rng.next_below(crate::mmdit::VOCAB_SIZE as u64) as u32;
        if replacement == target[pos] {
            replacement = (replacement + 1) % crate::mmdit::VOCAB_SIZE;
        }
        target[pos] = replacement;
        cases.push(fidelity_case(model, cfg, case_index, &z0, &source, &target)?);
    }

    let evaluated: Vec<&FidelityCase> = cases.iter().filter(|c| !c.degenerate).collect();
    let count = evaluated.len().max(1) as f64;
    let win_replace_vs_none =
        evaluated.iter().filter(|c| c.dev_replace <= c.dev_none).count() as f64 / count;
    let win_replace_vs_mean =
        evaluated.iter().filter(|c| c.dev_replace <= c.dev_mean).count() as f64 / count;
    let win_mean_between = evaluated
        .iter()
        .filter(|c| c.dev_replace <= c.dev_mean && c.dev_mean <= c.dev_none)
        .count() as f64
        / count;

    Ok(FidelitySummary {
        win_replace_vs_none,
        win_replace_vs_mean,
        win_mean_between,
        evaluated: evaluated.len(),
        cases,
    })
}

/// Right-hand side of the perturbation inequality:
/// e^{Lambda T} |d0| + (e^{Lambda T} - 1) / Lambda * max_i |d_i|.
pub fn perturbation_bound(lambda: f64, t_span: f64, delta0_norm: f64, max_step_norm: f64) -> f64 {
    if lambda == 0.0 {
        return delta0_norm + t_span * max_step_norm;
    }
    let growth = libm::exp(lambda * t_span);
    growth * delta0_norm + (growth - 1.0) / lambda * max_step_norm
}

#[derive(Clone, Debug)]
pub struct BoundCheckConfig {
    pub shape: Shape,
    pub n_steps: usize,
    pub tableau: ButcherTableau,
    pub n_trials: usize,
    pub delta_max: f64,
    pub seed: u64,
    /// Overrides the field's own Lipschitz constant when set; a zero constant
    /// (constant-velocity fields) falls back to the nominal L = 1.
    pub lipschitz_override: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundTrial {
    pub observed_l2: f64,
    pub bound_l2: f64,
    pub ratio_l2: f64,
    pub observed_linf: f64,
    pub bound_linf: f64,
    pub ratio_linf: f64,
}

#[derive(Clone, Debug)]
pub struct BoundCheckReport {
    pub violations: u64,
    pub max_ratio: f64,
    pub lipschitz: f64,
    pub lambda: f64,
    pub h: f64,
    pub t_span: f64,
    pub trials: Vec<BoundTrial>,
}

/// Draw a perturbation with l2 norm u * delta_max, u uniform in [0, 1).
fn draw_delta(rng: &mut SeededRng, shape: Shape, delta_max: f64) -> LatentState {
    let mut d = rng.normal_latent(shape);
    let norm = d.norm_l2();
    let target = rng.next_f64() * delta_max;
    let scale = if norm == 0.0 { 0.0 } else { target / norm };
    for v in d.data_mut() {
        *v *= scale;
    }
    d
}

/// Seeded perturbation trials against the amplified-Lipschitz bound.
/// Violations count trials whose observed l2 error exceeds the bound.
pub fn bound_check_experiment<F: VelocityField + ?Sized>(
    field: &F,
    cfg: &BoundCheckConfig,
    condition: Option<&PromptEmbedding>,
    guidance: f64,
) -> Result<BoundCheckReport, PipelineError> {
    let l_raw = cfg
        .lipschitz_override
        .or_else(|| field.lipschitz())
        .ok_or_else(|| PipelineError::BadConfig {
            message: "bound check needs a Lipschitz constant (field or override)".into(),
        })?;
    let lipschitz = if l_raw == 0.0 { 1.0 } else { l_raw };
    if lipschitz < 0.0 || !lipschitz.is_finite() {
        return Err(PipelineError::BadConfig {
            message: format!("Lipschitz constant must be finite and nonnegative, got {lipschitz}"),
        });
    }

    let grid = TimeGrid::uniform(cfg.n_steps)?;
    let t_span = grid.span();
    let h = t_span / cfg.n_steps as f64;
    if h > 1.0 / lipschitz * (1.0 + 1e-12) {
        return Err(PipelineError::BadConfig {
            message: format!(
                "step size {h} exceeds h0 = 1/L = {}; the amplified constant only covers h <= 1/L",
                1.0 / lipschitz
            ),
        });
    }
    let lambda = LAMBDA_FACTOR * lipschitz;

    let mut rng = SeededRng::new(cfg.seed);
    let z_init = rng.normal_latent(cfg.shape);
    let clean = solve(
        field,
        &z_init,
        &grid,
        Direction::Denoise,
        &cfg.tableau,
        condition,
        guidance,
        false,
        false,
    )?;

    let mut trials = Vec::with_capacity(cfg.n_trials);
    let mut violations = 0u64;
    let mut max_ratio: f64 = 0.0;
    for _ in 0..cfg.n_trials {
        let delta_init = draw_delta(&mut rng, cfg.shape, cfg.delta_max);
        let per_step: Vec<LatentState> =
            (0..cfg.n_steps).map(|_| draw_delta(&mut rng, cfg.shape, cfg.delta_max)).collect();
        let schedule = PerturbationSchedule::new(delta_init, per_step, cfg.delta_max)?;
        let noisy =
            perturbed_solve(field, &z_init, &grid, &cfg.tableau, &schedule, condition, guidance)?;

        let observed_l2 = noisy.final_state.dist_l2(&clean.final_state);
        let bound_l2 = perturbation_bound(
            lambda,
            t_span,
            schedule.delta_init.norm_l2(),
            schedule.max_step_norm(),
        );
        let ratio_l2 = if bound_l2 == 0.0 { 0.0 } else { observed_l2 / bound_l2 };

        let observed_linf = noisy.final_state.dist_linf(&clean.final_state);
        let bound_linf = perturbation_bound(
            lambda,
            t_span,
            schedule.delta_init.norm_linf(),
            schedule.max_step_norm_linf(),
        );
        let ratio_linf = if bound_linf == 0.0 { 0.0 } else { observed_linf / bound_linf };

        if ratio_l2 > 1.0 {
            violations += 1;
        }
        if ratio_l2 > max_ratio {
            max_ratio = ratio_l2;
        }
        trials.push(BoundTrial {
            observed_l2,
            bound_l2,
            ratio_l2,
            observed_linf,
            bound_linf,
            ratio_linf,
        });
    }

    Ok(BoundCheckReport { violations, max_ratio, lipschitz, lambda, h, t_span, trials })
}
