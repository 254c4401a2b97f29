//! Levenberg-Marquardt solver over a window factor graph.
//!
//! Variables are keyframe states (15 tangent DOF each) and landmark points
//! (3 DOF). Robust losses enter through IRLS reweighting of the normal
//! equations. The first keyframe of a window is typically frozen to anchor
//! the gauge. Landmarks only ever couple to states, so the normal equations
//! can be reduced by a Schur complement on the landmark blocks; both paths
//! produce the same step and the dense path stays around as the reference.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::factors::{Factor, FactorError, VarRef};
use crate::geometry::{State, STATE_DOF};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error("problem has no free variable blocks")]
    AllConstant,
    #[error("problem has no factors")]
    NoFactors,
}

/// Factor graph plus current variable values and the constant-block mask.
#[derive(Clone, Debug)]
pub struct Problem {
    pub states: Vec<State>,
    pub landmarks: Vec<Vector3<f64>>,
    pub factors: Vec<Factor>,
    const_states: Vec<bool>,
    const_landmarks: Vec<bool>,
}

impl Problem {
    pub fn new(
        states: Vec<State>,
        landmarks: Vec<Vector3<f64>>,
        factors: Vec<Factor>,
    ) -> Result<Self, OptimizerError> {
        for f in &factors {
            for sid in f.connected_states() {
                if sid.0 >= states.len() {
                    return Err(FactorError::BadStateId(sid.0, states.len()).into());
                }
            }
            if let Some(lid) = f.connected_landmark() {
                if lid.0 >= landmarks.len() {
                    return Err(FactorError::BadLandmarkId(lid.0, landmarks.len()).into());
                }
            }
        }
        let const_states = vec![false; states.len()];
        let const_landmarks = vec![false; landmarks.len()];
        Ok(Problem {
            states,
            landmarks,
            factors,
            const_states,
            const_landmarks,
        })
    }

    pub fn freeze_state(&mut self, index: usize) {
        self.const_states[index] = true;
    }

    pub fn freeze_landmark(&mut self, index: usize) {
        self.const_landmarks[index] = true;
    }

    pub fn state_frozen(&self, index: usize) -> bool {
        self.const_states[index]
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub max_iter: usize,
    pub lambda_init: f64,
    pub rel_tol: f64,
    /// Eliminate landmark blocks before factorizing. Same step as the dense
    /// path; worth it once windows carry hundreds of landmarks.
    pub use_schur: bool,
    /// Tag carried into the report and its log line.
    pub label: String,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iter: 20,
            lambda_init: 1e-4,
            rel_tol: 1e-6,
            use_schur: true,
            label: "window".to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    LambdaExhausted,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max_iterations",
            Termination::LambdaExhausted => "lambda_exhausted",
        };
        f.write_str(s)
    }
}

/// Final cost split by measurement family.
#[derive(Clone, Copy, Debug, Default)]
pub struct FamilyCosts {
    pub inertial: f64,
    pub visual: f64,
    pub lidar: f64,
    pub gps: f64,
    pub loop_closure: f64,
}

impl FamilyCosts {
    fn add(&mut self, kind: &str, cost: f64) {
        match kind {
            "inertial" => self.inertial += cost,
            "visual" => self.visual += cost,
            "lidar_ground" | "lidar_surface" => self.lidar += cost,
            "gps" => self.gps += cost,
            "loop" => self.loop_closure += cost,
            _ => unreachable!("unknown factor kind {kind}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolverReport {
    pub label: String,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub family_costs: FamilyCosts,
    /// Accepted costs in order, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Set when a lidar pass found nothing to work with and returned the
    /// visual-inertial result instead.
    pub fell_back_to_vio: bool,
}

impl SolverReport {
    pub fn log_line(&self) -> String {
        format!(
            "solve label={} initial_cost={:.6e} final_cost={:.6e} iterations={} reason={} \
             cost_inertial={:.6e} cost_visual={:.6e} cost_lidar={:.6e} cost_gps={:.6e} cost_loop={:.6e}",
            self.label,
            self.initial_cost,
            self.final_cost,
            self.iterations,
            self.termination,
            self.family_costs.inertial,
            self.family_costs.visual,
            self.family_costs.lidar,
            self.family_costs.gps,
            self.family_costs.loop_closure,
        )
    }
}

/// Column layout of the free variables: states first, landmarks after.
struct Layout {
    state_col: Vec<Option<usize>>,
    lm_col: Vec<Option<usize>>,
    n_state_cols: usize,
    n_lm: usize,
}

impl Layout {
    fn build(problem: &Problem) -> Layout {
        let mut state_col = Vec::with_capacity(problem.states.len());
        let mut next = 0;
        for frozen in &problem.const_states {
            if *frozen {
                state_col.push(None);
            } else {
                state_col.push(Some(next));
                next += STATE_DOF;
            }
        }
        let n_state_cols = next;
        let mut lm_col = Vec::with_capacity(problem.landmarks.len());
        let mut lm_index = 0;
        for frozen in &problem.const_landmarks {
            if *frozen {
                lm_col.push(None);
            } else {
                lm_col.push(Some(lm_index));
                lm_index += 1;
            }
        }
        Layout {
            state_col,
            lm_col,
            n_state_cols,
            n_lm: lm_index,
        }
    }

    fn total_cols(&self) -> usize {
        self.n_state_cols + 3 * self.n_lm
    }

    fn column_of(&self, var: &VarRef) -> Option<(usize, usize)> {
        match var {
            VarRef::State(s) => self.state_col[s.0].map(|c| (c, STATE_DOF)),
            VarRef::Landmark(l) => self.lm_col[l.0].map(|c| (self.n_state_cols + 3 * c, 3)),
        }
    }
}

/// Cost of the masked factor subset at the current variables.
fn evaluate(
    problem: &Problem,
    mask: &[bool],
) -> Result<(f64, FamilyCosts), OptimizerError> {
    let mut total = 0.0;
    let mut family = FamilyCosts::default();
    for (f, active) in problem.factors.iter().zip(mask) {
        if !active {
            continue;
        }
        if let Some(eval) = f.linearize(&problem.states, &problem.landmarks)? {
            total += eval.cost;
            family.add(f.kind(), eval.cost);
        }
    }
    Ok((total, family))
}

struct NormalEquations {
    h: DMatrix<f64>,
    g: DVector<f64>,
}

fn assemble(
    problem: &Problem,
    mask: &[bool],
    layout: &Layout,
) -> Result<NormalEquations, OptimizerError> {
    let n = layout.total_cols();
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut g = DVector::<f64>::zeros(n);
    for (f, active) in problem.factors.iter().zip(mask) {
        if !active {
            continue;
        }
        let Some(eval) = f.linearize(&problem.states, &problem.landmarks)? else {
            continue;
        };
        let w = eval.irls_weight;
        let blocks: Vec<(usize, usize, &DMatrix<f64>)> = eval
            .jacobians
            .iter()
            .filter_map(|(var, j)| layout.column_of(var).map(|(c, w)| (c, w, j)))
            .collect();
        for (ci, wi, ji) in &blocks {
            let jtr = ji.transpose() * &eval.residual * w;
            for r in 0..*wi {
                g[ci + r] -= jtr[r];
            }
            for (cj, wj, jj) in &blocks {
                let block = ji.transpose() * *jj * w;
                for r in 0..*wi {
                    for c in 0..*wj {
                        h[(ci + r, cj + c)] += block[(r, c)];
                    }
                }
            }
        }
    }
    Ok(NormalEquations { h, g })
}

/// Damped step from the dense normal equations; `None` when the factorization
/// fails and the caller should raise lambda.
fn dense_step(eq: &NormalEquations, lambda: f64) -> Option<DVector<f64>> {
    let n = eq.h.nrows();
    let max_diag = (0..n).map(|i| eq.h[(i, i)]).fold(0.0_f64, f64::max);
    let floor = 1e-6 * max_diag.max(1.0);
    let mut damped = eq.h.clone();
    for i in 0..n {
        damped[(i, i)] += lambda * eq.h[(i, i)].max(floor);
    }
    damped.cholesky().map(|chol| chol.solve(&eq.g))
}

/// Same step via Schur elimination of the landmark blocks. Landmarks never
/// couple to each other, so their sub-block of the damped system is
/// block-diagonal and inverts landmark by landmark.
fn schur_step(eq: &NormalEquations, layout: &Layout, lambda: f64) -> Option<DVector<f64>> {
    let ns = layout.n_state_cols;
    let nl = layout.n_lm;
    if nl == 0 {
        return dense_step(eq, lambda);
    }
    let n = eq.h.nrows();
    let max_diag = (0..n).map(|i| eq.h[(i, i)]).fold(0.0_f64, f64::max);
    let floor = 1e-6 * max_diag.max(1.0);
    let damp = |d: f64| d + lambda * d.max(floor);

    let mut s = eq.h.view((0, 0), (ns, ns)).into_owned();
    for i in 0..ns {
        s[(i, i)] = damp(eq.h[(i, i)]);
    }
    let mut rhs = DVector::<f64>::zeros(ns);
    for i in 0..ns {
        rhs[i] = eq.g[i];
    }

    // cache C_i^-1 g_i and C_i^-1 B_i^T for the back-substitution
    let mut back: Vec<(Vector3<f64>, DMatrix<f64>)> = Vec::with_capacity(nl);
    for l in 0..nl {
        let c0 = ns + 3 * l;
        let mut c = Matrix3::<f64>::zeros();
        for r in 0..3 {
            for cc in 0..3 {
                c[(r, cc)] = eq.h[(c0 + r, c0 + cc)];
            }
            c[(r, r)] = damp(eq.h[(c0 + r, c0 + r)]);
        }
        let c_inv = c.cholesky()?.inverse();
        let b = eq.h.view((0, c0), (ns, 3)).into_owned();
        let gl = Vector3::new(eq.g[c0], eq.g[c0 + 1], eq.g[c0 + 2]);
        let c_inv_bt = DMatrix::from_fn(3, ns, |r, cc| {
            (0..3).map(|k| c_inv[(r, k)] * b[(cc, k)]).sum()
        });
        s -= &b * &c_inv_bt;
        let c_inv_g = c_inv * gl;
        for i in 0..ns {
            rhs[i] -= b.row(i).transpose().dot(&Vector3::new(c_inv_g.x, c_inv_g.y, c_inv_g.z));
        }
        back.push((c_inv_g, c_inv_bt));
    }

    let delta_s = s.cholesky()?.solve(&rhs);
    let mut delta = DVector::<f64>::zeros(eq.h.nrows());
    for i in 0..ns {
        delta[i] = delta_s[i];
    }
    for (l, (c_inv_g, c_inv_bt)) in back.iter().enumerate() {
        let corr = c_inv_bt * &delta_s;
        let c0 = ns + 3 * l;
        for r in 0..3 {
            delta[c0 + r] = c_inv_g[r] - corr[r];
        }
    }
    Some(delta)
}

fn apply_step(problem: &Problem, layout: &Layout, delta: &DVector<f64>) -> Problem {
    let mut next = problem.clone();
    for (i, col) in layout.state_col.iter().enumerate() {
        if let Some(c) = col {
            let d = delta.fixed_rows::<STATE_DOF>(*c).into_owned();
            next.states[i] = problem.states[i].retract(&d);
        }
    }
    for (i, col) in layout.lm_col.iter().enumerate() {
        if let Some(c) = col {
            let base = layout.n_state_cols + 3 * c;
            next.landmarks[i] += Vector3::new(delta[base], delta[base + 1], delta[base + 2]);
        }
    }
    next
}

fn solve_masked(
    problem: &mut Problem,
    mask: &[bool],
    options: &SolveOptions,
) -> Result<SolverReport, OptimizerError> {
    if problem.factors.is_empty() {
        return Err(OptimizerError::NoFactors);
    }
    let layout = Layout::build(problem);
    if layout.total_cols() == 0 {
        return Err(OptimizerError::AllConstant);
    }

    let (initial_cost, _) = evaluate(problem, mask)?;
    let mut cost = initial_cost;
    let mut cost_history = vec![initial_cost];
    let mut lambda = options.lambda_init;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    for _ in 0..options.max_iter {
        let eq = assemble(problem, mask, &layout)?;
        iterations += 1;
        if eq.g.amax() < 1e-12 {
            termination = Termination::Converged;
            break;
        }

        let mut accepted = false;
        while lambda <= 1e10 {
            let step = if options.use_schur {
                schur_step(&eq, &layout, lambda)
            } else {
                dense_step(&eq, lambda)
            };
            let Some(delta) = step else {
                lambda *= 10.0;
                continue;
            };
            let candidate = apply_step(problem, &layout, &delta);
            let (new_cost, _) = evaluate(&candidate, mask)?;
            if new_cost.is_finite() && new_cost < cost {
                let improvement = (cost - new_cost) / cost.max(1e-300);
                *problem = candidate;
                cost = new_cost;
                cost_history.push(new_cost);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if improvement < options.rel_tol {
                    termination = Termination::Converged;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            termination = Termination::LambdaExhausted;
            break;
        }
        if termination == Termination::Converged {
            break;
        }
    }

    let (final_cost, family_costs) = evaluate(problem, mask)?;
    let report = SolverReport {
        label: options.label.clone(),
        initial_cost,
        final_cost,
        iterations,
        termination,
        family_costs,
        cost_history,
        fell_back_to_vio: false,
    };
    log::info!("{}", report.log_line());
    Ok(report)
}

/// Full-graph solve.
pub fn solve(problem: &mut Problem, options: &SolveOptions) -> Result<SolverReport, OptimizerError> {
    let mask = vec![true; problem.factors.len()];
    solve_masked(problem, &mask, options)
}

/// First local pass: visual and inertial families only (plus any priors that
/// are not lidar). Warns when the window carries no inertial factors, which
/// happens after an IMU stream interruption.
pub fn vio_pass(
    problem: &mut Problem,
    options: &SolveOptions,
) -> Result<SolverReport, OptimizerError> {
    let mask: Vec<bool> = problem
        .factors
        .iter()
        .map(|f| !matches!(f, Factor::Lidar { .. }))
        .collect();
    let has_inertial = problem
        .factors
        .iter()
        .any(|f| matches!(f, Factor::Inertial { .. }));
    if !has_inertial {
        log::warn!("IMU stream interrupted; window pass runs visual-only");
    }
    let mut opts = options.clone();
    opts.label = format!("{}_vio", options.label);
    solve_masked(problem, &mask, &opts)
}

/// Second local pass: joint solve over all families. Falls back to the
/// visual-inertial result (flagged in the report) when there is nothing for
/// the lidar terms to constrain.
pub fn lidar_pass(
    problem: &mut Problem,
    options: &SolveOptions,
) -> Result<SolverReport, OptimizerError> {
    let has_lidar = problem
        .factors
        .iter()
        .any(|f| matches!(f, Factor::Lidar { .. }));
    if !has_lidar {
        log::warn!("no lidar correspondences in window; keeping visual-inertial result");
        let mut opts = options.clone();
        opts.label = format!("{}_lidar_fallback", options.label);
        let mut report = vio_pass(problem, &opts)?;
        report.fell_back_to_vio = true;
        return Ok(report);
    }
    let mask = vec![true; problem.factors.len()];
    let mut opts = options.clone();
    opts.label = format!("{}_lidar", options.label);
    solve_masked(problem, &mask, &opts)
}
