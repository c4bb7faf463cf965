//! Newton iteration with cubic backtracking and the adaptive θ-scheme
//! time loop.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::assembly::Problem;
use crate::gradient::NodalGradients;
use crate::math::norm2;
use crate::{math, Error, Result, Vec3, MU_0};

/// A square nonlinear system `R(x) = 0` able to produce Newton directions.
pub trait NonlinearSystem {
    fn dim(&self) -> usize;

    /// Called at every accepted iterate before its residual is evaluated.
    fn begin_iteration(&mut self, _x: &[f64]) -> Result<()> {
        Ok(())
    }

    fn residual(&mut self, x: &[f64]) -> Result<Vec<f64>>;

    /// Solution `d` of `J(x) d = -r`.
    fn newton_direction(&mut self, x: &[f64], r: &[f64]) -> Result<Vec<f64>>;

    /// Round-off level of the residual at `x`, about `ε ‖J‖ ‖x‖`, below
    /// which a direct solve cannot push it. Zero if unknown.
    fn residual_floor(&self, _x: &[f64]) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Stop when `‖R‖ ≤ rtol · max(‖R(0)‖, ‖R(x₀)‖)`, `x₀` the initial guess.
    pub rtol: f64,
    /// Optional absolute stop `‖R‖ ≤ atol`.
    pub atol: Option<f64>,
    pub max_iter: usize,
    pub max_trials: usize,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    /// Safeguards on the next trial step relative to the current one.
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig { rtol: 1e-10, atol: None, max_iter: 25, max_trials: 10, armijo: 1e-4, beta_min: 0.1, beta_max: 0.5 }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        let bad_atol = self.atol.map(|a| !(a > 0.0)).unwrap_or(false);
        if !(self.rtol > 0.0) || bad_atol || self.max_iter == 0 || self.max_trials == 0 {
            return Err(Error::OutOfRange("Newton tolerances must be positive and limits nonzero".into()));
        }
        if !(0.0 < self.beta_min && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return Err(Error::OutOfRange("line-search safeguards must satisfy 0 < min ≤ max < 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NewtonReport {
    pub iterations: usize,
    /// Residual norms, starting with the initial guess.
    pub residuals: Vec<f64>,
    /// Accepted step lengths.
    pub betas: Vec<f64>,
    pub reference_norm: f64,
    /// Stopped on stagnation within the round-off band of the residual
    /// rather than on the tolerance.
    pub at_floor: bool,
}

impl NewtonReport {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }
}

/// Cubic backtracking on `f(β) = ½‖R(x + βd)‖²`, given `‖R(x + βd)‖` through
/// `norm_at` and the slope `f'(0)`. Returns the accepted `β`.
pub fn backtracking(
    mut norm_at: impl FnMut(f64) -> Result<f64>,
    r0: f64,
    slope: f64,
    cfg: &NewtonConfig,
) -> Result<f64> {
    let f0 = 0.5 * r0 * r0;
    let mut beta = 1.0;
    let mut prev: Option<(f64, f64)> = None;
    for _ in 0..cfg.max_trials {
        let r = norm_at(beta)?;
        let f = 0.5 * r * r;
        if f.is_finite() && f <= f0 + cfg.armijo * beta * slope && r <= r0 {
            return Ok(beta);
        }
        let next = if !f.is_finite() {
            cfg.beta_min * beta
        } else if let Some((bp, fp)) = prev {
            // cubic through f0, f0', f(β) and f(β_prev)
            let r1 = f - f0 - slope * beta;
            let r2 = fp - f0 - slope * bp;
            let den = beta - bp;
            let a = (r1 / (beta * beta) - r2 / (bp * bp)) / den;
            let b = (-bp * r1 / (beta * beta) + beta * r2 / (bp * bp)) / den;
            if a == 0.0 {
                -slope / (2.0 * b)
            } else {
                let disc = b * b - 3.0 * a * slope;
                if disc < 0.0 {
                    cfg.beta_max * beta
                } else {
                    (-b + math::sqrt(disc)) / (3.0 * a)
                }
            }
        } else {
            -slope / (2.0 * (f - f0 - slope))
        };
        let next = if next.is_finite() { next } else { cfg.beta_min * beta };
        prev = Some((beta, f));
        beta = next.clamp(cfg.beta_min * beta, cfg.beta_max * beta);
    }
    Err(Error::LineSearch { trials: cfg.max_trials })
}

/// Contraction factor above which an iterate counts as stagnating.
const STAGNATION: f64 = 0.9;

/// Newton–Raphson with line search; `x` holds the initial guess and
/// receives the solution.
pub fn newton_solve<S: NonlinearSystem + ?Sized>(sys: &mut S, x: &mut [f64], cfg: &NewtonConfig) -> Result<NewtonReport> {
    cfg.validate()?;
    let zero = vec![0.0; sys.dim()];
    sys.begin_iteration(x)?;
    let mut r = sys.residual(x)?;
    let mut rn = norm2(&r);
    // R(0) alone can vanish, e.g. when the boundary data pass through zero
    let reference = norm2(&sys.residual(&zero)?).max(rn);
    let mut report = NewtonReport { reference_norm: reference, residuals: vec![rn], ..Default::default() };
    let converged = |rn: f64| {
        rn <= cfg.rtol * reference || cfg.atol.map(|a| rn <= a).unwrap_or(false) || rn == 0.0
    };
    let mut trial = vec![0.0; x.len()];
    for it in 1..=cfg.max_iter {
        if !rn.is_finite() {
            return Err(Error::NonConvergence { iterations: it - 1, residual: rn });
        }
        let d = sys.newton_direction(x, &r)?;
        let beta = if rn == 0.0 {
            1.0
        } else {
            let search = backtracking(
                |b| {
                    for i in 0..x.len() {
                        trial[i] = x[i] + b * d[i];
                    }
                    Ok(norm2(&sys.residual(&trial)?))
                },
                rn,
                -rn * rn,
                cfg,
            );
            match search {
                // no descent left inside the round-off band: x is as good as it gets
                Err(Error::LineSearch { .. }) if rn <= sys.residual_floor(x) => {
                    report.at_floor = true;
                    return Ok(report);
                }
                other => other?,
            }
        };
        for i in 0..x.len() {
            x[i] += beta * d[i];
        }
        sys.begin_iteration(x)?;
        r = sys.residual(x)?;
        rn = norm2(&r);
        report.iterations = it;
        report.betas.push(beta);
        report.residuals.push(rn);
        if converged(rn) {
            return Ok(report);
        }
        if rn <= sys.residual_floor(x) && rn > STAGNATION * report.residuals[it - 1] {
            report.at_floor = true;
            return Ok(report);
        }
    }
    Err(Error::NonConvergence { iterations: cfg.max_iter, residual: rn })
}

/// Step-size controller settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeStepper {
    pub dt_min: f64,
    pub dt_max: f64,
    pub dt_init: f64,
    /// Target Newton iteration count.
    pub kappa: f64,
    pub theta: f64,
    pub t_end: f64,
    /// Return to `dt_init` when a breakpoint of the excitation is reached.
    pub reset_at_breakpoints: bool,
}

impl TimeStepper {
    pub fn new(dt_min: f64, dt_max: f64, t_end: f64) -> Result<Self> {
        let s = TimeStepper {
            dt_min,
            dt_max,
            dt_init: dt_max,
            kappa: 5.0,
            theta: 1.0,
            t_end,
            reset_at_breakpoints: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(Error::OutOfRange("time step bounds must satisfy 0 < dt_min ≤ dt_max".into()));
        }
        if !(self.dt_init >= self.dt_min && self.dt_init <= self.dt_max) {
            return Err(Error::OutOfRange("initial time step must lie within the bounds".into()));
        }
        if !(self.kappa > 0.0) || !(self.theta > 0.0 && self.theta <= 1.0) || !(self.t_end > 0.0) {
            return Err(Error::OutOfRange("kappa, theta or final time out of range".into()));
        }
        Ok(())
    }
}

/// Next step size from the iteration count of the last one.
pub fn adapt_dt(dt_prev: f64, iterations: usize, stepper: &TimeStepper) -> f64 {
    let it = iterations.max(1) as f64;
    (stepper.kappa / it * dt_prev).clamp(stepper.dt_min, stepper.dt_max)
}

/// Time-dependent loading of a problem.
pub trait Excitation {
    /// Tangential boundary datum `H(t, x)`.
    fn boundary_field(&self, t: f64, x: &Vec3) -> Vec3;

    /// Imposed net current, if any.
    fn current(&self, _t: f64) -> Option<f64> {
        None
    }

    /// Times at which the loading has kinks; steps land on them exactly.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// One accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub dt: f64,
    pub newton: NewtonReport,
    /// Multiplier of the current constraint (V per unit length in 2D).
    pub lambda: Option<f64>,
    /// Quantities produced by the observer.
    pub scalars: Vec<f64>,
    /// Full coefficient vector, when states are kept.
    pub state: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimeSeries {
    pub steps: Vec<StepRecord>,
    /// Set when the run aborted; the steps before it are kept.
    pub failure: Option<Error>,
    /// Failed attempts `(t, Δt, reason)`, each followed by a halving.
    pub rejected: Vec<(f64, f64, Error)>,
}

impl TimeSeries {
    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.t).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }
}

/// Called after each accepted step with the new full state; returns the
/// scalars stored with the step.
pub type Observer<'a> = Box<dyn FnMut(&Problem, f64, &[f64]) -> Vec<f64> + 'a>;

/// Called after each accepted step with its index and record.
pub type StepCallback<'a> = Box<dyn FnMut(usize, &StepRecord) + 'a>;

/// Options of [`run_transient`] beyond the stepper.
pub struct RunOptions<'a> {
    pub newton: NewtonConfig,
    pub keep_states: bool,
    pub observer: Option<Observer<'a>>,
    /// Called after each accepted step, e.g. for logging.
    pub on_step: Option<StepCallback<'a>>,
    /// Remove the round-off drift of the weak divergence after each step;
    /// see [`NodalGradients::correct`].
    pub gradient_correction: bool,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions {
            newton: NewtonConfig::default(),
            keep_states: false,
            observer: None,
            on_step: None,
            gradient_correction: true,
        }
    }
}

/// Integrate from `H = 0` at `t = 0` to `stepper.t_end`.
pub fn run_transient(
    problem: &mut Problem,
    excitation: &dyn Excitation,
    stepper: &TimeStepper,
    mut opts: RunOptions<'_>,
) -> Result<TimeSeries> {
    stepper.validate()?;
    opts.newton.validate()?;
    if problem.has_constraint() != excitation.current(0.0).is_some() {
        return Err(Error::Precondition("current constraint and excitation disagree".into()));
    }
    let mut breaks: Vec<f64> = excitation
        .breakpoints()
        .into_iter()
        .filter(|&b| b > 0.0 && b < stepper.t_end)
        .collect();
    breaks.push(stepper.t_end);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let mut series = TimeSeries::default();
    let mut gradients = opts.gradient_correction.then(|| NodalGradients::new(problem.space().mesh()));
    let mut h = vec![0.0; problem.space().n_dofs()];
    let mut t = 0.0;
    let mut dt = stepper.dt_init;
    let mut next_break = 0;
    let eps = 1e-12 * stepper.t_end;
    while t < stepper.t_end - eps {
        while breaks[next_break] <= t + eps {
            next_break += 1;
        }
        let target = breaks[next_break];
        // land on the next breakpoint, avoiding a sliver step after it
        let mut step = dt;
        let hits = t + step >= target - eps || target - (t + step) < 0.1 * stepper.dt_min;
        if hits {
            step = target - t;
        }
        let t_new = if hits { target } else { t + step };
        problem.space_mut().apply_dirichlet(|x| excitation.boundary_field(t_new, x));
        let i_app = excitation.current(t_new).unwrap_or(0.0);
        let outcome = {
            let mut sys = problem.step(&h, step, stepper.theta, i_app)?;
            let mut x = sys.initial_guess();
            newton_solve(&mut sys, &mut x, &opts.newton).map(|rep| (x, rep))
        };
        match outcome {
            Ok((x, rep)) => {
                let nf = problem.space().num_free();
                let (mut hn, _) = problem.expand_unknowns(&x);
                if let Some(g) = gradients.as_mut() {
                    g.correct(problem.space(), &mut hn, &h)?;
                }
                let lambda = problem.has_constraint().then(|| x[nf] * MU_0 / step);
                let scalars = match opts.observer.as_mut() {
                    Some(f) => f(problem, t_new, &hn),
                    None => Vec::new(),
                };
                let iters = rep.iterations;
                let rec = StepRecord {
                    t: t_new,
                    dt: step,
                    newton: rep,
                    lambda,
                    scalars,
                    state: opts.keep_states.then(|| hn.clone()),
                };
                if let Some(cb) = opts.on_step.as_mut() {
                    cb(series.steps.len(), &rec);
                }
                series.steps.push(rec);
                h = hn;
                t = t_new;
                // a shortened final approach does not shrink the controller's step
                let base = if hits { dt.max(step) } else { step };
                dt = adapt_dt(base, iters, stepper);
                if hits && stepper.reset_at_breakpoints {
                    dt = stepper.dt_init;
                }
            }
            Err(e @ (Error::NonConvergence { .. } | Error::LineSearch { .. } | Error::Singular(_))) => {
                series.rejected.push((t, step, e));
                dt = 0.5 * step;
                if dt < stepper.dt_min {
                    series.failure = Some(Error::TimeStepUnderflow { time: t, dt });
                    return Ok(series);
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar surrogate `R(x) = f(x)`.
    struct Scalar<F: Fn(f64) -> f64, D: Fn(f64) -> f64> {
        f: F,
        df: D,
    }

    impl<F: Fn(f64) -> f64, D: Fn(f64) -> f64> NonlinearSystem for Scalar<F, D> {
        fn dim(&self) -> usize {
            1
        }
        fn residual(&mut self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![(self.f)(x[0])])
        }
        fn newton_direction(&mut self, x: &[f64], r: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![-r[0] / (self.df)(x[0])])
        }
    }

    #[test]
    fn cubic_root_converges_quadratically() {
        let mut s = Scalar { f: |x: f64| x * x * x - 8.0, df: |x: f64| 3.0 * x * x };
        let mut x = [3.0];
        let mut first = [3.0];
        let cfg1 = NewtonConfig { max_iter: 1, ..Default::default() };
        let _ = newton_solve(&mut s, &mut first, &cfg1);
        assert!((first[0] - (3.0 - 19.0 / 27.0)).abs() < 1e-14);
        let rep = newton_solve(&mut s, &mut x, &NewtonConfig::default()).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12);
        assert!(rep.betas.iter().all(|&b| b == 1.0));
        let e: Vec<f64> = rep.residuals.iter().map(|r| r / 12.0).collect();
        let n = e.len();
        assert!(e[n - 2] <= 2.0 * e[n - 3] * e[n - 3]);
    }

    #[test]
    fn linear_problem_takes_one_iteration() {
        let mut s = Scalar { f: |x: f64| 4.0 * x - 2.0, df: |_| 4.0 };
        let mut x = [10.0];
        let rep = newton_solve(&mut s, &mut x, &NewtonConfig::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.betas, vec![1.0]);
        assert!((x[0] - 0.5).abs() < 1e-15);
    }

    /// `R(x) = x − 1` plus a fixed-size noise term, as left by round-off.
    struct Noisy {
        floor: f64,
    }

    impl NonlinearSystem for Noisy {
        fn dim(&self) -> usize {
            1
        }
        fn residual(&mut self, x: &[f64]) -> Result<Vec<f64>> {
            let noise = 1e-9 * if (x[0] * 1e12).rem_euclid(2.0) < 1.0 { 1.0 } else { -1.0 };
            Ok(vec![x[0] - 1.0 + noise])
        }
        fn newton_direction(&mut self, x: &[f64], r: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![-r[0] + 0.3e-9 * x[0]])
        }
        fn residual_floor(&self, _x: &[f64]) -> f64 {
            self.floor
        }
    }

    #[test]
    fn stagnation_in_round_off_band_is_accepted() {
        let cfg = NewtonConfig { rtol: 1e-14, ..Default::default() };
        let mut x = [5.0];
        let rep = newton_solve(&mut Noisy { floor: 1e-8 }, &mut x, &cfg).unwrap();
        assert!(rep.at_floor);
        assert!((x[0] - 1.0).abs() < 1e-8);
        let mut x = [5.0];
        assert!(newton_solve(&mut Noisy { floor: 0.0 }, &mut x, &cfg).is_err());
    }

    #[test]
    fn exact_step_is_accepted() {
        let cfg = NewtonConfig::default();
        // R(x) = x at x = 2 along d = -2
        let beta = backtracking(|b| Ok((2.0 - 2.0 * b).abs()), 2.0, -4.0, &cfg).unwrap();
        assert_eq!(beta, 1.0);
    }

    #[test]
    fn overlong_step_is_shortened() {
        let cfg = NewtonConfig::default();
        let r = |x: f64| x * x - 1.0;
        // x = 3, d = -10; slope of ½R² is R R' d = 8 * 6 * (-10)
        let beta = backtracking(|b| Ok(r(3.0 - 10.0 * b).abs()), 8.0, -480.0, &cfg).unwrap();
        assert!(beta < 1.0);
        assert!(r(3.0 - 10.0 * beta).abs() < 8.0);
    }

    #[test]
    fn ascent_direction_fails() {
        let cfg = NewtonConfig::default();
        let mut calls = 0;
        let res = backtracking(
            |b| {
                calls += 1;
                Ok(2.0 + 2.0 * b)
            },
            2.0,
            -4.0,
            &cfg,
        );
        assert_eq!(res, Err(Error::LineSearch { trials: 10 }));
        assert_eq!(calls, 10);
    }

    #[test]
    fn dt_formula_and_clamps() {
        let s = TimeStepper::new(1e-6, 2e-3, 1.0).unwrap();
        assert_eq!(adapt_dt(1e-3, 5, &s), 1e-3);
        assert_eq!(adapt_dt(1e-3, 10, &s), 5e-4);
        assert_eq!(adapt_dt(0.9 * 2e-3, 1, &s), 2e-3);
        assert_eq!(adapt_dt(1e-6, 25, &s), 1e-6);
        assert!(TimeStepper::new(1e-3, 1e-4, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(NewtonConfig::default().validate().is_ok());
        assert!(NewtonConfig { rtol: 0.0, ..Default::default() }.validate().is_err());
        assert!(NewtonConfig { max_iter: 0, ..Default::default() }.validate().is_err());
    }
}
