//! Fixed-step RK4 integration over one sampling period, jump maps, and
//! time-triggered simulation of the coupled network.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{DslError, VectorField};
use crate::model::{mat_vec, NetworkSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("integrator step {step} does not divide the period {tau}")]
    StepMismatch { step: f64, tau: f64 },
    #[error("integrator step must be positive, got {0}")]
    BadStep(f64),
    #[error("state diverged at RK step {step}: |x|inf = {norm} exceeds the guard")]
    Divergence { step: usize, norm: f64 },
    #[error("non-finite state at RK step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Eval(#[from] DslError),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("jump schedule of subsystem {subsystem}: {message}")]
    Schedule { subsystem: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// Fixed RK4 step `h`.
    pub step: f64,
    /// Divergence guard on the infinity norm of the state.
    pub max_norm: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            step: 0.01,
            max_norm: 1e6,
        }
    }
}

impl IntegratorConfig {
    /// Number of RK steps per period; `step` must divide `tau` to within 1e-12.
    pub fn steps_for(&self, tau: f64) -> Result<usize, FlowError> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(FlowError::BadStep(self.step));
        }
        let k = (tau / self.step).round();
        if k < 1.0 || (k * self.step - tau).abs() > 1e-12 {
            return Err(FlowError::StepMismatch { step: self.step, tau });
        }
        Ok(k as usize)
    }
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Classical RK4 with `steps` steps of size `h`. `rhs(x, dx)` writes the derivative.
pub fn rk4<F>(x0: &[f64], h: f64, steps: usize, max_norm: f64, mut rhs: F) -> Result<Vec<f64>, FlowError>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<(), FlowError>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for step in 0..steps {
        rhs(&x, &mut k1)?;
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        rhs(&tmp, &mut k2)?;
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        rhs(&tmp, &mut k3)?;
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        rhs(&tmp, &mut k4)?;
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite { step });
        }
        let norm = inf_norm(&x);
        if norm > max_norm {
            return Err(FlowError::Divergence { step, norm });
        }
    }
    Ok(x)
}

/// Left limit at `tau` of the flow from `x0` under constant inputs.
pub fn integrate_flow(
    f: &VectorField,
    x0: &[f64],
    w: &[f64],
    u: &[f64],
    tau: f64,
    config: &IntegratorConfig,
) -> Result<Vec<f64>, FlowError> {
    let steps = config.steps_for(tau)?;
    let h = tau / steps as f64;
    rk4(x0, h, steps, config.max_norm, |x, dx| Ok(f.eval_into(x, w, u, dx)?))
}

/// `g(x⁻, ω⁻, u)`.
pub fn apply_jump(g: &VectorField, x_minus: &[f64], w_minus: &[f64], u_now: &[f64]) -> Result<Vec<f64>, FlowError> {
    Ok(crate::dsl::eval_vector(g, x_minus, w_minus, u_now)?)
}

/// One period of the coupled network flow with `ω(t) = M·x(t)` inside the right-hand side.
///
/// Subsystems with `frozen[i]` keep their coordinates constant during the period.
pub fn integrate_network(
    spec: &NetworkSpec,
    x0: &[f64],
    u: &[f64],
    frozen: &[bool],
    config: &IntegratorConfig,
) -> Result<Vec<f64>, FlowError> {
    check_len("global state", spec.total_n(), x0.len())?;
    check_len("global external input", spec.total_m(), u.len())?;
    let steps = config.steps_for(spec.tau())?;
    let h = spec.tau() / steps as f64;
    let xo = spec.state_offsets();
    let uo = spec.external_offsets();
    let wo = spec.internal_offsets();
    let mut w = vec![0.0; spec.total_q()];
    rk4(x0, h, steps, config.max_norm, |x, dx| {
        mat_vec(&spec.coupling, x, &mut w);
        for (i, s) in spec.subsystems.iter().enumerate() {
            let out = &mut dx[xo[i]..xo[i] + s.n];
            if frozen.get(i).copied().unwrap_or(false) {
                out.fill(0.0);
            } else {
                s.flow.eval_into(&x[xo[i]..xo[i] + s.n], &w[wo[i]..wo[i] + s.q], &u[uo[i]..uo[i] + s.m], out)?;
            }
        }
        Ok(())
    })
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), FlowError> {
    if expected != got {
        return Err(FlowError::Dimension { what, expected, got });
    }
    Ok(())
}

/// Jump instants per subsystem, as period indices `k ≥ 1` (jump at time `k·τ`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JumpSchedule(pub Vec<Vec<usize>>);

impl JumpSchedule {
    /// Checks consecutive jumps (starting from time 0) are `z_min..=z_max` periods apart
    /// and no more than `z_max` periods pass without a jump before `horizon`.
    pub fn validate(&self, spec: &NetworkSpec, horizon: usize) -> Result<(), FlowError> {
        if self.0.len() != spec.subsystems.len() {
            return Err(FlowError::Dimension {
                what: "jump schedule",
                expected: spec.subsystems.len(),
                got: self.0.len(),
            });
        }
        for (i, (jumps, s)) in self.0.iter().zip(&spec.subsystems).enumerate() {
            let mut last = 0usize;
            for &k in jumps {
                if k > horizon {
                    break;
                }
                if k <= last {
                    return Err(FlowError::Schedule {
                        subsystem: i,
                        message: format!("jump instants must be strictly increasing and >= 1 (got {k} after {last})"),
                    });
                }
                let gap = k - last;
                if gap < s.z_min as usize || gap > s.z_max as usize {
                    return Err(FlowError::Schedule {
                        subsystem: i,
                        message: format!("gap of {gap} periods before instant {k} is outside [{}, {}]", s.z_min, s.z_max),
                    });
                }
                last = k;
            }
            if horizon - last > s.z_max as usize {
                return Err(FlowError::Schedule {
                    subsystem: i,
                    message: format!("no jump between period {last} and the horizon {horizon} (more than {} periods)", s.z_max),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub time: f64,
    /// Global state; the post-jump value at jump instants.
    pub x: Vec<f64>,
    pub jumps: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HybridTrajectory {
    pub samples: Vec<TrajectorySample>,
    pub jump_times: Vec<Vec<f64>>,
}

impl HybridTrajectory {
    /// Strictly increasing times and jump spacing within `[z_min·τ, z_max·τ]`.
    pub fn check_dwell(&self, spec: &NetworkSpec) -> Result<(), String> {
        for w in self.samples.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(format!("times not increasing at t = {}", w[1].time));
            }
        }
        let tau = spec.tau();
        for (i, (times, s)) in self.jump_times.iter().zip(&spec.subsystems).enumerate() {
            let mut prev = 0.0;
            for &t in times {
                let gap = ((t - prev) / tau).round() as i64;
                if ((t - prev) - gap as f64 * tau).abs() > 1e-9 * tau.max(t)
                    || gap < s.z_min as i64
                    || gap > s.z_max as i64
                {
                    return Err(format!("subsystem {i}: jump gap {} outside dwell bounds", t - prev));
                }
                prev = t;
            }
        }
        Ok(())
    }

    /// CSV with columns `time`, then `<name>_x<j>` for every subsystem component,
    /// then `<name>_jump` (0/1) per subsystem.
    pub fn to_csv(&self, spec: &NetworkSpec) -> String {
        let mut out = String::from("time");
        for s in &spec.subsystems {
            for j in 1..=s.n {
                out.push_str(&format!(",{}_x{j}", s.name));
            }
        }
        for s in &spec.subsystems {
            out.push_str(&format!(",{}_jump", s.name));
        }
        out.push('\n');
        for smp in &self.samples {
            out.push_str(&format!("{}", smp.time));
            for v in &smp.x {
                out.push_str(&format!(",{v}"));
            }
            for j in &smp.jumps {
                out.push_str(if *j { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        out
    }
}

/// Simulates the coupled network for `horizon` periods.
///
/// Each period flows the whole network with the period's external input; then
/// every subsystem scheduled at the period's end jumps, using pre-jump values of
/// all coordinates. Jumps read the input of the period that starts at the jump
/// instant (the last period's input at the horizon).
pub fn simulate_concrete(
    spec: &NetworkSpec,
    x0: &[f64],
    u_signal: &[Vec<f64>],
    schedule: &JumpSchedule,
    horizon: usize,
    config: &IntegratorConfig,
) -> Result<HybridTrajectory, FlowError> {
    check_len("global state", spec.total_n(), x0.len())?;
    if u_signal.len() < horizon {
        return Err(FlowError::Dimension {
            what: "external input signal (periods)",
            expected: horizon,
            got: u_signal.len(),
        });
    }
    schedule.validate(spec, horizon)?;
    let n_sub = spec.subsystems.len();
    let tau = spec.tau();
    let xo = spec.state_offsets();
    let wo = spec.internal_offsets();
    let uo = spec.external_offsets();
    let steps = config.steps_for(tau)?;
    let none = vec![false; n_sub];
    let mut traj = HybridTrajectory {
        samples: vec![TrajectorySample {
            time: 0.0,
            x: x0.to_vec(),
            jumps: none.clone(),
        }],
        jump_times: vec![Vec::new(); n_sub],
    };
    let mut x = x0.to_vec();
    let mut w = vec![0.0; spec.total_q()];
    for k in 1..=horizon {
        x = integrate_network(spec, &x, &u_signal[k - 1], &none, config).map_err(|e| match e {
            FlowError::Divergence { step, norm } => FlowError::Divergence {
                step: (k - 1) * steps + step,
                norm,
            },
            FlowError::NonFinite { step } => FlowError::NonFinite {
                step: (k - 1) * steps + step,
            },
            other => other,
        })?;
        let jumping: Vec<bool> = schedule.0.iter().map(|js| js.contains(&k)).collect();
        if jumping.iter().any(|j| *j) {
            let u_now = u_signal.get(k).unwrap_or(&u_signal[k - 1]);
            mat_vec(&spec.coupling, &x, &mut w);
            let pre = x.clone();
            for (i, s) in spec.subsystems.iter().enumerate().filter(|(i, _)| jumping[*i]) {
                let post = apply_jump(
                    &s.jump,
                    &pre[xo[i]..xo[i] + s.n],
                    &w[wo[i]..wo[i] + s.q],
                    &u_now[uo[i]..uo[i] + s.m],
                )?;
                x[xo[i]..xo[i] + s.n].copy_from_slice(&post);
                traj.jump_times[i].push(k as f64 * tau);
            }
        }
        traj.samples.push(TrajectorySample {
            time: k as f64 * tau,
            x: x.clone(),
            jumps: jumping,
        });
    }
    debug_assert!(traj.check_dwell(spec).is_ok());
    traj.check_dwell(spec).map_err(|message| FlowError::Schedule { subsystem: 0, message })?;
    Ok(traj)
}
