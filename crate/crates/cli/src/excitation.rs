//! Boundary data and imposed currents as functions of time.

use std::f64::consts::PI;

use htsfem_core::solver::Excitation;
use htsfem_core::{Vec3, MU_0};

/// Quarter-period marks in `(0, horizon]`, where sinusoids peak or cross zero.
fn quarter_periods(frequency: f64, horizon: f64) -> Vec<f64> {
    let q = 0.25 / frequency;
    (1..).map(|i| i as f64 * q).take_while(|&t| t <= horizon * (1.0 + 1e-12)).collect()
}

/// Uniform field `(B/μ0) sin(2π f t)` along a fixed unit direction.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedField {
    pub amplitude_b: f64,
    pub frequency: f64,
    pub direction: Vec3,
    pub horizon: f64,
}

impl AppliedField {
    pub fn h(&self, t: f64) -> f64 {
        self.amplitude_b / MU_0 * (2.0 * PI * self.frequency * t).sin()
    }
}

impl Excitation for AppliedField {
    fn boundary_field(&self, t: f64, _x: &Vec3) -> Vec3 {
        let h = self.h(t);
        [h * self.direction[0], h * self.direction[1], h * self.direction[2]]
    }

    fn breakpoints(&self) -> Vec<f64> {
        quarter_periods(self.frequency, self.horizon)
    }
}

/// Time dependence of an imposed current.
#[derive(Debug, Clone, PartialEq)]
pub enum Waveform {
    Sine { amplitude: f64, frequency: f64 },
    /// Level `i` is reached by a linear ramp at the start of plateau `i`.
    Staircase { levels: Vec<f64>, plateau: f64, ramp: f64 },
}

impl Waveform {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Waveform::Sine { amplitude, frequency } => amplitude * (2.0 * PI * frequency * t).sin(),
            Waveform::Staircase { levels, plateau, ramp } => {
                let i = ((t / plateau).floor().max(0.0) as usize).min(levels.len() - 1);
                let from = if i == 0 { 0.0 } else { levels[i - 1] };
                let s = ((t - i as f64 * plateau) / ramp).clamp(0.0, 1.0);
                from + s * (levels[i] - from)
            }
        }
    }

    fn breakpoints(&self, horizon: f64) -> Vec<f64> {
        match self {
            Waveform::Sine { frequency, .. } => quarter_periods(*frequency, horizon),
            Waveform::Staircase { levels, plateau, ramp } => (0..levels.len())
                .flat_map(|i| [i as f64 * plateau, i as f64 * plateau + ramp])
                .filter(|&t| t > 0.0 && t <= horizon)
                .collect(),
        }
    }
}

/// Net current through a planar conductor, with the boundary datum of a
/// line current at `center`: `H = I/(2π r²) (−Δy, Δx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineCurrent {
    pub center: Vec3,
    pub waveform: Waveform,
    pub horizon: f64,
}

impl Excitation for LineCurrent {
    fn boundary_field(&self, t: f64, x: &Vec3) -> Vec3 {
        let (dx, dy) = (x[0] - self.center[0], x[1] - self.center[1]);
        let r2 = dx * dx + dy * dy;
        if r2 == 0.0 {
            return [0.0; 3];
        }
        let f = self.waveform.value(t) / (2.0 * PI * r2);
        [-f * dy, f * dx, 0.0]
    }

    fn current(&self, t: f64) -> Option<f64> {
        Some(self.waveform.value(t))
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.waveform.breakpoints(self.horizon)
    }
}

/// Net current imposed through the constraint alone, with zero boundary
/// data; the return current flows in the resistive air.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedCurrent {
    pub waveform: Waveform,
    pub horizon: f64,
}

impl Excitation for InjectedCurrent {
    fn boundary_field(&self, _t: f64, _x: &Vec3) -> Vec3 {
        [0.0; 3]
    }

    fn current(&self, t: f64) -> Option<f64> {
        Some(self.waveform.value(t))
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.waveform.breakpoints(self.horizon)
    }
}

/// No loading. `constrained` imposes a zero net current.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoLoad {
    pub constrained: bool,
}

impl Excitation for NoLoad {
    fn boundary_field(&self, _t: f64, _x: &Vec3) -> Vec3 {
        [0.0; 3]
    }

    fn current(&self, _t: f64) -> Option<f64> {
        self.constrained.then_some(0.0)
    }
}

/// Applied field with a zero net current imposed on a planar conductor.
#[derive(Debug, Clone, PartialEq)]
pub struct NoNetCurrent<E>(pub E);

impl<E: Excitation> Excitation for NoNetCurrent<E> {
    fn boundary_field(&self, t: f64, x: &Vec3) -> Vec3 {
        self.0.boundary_field(t, x)
    }

    fn current(&self, _t: f64) -> Option<f64> {
        Some(0.0)
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.0.breakpoints()
    }
}

/// Adds breakpoints, e.g. output times, to another excitation.
pub struct WithStops<'a> {
    pub inner: &'a dyn Excitation,
    pub stops: Vec<f64>,
}

impl Excitation for WithStops<'_> {
    fn boundary_field(&self, t: f64, x: &Vec3) -> Vec3 {
        self.inner.boundary_field(t, x)
    }

    fn current(&self, t: f64) -> Option<f64> {
        self.inner.current(t)
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut b = self.inner.breakpoints();
        b.extend_from_slice(&self.stops);
        b
    }
}
