//! 2D shallow-water solver: finite-volume with Rusanov (local Lax–Friedrichs)
//! interface fluxes on the square `[-2.5, 2.5]²`, reflective walls, adaptive
//! CFL time step, uniform recording stride.
//!
//! The state is the conserved triple `(h, hu, hv)`; recorded frames carry the
//! learning channels `[h, u_x, u_y]` with `u = hu/h`.

use crate::patching::TrajectoryField;
use crate::rng::stream;
use rand::Rng;

use super::{Family, GenError};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweConfig {
    /// Grid side (cells per dimension).
    pub grid: usize,
    /// Gravitational constant.
    pub g_r: f64,
    /// Courant number for the adaptive internal step.
    pub cfl: f64,
    /// Time between recorded frames.
    pub dt_record: f64,
    /// Number of recorded frames (the first is the initial state).
    pub frames: usize,
    /// Dam-break center.
    pub center: (f64, f64),
    /// Dam radius.
    pub radius: f64,
    /// Water depth inside the dam.
    pub h_inner: f64,
    /// Water depth outside.
    pub h_outer: f64,
}

/// Half-width of the domain `[-2.5, 2.5]²`.
pub const SWE_HALF_WIDTH: f64 = 2.5;

impl SweConfig {
    /// Fixed geometry with a centered dam — the deterministic baseline used
    /// by validation tests.
    pub fn centered(grid: usize, frames: usize) -> Self {
        Self {
            grid,
            g_r: 1.0,
            cfl: 0.4,
            dt_record: 0.04,
            frames,
            center: (0.0, 0.0),
            radius: 0.5,
            h_inner: 2.0,
            h_outer: 1.0,
        }
    }

    /// Randomized dam break drawn from one sample's RNG stream.
    pub fn sampled(grid: usize, frames: usize, rng: &mut impl Rng) -> Self {
        Self {
            grid,
            g_r: rng.gen_range(0.8..1.2),
            cfl: 0.4,
            dt_record: 0.04,
            frames,
            center: (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            radius: rng.gen_range(0.3..0.7),
            h_inner: rng.gen_range(1.5..2.2),
            h_outer: rng.gen_range(0.8..1.1),
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.grid < 4 {
            return Err(GenError::Config(format!("grid side {} too small", self.grid)));
        }
        if self.g_r <= 0.0 {
            return Err(GenError::Config(format!("gravity {} must be positive", self.g_r)));
        }
        if !(self.cfl > 0.0 && self.cfl <= 0.5) {
            return Err(GenError::Config(format!("CFL {} outside (0, 0.5]", self.cfl)));
        }
        if self.dt_record <= 0.0 || self.frames < 2 {
            return Err(GenError::Config("need a positive stride and at least 2 frames".into()));
        }
        if !(self.h_inner >= self.h_outer && self.h_outer > 0.0) {
            return Err(GenError::Config(format!(
                "need inner depth >= outer depth > 0, got {} and {}",
                self.h_inner, self.h_outer
            )));
        }
        if self.radius <= 0.0 {
            return Err(GenError::Config("dam radius must be positive".into()));
        }
        Ok(())
    }

    /// The per-sample symbolic system with this sample's constants inline.
    pub fn equation_text(&self) -> String {
        format!(
            "dt(h) + div(h*u) = 0; dt(h*u) + div(h*(u*u) + 0.5*{g}*h^2) = -({g}*h*grad(b))",
            g = self.g_r
        )
    }
}

/// One conserved-variable field on the cell grid.
struct State {
    n: usize,
    h: Vec<f64>,
    hu: Vec<f64>,
    hv: Vec<f64>,
}

impl State {
    fn zeros(n: usize) -> Self {
        Self { n, h: vec![0.0; n * n], hu: vec![0.0; n * n], hv: vec![0.0; n * n] }
    }
}

/// Rusanov flux through one interface, oriented along the normal direction.
/// `hn` is the normal momentum, `ht` the tangential one. Returns the flux of
/// `(h, hn, ht)`.
#[inline]
fn rusanov(
    g: f64,
    h_l: f64,
    hn_l: f64,
    ht_l: f64,
    h_r: f64,
    hn_r: f64,
    ht_r: f64,
) -> (f64, f64, f64) {
    let (ul, ur) = (hn_l / h_l, hn_r / h_r);
    let (cl, cr) = ((g * h_l).sqrt(), (g * h_r).sqrt());
    let s = (ul.abs() + cl).max(ur.abs() + cr);
    let fl = (hn_l, hn_l * ul + 0.5 * g * h_l * h_l, ht_l * ul);
    let fr = (hn_r, hn_r * ur + 0.5 * g * h_r * h_r, ht_r * ur);
    (
        0.5 * (fl.0 + fr.0) - 0.5 * s * (h_r - h_l),
        0.5 * (fl.1 + fr.1) - 0.5 * s * (hn_r - hn_l),
        0.5 * (fl.2 + fr.2) - 0.5 * s * (ht_r - ht_l),
    )
}

/// Largest wave speed `|u| + √(gh)` over both directions.
fn max_signal(g: f64, s: &State) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..s.h.len() {
        let c = (g * s.h[i]).sqrt();
        let u = (s.hu[i] / s.h[i]).abs();
        let v = (s.hv[i] / s.h[i]).abs();
        m = m.max(u + c).max(v + c);
    }
    m
}

/// One forward-Euler finite-volume update with time step `dt`.
fn step(g: f64, dx: f64, dt: f64, s: &State, out: &mut State) {
    let n = s.n;
    let idx = |i: usize, j: usize| j * n + i;
    // Mirror ghost: same depth and tangential momentum, negated normal
    // momentum. The Rusanov mass flux through such an interface is exactly
    // zero, so the walls conserve mass to round-off.
    let r = dt / dx;
    for j in 0..n {
        for i in 0..n {
            let c = idx(i, j);
            // x-direction neighbors (reflective in x).
            let (hw, huw, hvw) =
                if i == 0 { (s.h[c], -s.hu[c], s.hv[c]) } else { let l = idx(i - 1, j); (s.h[l], s.hu[l], s.hv[l]) };
            let (he, hue, hve) =
                if i == n - 1 { (s.h[c], -s.hu[c], s.hv[c]) } else { let rr = idx(i + 1, j); (s.h[rr], s.hu[rr], s.hv[rr]) };
            // y-direction neighbors (reflective in y).
            let (hs, hus, hvs) =
                if j == 0 { (s.h[c], s.hu[c], -s.hv[c]) } else { let d = idx(i, j - 1); (s.h[d], s.hu[d], s.hv[d]) };
            let (hn, hun, hvn) =
                if j == n - 1 { (s.h[c], s.hu[c], -s.hv[c]) } else { let u = idx(i, j + 1); (s.h[u], s.hu[u], s.hv[u]) };

            let fw = rusanov(g, hw, huw, hvw, s.h[c], s.hu[c], s.hv[c]);
            let fe = rusanov(g, s.h[c], s.hu[c], s.hv[c], he, hue, hve);
            // In y the normal momentum is hv and the tangential is hu.
            let fs = rusanov(g, hs, hvs, hus, s.h[c], s.hv[c], s.hu[c]);
            let fn_ = rusanov(g, s.h[c], s.hv[c], s.hu[c], hn, hvn, hun);

            out.h[c] = s.h[c] - r * ((fe.0 - fw.0) + (fn_.0 - fs.0));
            out.hu[c] = s.hu[c] - r * ((fe.1 - fw.1) + (fn_.2 - fs.2));
            out.hv[c] = s.hv[c] - r * ((fe.2 - fw.2) + (fn_.1 - fs.1));
        }
    }
}

/// Solves one dam-break trajectory. Frames are recorded at `t = k·dt_record`
/// starting from the initial state.
pub fn solve_swe(cfg: &SweConfig) -> Result<TrajectoryField, GenError> {
    cfg.validate()?;
    let n = cfg.grid;
    let dx = 2.0 * SWE_HALF_WIDTH / n as f64;
    let cell = |i: usize| -SWE_HALF_WIDTH + (i as f64 + 0.5) * dx;

    let mut s = State::zeros(n);
    for j in 0..n {
        for i in 0..n {
            let (x, y) = (cell(i) - cfg.center.0, cell(j) - cfg.center.1);
            let inside = x * x + y * y <= cfg.radius * cfg.radius;
            s.h[j * n + i] = if inside { cfg.h_inner } else { cfg.h_outer };
        }
    }
    let mut scratch = State::zeros(n);

    let mut values = Vec::with_capacity(cfg.frames * 3 * n * n);
    let record = |s: &State, values: &mut Vec<f64>| {
        values.extend_from_slice(&s.h);
        values.extend(s.hu.iter().zip(&s.h).map(|(m, h)| m / h));
        values.extend(s.hv.iter().zip(&s.h).map(|(m, h)| m / h));
    };
    record(&s, &mut values);

    let mut t = 0.0;
    for frame in 1..cfg.frames {
        let target = frame as f64 * cfg.dt_record;
        while t < target {
            let smax = max_signal(cfg.g_r, &s);
            if !smax.is_finite() {
                return Err(GenError::Instability(format!("non-finite wave speed at t = {t:.4}")));
            }
            let dt = (cfg.cfl * dx / smax).min(target - t);
            step(cfg.g_r, dx, dt, &s, &mut scratch);
            std::mem::swap(&mut s, &mut scratch);
            if let Some(bad) = s.h.iter().position(|&h| !(h > 0.0) || !h.is_finite()) {
                return Err(GenError::Instability(format!(
                    "non-positive depth {} in cell {bad} at t = {t:.4}",
                    s.h[bad]
                )));
            }
            t += dt;
        }
        record(&s, &mut values);
    }

    Ok(TrajectoryField::new(
        values,
        cfg.frames,
        3,
        n,
        n,
        cfg.dt_record,
        vec!["h".into(), "u_x".into(), "u_y".into()],
        Family::Swe.id(),
    )?)
}

/// Convenience wrapper used by the dataset builder: draws a sampled config
/// from the per-sample stream derived from `(seed, index)`.
pub fn generate_swe(
    grid: usize,
    frames: usize,
    seed: u64,
    index: u64,
) -> Result<(SweConfig, TrajectoryField), GenError> {
    let mut rng = stream(seed, &format!("sample/{}/{index}", Family::Swe.name()));
    let cfg = SweConfig::sampled(grid, frames, &mut rng);
    let field = solve_swe(&cfg)?;
    Ok((cfg, field))
}
