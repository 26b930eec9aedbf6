//! 2D incompressible Navier–Stokes in vorticity–streamfunction form on the
//! periodic square `[0, 2π)²`, solved pseudo-spectrally: spectral derivatives,
//! 2/3-rule dealiasing of the advection product, RK4 in time. The velocity is
//! recovered from the streamfunction, so it is divergence-free to round-off.
//! A passive scalar rides along via semi-Lagrangian advection; optional
//! buoyancy-style forcing `F = (0, f·c)` enters the vorticity equation as
//! `curl F = f·∂ₓc`.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::patching::TrajectoryField;
use crate::rng::stream;
use rand::Rng;

use super::{Family, GenError};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum InitCondition {
    /// Random field with wavenumbers `|k| ≤ k_max`, unit RMS.
    BandLimited { k_max: usize },
    /// `ω = 2 cos x cos y` — an exact Navier–Stokes solution that decays as
    /// `e^{−2νt}`, used as the solver's analytic oracle.
    TaylorGreen,
    /// Zero vorticity and scalar.
    Zero,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InsConfig {
    /// Grid side.
    pub grid: usize,
    /// Kinematic viscosity.
    pub nu: f64,
    /// Buoyancy amplitude `f` in `F = (0, f·c)`; zero disables forcing.
    pub forcing: f64,
    /// Courant number for the advective step limit.
    pub cfl: f64,
    /// Time between recorded frames.
    pub dt_record: f64,
    /// Number of recorded frames (the first is the initial state).
    pub frames: usize,
    pub init: InitCondition,
}

impl InsConfig {
    /// Deterministic oracle setup.
    pub fn taylor_green(grid: usize, nu: f64, dt_record: f64, frames: usize) -> Self {
        Self { grid, nu, forcing: 0.0, cfl: 0.4, dt_record, frames, init: InitCondition::TaylorGreen }
    }

    /// Randomized turbulence-like sample; `forced` switches the buoyancy term
    /// on with `f ~ U[0.2, 0.5]`.
    pub fn sampled(grid: usize, frames: usize, forced: bool, rng: &mut impl Rng) -> Self {
        let nu = (rng.gen_range(1e-3f64.ln()..1e-2f64.ln())).exp();
        let forcing = if forced { rng.gen_range(0.2..0.5) } else { 0.0 };
        Self {
            grid,
            nu,
            forcing,
            cfl: 0.4,
            dt_record: 0.3,
            frames,
            init: InitCondition::BandLimited { k_max: 8.min(grid / 3) },
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.grid < 8 || !self.grid.is_power_of_two() {
            return Err(GenError::Config(format!(
                "grid side {} must be a power of two ≥ 8",
                self.grid
            )));
        }
        if self.nu <= 0.0 {
            return Err(GenError::Config(format!("viscosity {} must be positive", self.nu)));
        }
        if self.forcing < 0.0 {
            return Err(GenError::Config("forcing amplitude must be non-negative".into()));
        }
        if !(self.cfl > 0.0 && self.cfl <= 0.5) {
            return Err(GenError::Config(format!("CFL {} outside (0, 0.5]", self.cfl)));
        }
        if self.dt_record <= 0.0 || self.frames < 2 {
            return Err(GenError::Config("need a positive stride and at least 2 frames".into()));
        }
        if let InitCondition::BandLimited { k_max } = self.init {
            if k_max == 0 || k_max > self.grid / 3 {
                return Err(GenError::Config(format!(
                    "band limit {k_max} outside 1..={} (dealiased range)",
                    self.grid / 3
                )));
            }
        }
        Ok(())
    }

    /// The per-sample symbolic system with this sample's constants inline.
    pub fn equation_text(&self) -> String {
        if self.forcing > 0.0 {
            format!(
                "rho*(dt(u) + u*grad(u)) = -grad(p) + {nu}*lap(u) + {f}*F; div(u) = 0; \
                 dt(c) + div(c*u) = 0",
                nu = self.nu,
                f = self.forcing
            )
        } else {
            format!(
                "rho*(dt(u) + u*grad(u)) = -grad(p) + {nu}*lap(u); div(u) = 0; \
                 dt(c) + div(c*u) = 0",
                nu = self.nu
            )
        }
    }
}

/// Shared FFT plans plus wavenumber tables for an `n × n` grid.
pub(crate) struct Spectral {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// Signed wavenumber for each index.
    k: Vec<f64>,
}

impl Spectral {
    pub(crate) fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let k = (0..n).map(|i| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 }).collect();
        Self { n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n), k }
    }

    /// In-place 2D FFT (rows, then columns).
    pub(crate) fn fft2(&self, buf: &mut [Complex<f64>]) {
        let n = self.n;
        for row in buf.chunks_mut(n) {
            self.fwd.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = buf[i * n + j];
            }
            self.fwd.process(&mut col);
            for i in 0..n {
                buf[i * n + j] = col[i];
            }
        }
    }

    /// In-place inverse 2D FFT, normalized so `ifft2(fft2(x)) == x`.
    pub(crate) fn ifft2(&self, buf: &mut [Complex<f64>]) {
        let n = self.n;
        for row in buf.chunks_mut(n) {
            self.inv.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = buf[i * n + j];
            }
            self.inv.process(&mut col);
            for i in 0..n {
                buf[i * n + j] = col[i];
            }
        }
        let scale = 1.0 / (n * n) as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }

    fn to_physical(&self, hat: &[Complex<f64>]) -> Vec<f64> {
        let mut buf = hat.to_vec();
        self.ifft2(&mut buf);
        buf.into_iter().map(|z| z.re).collect()
    }

    fn to_spectral(&self, phys: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = phys.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft2(&mut buf);
        buf
    }

    /// Zeroes modes beyond two-thirds of the Nyquist wavenumber.
    fn dealias(&self, hat: &mut [Complex<f64>]) {
        let n = self.n;
        let cutoff = n as f64 / 3.0;
        for jy in 0..n {
            for jx in 0..n {
                if self.k[jx].abs() > cutoff || self.k[jy].abs() > cutoff {
                    hat[jy * n + jx] = Complex::new(0.0, 0.0);
                }
            }
        }
    }

    /// Physical-space velocity from spectral vorticity via the
    /// streamfunction: `ψ̂ = ω̂/|k|²`, `u = ∂_y ψ`, `v = −∂_x ψ`.
    pub(crate) fn velocity(&self, w_hat: &[Complex<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut u_hat = vec![Complex::new(0.0, 0.0); n * n];
        let mut v_hat = vec![Complex::new(0.0, 0.0); n * n];
        for jy in 0..n {
            for jx in 0..n {
                let (kx, ky) = (self.k[jx], self.k[jy]);
                let k2 = kx * kx + ky * ky;
                if k2 == 0.0 {
                    continue;
                }
                let psi = w_hat[jy * n + jx] / k2;
                // i·ky·ψ and −i·kx·ψ
                u_hat[jy * n + jx] = Complex::new(-ky * psi.im, ky * psi.re);
                v_hat[jy * n + jx] = Complex::new(kx * psi.im, -kx * psi.re);
            }
        }
        (self.to_physical(&u_hat), self.to_physical(&v_hat))
    }

    /// `dω̂/dt = −dealias(u·∇ω)^ − ν|k|²ω̂ + f·(i kₓ ĉ)`.
    fn rhs(
        &self,
        w_hat: &[Complex<f64>],
        c_hat_forcing: Option<&[Complex<f64>]>,
        nu: f64,
        f: f64,
    ) -> Vec<Complex<f64>> {
        let n = self.n;
        let (u, v) = self.velocity(w_hat);
        let mut wx_hat = vec![Complex::new(0.0, 0.0); n * n];
        let mut wy_hat = vec![Complex::new(0.0, 0.0); n * n];
        for jy in 0..n {
            for jx in 0..n {
                let (kx, ky) = (self.k[jx], self.k[jy]);
                let w = w_hat[jy * n + jx];
                wx_hat[jy * n + jx] = Complex::new(-kx * w.im, kx * w.re);
                wy_hat[jy * n + jx] = Complex::new(-ky * w.im, ky * w.re);
            }
        }
        let wx = self.to_physical(&wx_hat);
        let wy = self.to_physical(&wy_hat);
        let nl: Vec<f64> = (0..n * n).map(|i| u[i] * wx[i] + v[i] * wy[i]).collect();
        let mut nl_hat = self.to_spectral(&nl);
        self.dealias(&mut nl_hat);
        let mut out = vec![Complex::new(0.0, 0.0); n * n];
        for jy in 0..n {
            for jx in 0..n {
                let i = jy * n + jx;
                let (kx, ky) = (self.k[jx], self.k[jy]);
                let k2 = kx * kx + ky * ky;
                let mut d = -nl_hat[i] - w_hat[i] * (nu * k2);
                if let Some(c_hat) = c_hat_forcing {
                    // curl (0, f·c) = f·∂ₓc
                    let c = c_hat[i];
                    d += Complex::new(-kx * c.im, kx * c.re) * f;
                }
                out[i] = d;
            }
        }
        out
    }
}

/// Periodic bilinear sample of a grid field at fractional coordinates
/// measured in cells.
fn bilinear(field: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let xf = x.rem_euclid(n as f64);
    let yf = y.rem_euclid(n as f64);
    let (i0, j0) = (xf.floor() as usize % n, yf.floor() as usize % n);
    let (i1, j1) = ((i0 + 1) % n, (j0 + 1) % n);
    let (fx, fy) = (xf - xf.floor(), yf - yf.floor());
    let f00 = field[j0 * n + i0];
    let f10 = field[j0 * n + i1];
    let f01 = field[j1 * n + i0];
    let f11 = field[j1 * n + i1];
    f00 * (1.0 - fx) * (1.0 - fy) + f10 * fx * (1.0 - fy) + f01 * (1.0 - fx) * fy + f11 * fx * fy
}

/// Semi-Lagrangian advection of `c` by `(u, v)` over `dt`: trace each grid
/// point backward along the flow (midpoint rule) and sample the old field.
/// Unconditionally stable and bounded by the hull of the old values.
fn advect_scalar(c: &[f64], u: &[f64], v: &[f64], n: usize, dt: f64) -> Vec<f64> {
    let h = 2.0 * std::f64::consts::PI / n as f64; // cell size
    let mut out = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let (ux, vy) = (u[j * n + i], v[j * n + i]);
            // Midpoint of the backward trajectory, in cell units.
            let xm = i as f64 - 0.5 * dt * ux / h;
            let ym = j as f64 - 0.5 * dt * vy / h;
            let um = bilinear(u, n, xm, ym);
            let vm = bilinear(v, n, xm, ym);
            let xd = i as f64 - dt * um / h;
            let yd = j as f64 - dt * vm / h;
            out[j * n + i] = bilinear(c, n, xd, yd);
        }
    }
    out
}

/// Random real field with modes `0 < |k| ≤ k_max`, scaled afterwards by the
/// caller. Built spectrally with Hermitian symmetry so the inverse transform
/// is real.
fn band_limited(sp: &Spectral, k_max: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = sp.n;
    let mut hat = vec![Complex::new(0.0, 0.0); n * n];
    let km = k_max as f64;
    for jy in 0..n {
        for jx in 0..n {
            let (kx, ky) = (sp.k[jx], sp.k[jy]);
            if kx * kx + ky * ky > km * km || (kx == 0.0 && ky == 0.0) {
                continue;
            }
            // Fill each conjugate pair once, from its "positive" member.
            if ky < 0.0 || (ky == 0.0 && kx < 0.0) {
                continue;
            }
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let z = Complex::new(theta.cos(), theta.sin());
            hat[jy * n + jx] = z;
            let cx = (n - jx) % n;
            let cy = (n - jy) % n;
            hat[cy * n + cx] = z.conj();
        }
    }
    sp.to_physical(&hat)
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Solves one trajectory; `rng` drives the random initial conditions.
/// Channels are `[u_x, u_y, c]`.
pub fn solve_ins(cfg: &InsConfig, rng: &mut impl Rng) -> Result<TrajectoryField, GenError> {
    cfg.validate()?;
    let n = cfg.grid;
    let sp = Spectral::new(n);
    let two_pi = std::f64::consts::TAU;
    let dx = two_pi / n as f64;

    // Initial vorticity and scalar.
    let (mut w_hat, mut c) = match cfg.init {
        InitCondition::TaylorGreen => {
            let mut w = vec![0.0; n * n];
            let mut cc = vec![0.0; n * n];
            for j in 0..n {
                for i in 0..n {
                    let (x, y) = (i as f64 * dx, j as f64 * dx);
                    w[j * n + i] = 2.0 * x.cos() * y.cos();
                    cc[j * n + i] = 0.5 * (1.0 + x.sin() * y.sin());
                }
            }
            (sp.to_spectral(&w), cc)
        }
        InitCondition::Zero => (vec![Complex::new(0.0, 0.0); n * n], vec![0.0; n * n]),
        InitCondition::BandLimited { k_max } => {
            let mut w = band_limited(&sp, k_max, rng);
            let r = rms(&w);
            if r > 0.0 {
                for v in &mut w {
                    *v /= r;
                }
            }
            let raw = band_limited(&sp, 4.min(k_max), rng);
            let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
            let span = (hi - lo).max(1e-12);
            let cc = raw.iter().map(|&v| (v - lo) / span).collect();
            (sp.to_spectral(&w), cc)
        }
    };

    // RK4 stability bound for the explicit viscous term.
    let k_nyq2 = 2.0 * (n as f64 / 2.0).powi(2);
    let dt_visc = 2.5 / (cfg.nu * k_nyq2);

    let mut values = Vec::with_capacity(cfg.frames * 3 * n * n);
    let record = |w_hat: &[Complex<f64>], c: &[f64], values: &mut Vec<f64>| {
        let (u, v) = sp.velocity(w_hat);
        values.extend_from_slice(&u);
        values.extend_from_slice(&v);
        values.extend_from_slice(c);
    };
    record(&w_hat, &c, &mut values);

    let mut t = 0.0;
    for frame in 1..cfg.frames {
        let target = frame as f64 * cfg.dt_record;
        while t < target {
            let (u, v) = sp.velocity(&w_hat);
            let umax = u.iter().chain(v.iter()).fold(0.0f64, |m, &x| m.max(x.abs()));
            if !umax.is_finite() {
                return Err(GenError::Instability(format!("non-finite velocity at t = {t:.3}")));
            }
            let dt_adv = if umax > 0.0 { cfg.cfl * dx / umax } else { f64::INFINITY };
            let dt = dt_adv.min(dt_visc).min(target - t);

            let c_hat = if cfg.forcing > 0.0 { Some(sp.to_spectral(&c)) } else { None };
            let ch = c_hat.as_deref();
            let k1 = sp.rhs(&w_hat, ch, cfg.nu, cfg.forcing);
            let s1: Vec<Complex<f64>> =
                w_hat.iter().zip(&k1).map(|(w, k)| w + k * (dt / 2.0)).collect();
            let k2 = sp.rhs(&s1, ch, cfg.nu, cfg.forcing);
            let s2: Vec<Complex<f64>> =
                w_hat.iter().zip(&k2).map(|(w, k)| w + k * (dt / 2.0)).collect();
            let k3 = sp.rhs(&s2, ch, cfg.nu, cfg.forcing);
            let s3: Vec<Complex<f64>> = w_hat.iter().zip(&k3).map(|(w, k)| w + k * dt).collect();
            let k4 = sp.rhs(&s3, ch, cfg.nu, cfg.forcing);
            for i in 0..n * n {
                w_hat[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0);
            }
            // Transport the scalar with the pre-step velocity (first-order
            // splitting between the vorticity update and the scalar ride).
            c = advect_scalar(&c, &u, &v, n, dt);
            t += dt;
        }
        record(&w_hat, &c, &mut values);
    }

    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(GenError::Instability(format!("non-finite recorded value {bad}")));
    }
    Ok(TrajectoryField::new(
        values,
        cfg.frames,
        3,
        n,
        n,
        cfg.dt_record,
        vec!["u_x".into(), "u_y".into(), "c".into()],
        if cfg.forcing > 0.0 { Family::InsForced.id() } else { Family::Ins.id() },
    )?)
}

/// Dataset-builder wrapper: draws a sampled config from the per-sample
/// stream derived from `(seed, index)`.
pub fn generate_ins(
    grid: usize,
    frames: usize,
    forced: bool,
    seed: u64,
    index: u64,
) -> Result<(InsConfig, TrajectoryField), GenError> {
    let family = if forced { Family::InsForced } else { Family::Ins };
    let mut rng = stream(seed, &format!("sample/{}/{index}", family.name()));
    let cfg = InsConfig::sampled(grid, frames, forced, &mut rng);
    let field = solve_ins(&cfg, &mut rng)?;
    Ok((cfg, field))
}
