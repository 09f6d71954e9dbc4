//! Morlet wavelet filter bank: dilated and rotated complex wavelets, their
//! real phase-shifted versions, and the dilated Gaussian low-pass.
//!
//! Filters are evaluated analytically at every grid point for each scale
//! and orientation (never resampled from the base grid), so the dilation
//! law `psi_j(0) = 2^{-2j} psi_0(0)` holds exactly at the origin.
//!
//! The zero-average correction has two parts. A frozen constant
//! `beta = exp(-sigma^2 xi^2 / 2)` removes the analytic DC component of the
//! Gabor term, keeping origin values proportional across scales. What
//! remains is a grid-level residual from sampling, which is cancelled by
//! subtracting `eps * h` where `h = g - g^2` vanishes at the origin and
//! `eps = sum(core) / sum(h)` is computed on the filter's own grid.

use crate::error::{Error, Result};

/// Default Gaussian envelope width in pixels (scaled by `2^j` per scale).
pub const DEFAULT_SIGMA: f64 = 0.8;
/// Default center frequency in radians per pixel.
pub const DEFAULT_XI: f64 = 3.0 * std::f64::consts::PI / 4.0;
/// Default envelope ellipticity.
pub const DEFAULT_SLANT: f64 = 0.5;
/// Default base filter side length.
pub const DEFAULT_SUPPORT: usize = 17;

/// Shape constants of the Morlet family plus the grid side length.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct MorletParams {
    /// Spatial width of the Gaussian envelope, in pixels.
    pub sigma: f64,
    /// Center frequency, radians per pixel; must lie in `(0, pi]`.
    pub xi: f64,
    /// Ellipticity of the envelope perpendicular to the oscillation.
    pub slant: f64,
    /// Filter side length in pixels; odd and at least 3. For a filter bank
    /// this acts as the cap on per-scale supports (the image side).
    pub support: usize,
}

impl Default for MorletParams {
    fn default() -> Self {
        MorletParams {
            sigma: DEFAULT_SIGMA,
            xi: DEFAULT_XI,
            slant: DEFAULT_SLANT,
            support: DEFAULT_SUPPORT,
        }
    }
}

impl MorletParams {
    /// Checks the type invariants, naming the offending field on failure.
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "morlet sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.xi.is_finite() && self.xi > 0.0 && self.xi <= std::f64::consts::PI) {
            return Err(Error::Config(format!(
                "morlet xi must lie in (0, pi], got {}",
                self.xi
            )));
        }
        if !(self.slant.is_finite() && self.slant > 0.0) {
            return Err(Error::Config(format!(
                "morlet slant must be positive, got {}",
                self.slant
            )));
        }
        if self.support < 3 || self.support % 2 == 0 {
            return Err(Error::Config(format!(
                "morlet support must be odd and >= 3, got {}",
                self.support
            )));
        }
        Ok(())
    }
}

/// A complex 2-D filter on a square odd-sided grid, together with the
/// analytic recipe (parameters, scale, orientation, amplitude) that
/// produced it, so it can be re-evaluated at transformed coordinates.
#[derive(Clone, Debug)]
pub struct ComplexFilter {
    support: usize,
    re: Vec<f64>,
    im: Vec<f64>,
    params: MorletParams,
    amplitude: f64,
    j: usize,
    theta: f64,
}

impl ComplexFilter {
    pub fn support(&self) -> usize {
        self.support
    }

    /// Real taps in row-major order (rows are y, columns are x, both
    /// centered: index 0 corresponds to coordinate `-(support-1)/2`).
    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn scale_index(&self) -> usize {
        self.j
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Tap at grid coordinates `(x, y)` with the origin at the center.
    pub fn at(&self, x: isize, y: isize) -> (f64, f64) {
        let half = (self.support / 2) as isize;
        debug_assert!(x.abs() <= half && y.abs() <= half);
        let idx = ((y + half) as usize) * self.support + (x + half) as usize;
        (self.re[idx], self.im[idx])
    }

    /// Center tap `psi(0)`.
    pub fn center(&self) -> (f64, f64) {
        self.at(0, 0)
    }

    /// Componentwise sum over all taps.
    pub fn sum(&self) -> (f64, f64) {
        (self.re.iter().sum(), self.im.iter().sum())
    }

    /// Largest complex magnitude over all taps.
    pub fn max_abs(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .fold(0.0, |m, (r, i)| m.max(r.hypot(*i)))
    }

    /// Sum of complex magnitudes (the L1 norm used for normalisation).
    pub fn l1(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).sum()
    }

    /// Diagnostic: re-evaluates this filter's analytic formula on a grid
    /// pre-rotated by `rotation` radians. Since
    /// `psi_{j,theta}(r_rho u) = psi_{j,theta-rho}(u)`, this is how the
    /// rotation-closure property of a bank is verified.
    pub fn evaluated_on_rotated_grid(&self, rotation: f64) -> ComplexFilter {
        let (re, im) = evaluate_raw(&self.params, self.j, self.theta, self.support, rotation);
        let mut f = ComplexFilter {
            support: self.support,
            re,
            im,
            params: self.params,
            amplitude: self.amplitude,
            j: self.j,
            theta: self.theta,
        };
        f.apply_amplitude();
        f
    }

    fn apply_amplitude(&mut self) {
        for v in &mut self.re {
            *v *= self.amplitude;
        }
        for v in &mut self.im {
            *v *= self.amplitude;
        }
    }
}

/// A real 2-D filter on a square odd-sided grid, same layout as
/// [`ComplexFilter`].
#[derive(Clone, Debug)]
pub struct RealFilter {
    support: usize,
    data: Vec<f64>,
}

impl RealFilter {
    pub fn support(&self) -> usize {
        self.support
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, x: isize, y: isize) -> f64 {
        let half = (self.support / 2) as isize;
        debug_assert!(x.abs() <= half && y.abs() <= half);
        self.data[((y + half) as usize) * self.support + (x + half) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Discrete second spatial moment `sum (x^2 + y^2) f(x, y)`.
    pub fn second_moment(&self) -> f64 {
        let half = (self.support / 2) as isize;
        let mut acc = 0.0;
        for y in -half..=half {
            for x in -half..=half {
                acc += ((x * x + y * y) as f64) * self.at(x, y);
            }
        }
        acc
    }
}

/// Evaluates the corrected Morlet formula for scale `j`, orientation
/// `theta`, on a `support`-sided grid whose coordinates are pre-rotated by
/// `grid_rot`. The dilation amplitude `2^{-2j}` is included; the bank's L1
/// amplitude is not.
fn evaluate_raw(
    params: &MorletParams,
    j: usize,
    theta: f64,
    support: usize,
    grid_rot: f64,
) -> (Vec<f64>, Vec<f64>) {
    let beta = (-params.sigma * params.sigma * params.xi * params.xi / 2.0).exp();
    let half = (support / 2) as isize;
    let scale = (0.5f64).powi(j as i32);
    let amp = scale * scale;
    let (ct, st) = (theta.cos(), theta.sin());
    let (cr, sr) = (grid_rot.cos(), grid_rot.sin());
    let inv_two_sigma_sq = 1.0 / (2.0 * params.sigma * params.sigma);

    let n = support * support;
    let mut re = Vec::with_capacity(n);
    let mut im = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(n);
    let (mut sum_re, mut sum_im, mut sum_h) = (0.0f64, 0.0f64, 0.0f64);
    for uy in -half..=half {
        for ux in -half..=half {
            let (fx, fy) = (ux as f64, uy as f64);
            // Optional grid pre-rotation r_{grid_rot}, then the filter's own
            // coordinate map v = 2^{-j} r_{-theta} u.
            let gx = cr * fx - sr * fy;
            let gy = sr * fx + cr * fy;
            let vx = (ct * gx + st * gy) * scale;
            let vy = (-st * gx + ct * gy) * scale;
            let sv = params.slant * vy;
            let g = (-(vx * vx + sv * sv) * inv_two_sigma_sq).exp();
            let (s, c) = (params.xi * vx).sin_cos();
            let cre = amp * (c * g - beta * g);
            let cim = amp * (s * g);
            let hh = g - g * g;
            sum_re += cre;
            sum_im += cim;
            sum_h += hh;
            re.push(cre);
            im.push(cim);
            h.push(hh);
        }
    }
    let eps_re = sum_re / sum_h;
    let eps_im = sum_im / sum_h;
    for i in 0..n {
        re[i] -= eps_re * h[i];
        im[i] -= eps_im * h[i];
    }
    (re, im)
}

/// L1-normalising amplitude for the family: `1 / l1` of the unit-amplitude
/// base filter on the given grid.
fn l1_amplitude(params: &MorletParams, support: usize) -> f64 {
    let (re, im) = evaluate_raw(params, 0, 0.0, support, 0.0);
    let l1: f64 = re.iter().zip(&im).map(|(r, i)| r.hypot(*i)).sum();
    1.0 / l1
}

/// Builds the base (scale 0, orientation 0) complex Morlet filter,
/// L1-normalised on its own grid.
pub fn build_base_morlet(params: &MorletParams) -> Result<ComplexFilter> {
    params.validate()?;
    let amplitude = l1_amplitude(params, params.support);
    let (re, im) = evaluate_raw(params, 0, 0.0, params.support, 0.0);
    let mut f = ComplexFilter {
        support: params.support,
        re,
        im,
        params: *params,
        amplitude,
        j: 0,
        theta: 0.0,
    };
    f.apply_amplitude();
    Ok(f)
}

/// Produces the scale-`j`, orientation-`theta` member of `base`'s family:
/// `output(u) = 2^{-2j} base(2^{-j} r_{-theta} u)`, re-evaluated
/// analytically on `base`'s grid rather than resampled from its taps.
pub fn dilate_rotate(base: &ComplexFilter, j: usize, theta: f64) -> Result<ComplexFilter> {
    if !(0.0..std::f64::consts::PI).contains(&theta) {
        return Err(Error::Config(format!(
            "dilate_rotate theta must lie in [0, pi), got {theta}"
        )));
    }
    let (re, im) = evaluate_raw(&base.params, j, theta, base.support, 0.0);
    let mut f = ComplexFilter {
        support: base.support,
        re,
        im,
        params: base.params,
        amplitude: base.amplitude,
        j,
        theta,
    };
    f.apply_amplitude();
    Ok(f)
}

/// Real filter `Real(e^{-i alpha} psi) = cos(alpha) Re(psi) + sin(alpha) Im(psi)`.
pub fn phase_shift(psi: &ComplexFilter, alpha: f64) -> RealFilter {
    let (ca, sa) = (alpha.cos(), alpha.sin());
    let data = psi
        .re
        .iter()
        .zip(&psi.im)
        .map(|(r, i)| ca * r + sa * i)
        .collect();
    RealFilter {
        support: psi.support,
        data,
    }
}

fn gaussian_1d(sigma: f64, support: usize) -> Vec<f64> {
    let half = (support / 2) as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut g: Vec<f64> = (-half..=half)
        .map(|u| (-(u * u) as f64 * inv).exp())
        .collect();
    let s: f64 = g.iter().sum();
    for v in &mut g {
        *v /= s;
    }
    g
}

fn gaussian_lowpass_with_sigma(j_count: usize, support: usize, base_sigma: f64) -> Result<RealFilter> {
    if j_count < 1 {
        return Err(Error::Config(format!(
            "gaussian low-pass needs J >= 1, got {j_count}"
        )));
    }
    let min_support = (1usize << j_count) + 1;
    if support % 2 == 0 || support < min_support {
        return Err(Error::Config(format!(
            "gaussian low-pass support must be odd and >= {min_support}, got {support}"
        )));
    }
    let sigma = base_sigma * (1u64 << j_count) as f64;
    let p = gaussian_1d(sigma, support);
    let mut data = Vec::with_capacity(support * support);
    for y in 0..support {
        for x in 0..support {
            data.push(p[y] * p[x]);
        }
    }
    Ok(RealFilter { support, data })
}

/// Isotropic Gaussian averaging kernel dilated by `2^J`, normalised to unit
/// sum. Separable: the 2-D taps are the outer product of a normalised 1-D
/// Gaussian with itself.
pub fn build_gaussian_lowpass(j_count: usize, support: usize) -> Result<RealFilter> {
    gaussian_lowpass_with_sigma(j_count, support, DEFAULT_SIGMA)
}

/// Per-scale filter side: `min(8 * 2^j + 1, cap)`, forced odd. `cap` is the
/// image side (or the configured support cap).
pub fn support_for_scale(j: usize, cap: usize) -> usize {
    let natural = 8 * (1usize << j) + 1;
    let cap_odd = if cap % 2 == 0 { cap - 1 } else { cap };
    natural.min(cap_odd)
}

/// The immutable Morlet filter bank: `J*L` complex wavelets, `J*L*A` real
/// phase-shifted wavelets, and one Gaussian low-pass.
#[derive(Clone, Debug)]
pub struct WaveletFilterBank {
    j_count: usize,
    angles: usize,
    phases: usize,
    params: MorletParams,
    amplitude: f64,
    psi: Vec<Vec<ComplexFilter>>,
    psi_real: Vec<Vec<Vec<RealFilter>>>,
    phi: RealFilter,
    phi_1d: Vec<f64>,
}

impl WaveletFilterBank {
    /// Number of dyadic scales J.
    pub fn j_count(&self) -> usize {
        self.j_count
    }

    /// Number of orientations L.
    pub fn angles(&self) -> usize {
        self.angles
    }

    /// Number of phases A.
    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn params(&self) -> &MorletParams {
        &self.params
    }

    /// The frozen L1 amplitude shared by every filter in the bank.
    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Orientation angle of index `l`: `l * pi / L`.
    pub fn theta(&self, l: usize) -> f64 {
        l as f64 * std::f64::consts::PI / self.angles as f64
    }

    /// Phase angle of index `k`: `k * pi / A`.
    pub fn alpha(&self, k: usize) -> f64 {
        k as f64 * std::f64::consts::PI / self.phases as f64
    }

    pub fn psi(&self, j: usize, l: usize) -> &ComplexFilter {
        &self.psi[j][l]
    }

    pub fn psi_real(&self, j: usize, l: usize, k: usize) -> &RealFilter {
        &self.psi_real[j][l][k]
    }

    pub fn phi(&self) -> &RealFilter {
        &self.phi
    }

    /// 1-D factor of the separable low-pass, for fast convolution.
    pub fn phi_1d(&self) -> &[f64] {
        &self.phi_1d
    }
}

/// Builds the full bank. `params.support` caps the per-scale filter sides
/// (pass the image side, made odd, for image work).
pub fn build_filter_bank(
    j_count: usize,
    angles: usize,
    phases: usize,
    params: &MorletParams,
) -> Result<WaveletFilterBank> {
    params.validate()?;
    if j_count < 1 || angles < 1 || phases < 1 {
        return Err(Error::Config(format!(
            "filter bank needs J >= 1, L >= 1, A >= 1; got J={j_count} L={angles} A={phases}"
        )));
    }
    // The amplitude is frozen from the smallest-scale grid the bank uses,
    // so banks with different caps but the same shape constants share it.
    let amplitude = l1_amplitude(params, support_for_scale(0, params.support));

    let mut psi = Vec::with_capacity(j_count);
    let mut psi_real = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let support = support_for_scale(j, params.support);
        let mut row = Vec::with_capacity(angles);
        let mut row_real = Vec::with_capacity(angles);
        for l in 0..angles {
            let theta = l as f64 * std::f64::consts::PI / angles as f64;
            let (re, im) = evaluate_raw(params, j, theta, support, 0.0);
            let mut f = ComplexFilter {
                support,
                re,
                im,
                params: *params,
                amplitude,
                j,
                theta,
            };
            f.apply_amplitude();
            let mut phases_row = Vec::with_capacity(phases);
            for k in 0..phases {
                let alpha = k as f64 * std::f64::consts::PI / phases as f64;
                phases_row.push(phase_shift(&f, alpha));
            }
            row.push(f);
            row_real.push(phases_row);
        }
        psi.push(row);
        psi_real.push(row_real);
    }

    let phi_support = support_for_scale(j_count, params.support);
    let phi = gaussian_lowpass_with_sigma(j_count, phi_support, params.sigma)?;
    let phi_1d = gaussian_1d(params.sigma * (1u64 << j_count) as f64, phi_support);

    Ok(WaveletFilterBank {
        j_count,
        angles,
        phases,
        params: *params,
        amplitude,
        psi,
        psi_real,
        phi,
        phi_1d,
    })
}
