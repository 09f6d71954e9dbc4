//! First-order scattering transform.
//!
//! For an image batch `x` and a [`WaveletFilterBank`], each output path is
//! `| Real(e^{-i alpha} (x star psi_{j,theta})) |  star  phi_J`, decimated
//! with stride `2^J` (top-left sample of each block). The optional order-0
//! path is `x star phi_J`, decimated the same way. `star` is correlation
//! (the kernel is not flipped), matching the convention in [`crate::kernels`].
//!
//! Outputs are laid out channel-major: all paths of input channel 0, then
//! all paths of input channel 1, and so on. Within one input channel the
//! order is the order-0 path (if enabled) followed by `(j, theta, alpha)`
//! in lexicographic index order.

use crate::error::{Error, Result};
use crate::kernels::{axpy, dot};
use crate::tensor::{Shape, Tensor};
use crate::wavelets::WaveletFilterBank;

/// Boundary handling for the image-domain correlations.
///
/// `Reflect` mirrors the image about its border pixels (the border sample is
/// not repeated). `Circular` wraps periodically; it turns integer translation
/// into an exact roll of the input, which is what the shift-invariance checks
/// need.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Reflect,
    Circular,
}

/// Settings for one scattering transform.
#[derive(Clone, Copy, Debug)]
pub struct ScatteringConfig {
    /// Dyadic scale count J. Output sides shrink by `2^J`.
    pub scales: usize,
    /// Orientation count L.
    pub angles: usize,
    /// Phase count A.
    pub phases: usize,
    /// Scattering order. Only order 1 is supported.
    pub order: usize,
    /// Whether to emit the low-pass-only channel alongside the order-1 paths.
    pub include_order0: bool,
    /// Boundary handling; `Reflect` unless a test needs periodicity.
    pub pad: PadMode,
}

impl Default for ScatteringConfig {
    fn default() -> Self {
        ScatteringConfig {
            scales: 2,
            angles: 8,
            phases: 4,
            order: 1,
            include_order0: true,
            pad: PadMode::Reflect,
        }
    }
}

impl ScatteringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order != 1 {
            return Err(Error::Config(format!(
                "scattering order must be 1, got {}",
                self.order
            )));
        }
        if self.scales < 1 || self.angles < 1 || self.phases < 1 {
            return Err(Error::Config(format!(
                "scattering config needs J >= 1, L >= 1, A >= 1; got J={} L={} A={}",
                self.scales, self.angles, self.phases
            )));
        }
        Ok(())
    }

    /// Decimation stride `2^J`.
    pub fn stride(&self) -> usize {
        1usize << self.scales
    }

    /// Output paths produced per input channel: `J*L*A + [include_order0]`.
    pub fn paths_per_channel(&self) -> usize {
        self.scales * self.angles * self.phases + usize::from(self.include_order0)
    }
}

/// Identity of one output channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScatterPath {
    /// Low-pass-only channel of input channel `channel`.
    Order0 { channel: usize },
    /// `(j, theta_l, alpha_k)` path of input channel `channel`; the fields
    /// hold the indices, not the angles.
    Order1 {
        channel: usize,
        scale: usize,
        angle: usize,
        phase: usize,
    },
}

impl ScatterPath {
    /// Input channel this path was computed from.
    pub fn channel(&self) -> usize {
        match *self {
            ScatterPath::Order0 { channel } => channel,
            ScatterPath::Order1 { channel, .. } => channel,
        }
    }
}

/// Scattering coefficients plus the channel-by-channel path identity.
#[derive(Clone, Debug)]
pub struct ScatteringOutput {
    /// Shape `(N, C_in * paths_per_channel, H / 2^J, W / 2^J)`.
    pub coefficients: Tensor,
    /// `path_index[ch]` identifies output channel `ch`.
    pub path_index: Vec<ScatterPath>,
}

/// Output channel count: `input_channels * (J*L*A + [include_order0])`.
/// Callers must hand in a validated config.
pub fn scattering_channel_count(cfg: &ScatteringConfig, input_channels: usize) -> usize {
    input_channels * cfg.paths_per_channel()
}

fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

fn circular_index(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Copies `plane` (h x w) into a (h + 2*pad) x (w + 2*pad) buffer with the
/// requested boundary extension.
fn pad_plane(plane: &[f64], h: usize, w: usize, pad: usize, mode: PadMode) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0f64; ph * pw];
    let map = |i: isize, n: usize| match mode {
        PadMode::Reflect => reflect_index(i, n),
        PadMode::Circular => circular_index(i, n),
    };
    // Precompute the column map once; rows reuse it.
    let col_map: Vec<usize> = (0..pw)
        .map(|x| map(x as isize - pad as isize, w))
        .collect();
    for y in 0..ph {
        let sy = map(y as isize - pad as isize, h);
        let src = &plane[sy * w..sy * w + w];
        let dst = &mut out[y * pw..y * pw + pw];
        for (d, &sx) in dst.iter_mut().zip(&col_map) {
            *d = src[sx];
        }
    }
    out
}

/// Correlates a padded plane with a complex filter, producing the full-rate
/// real and imaginary response planes (h x w).
fn correlate_complex(
    padded: &[f64],
    pw: usize,
    h: usize,
    w: usize,
    support: usize,
    re: &[f64],
    im: &[f64],
    out_re: &mut [f64],
    out_im: &mut [f64],
) {
    out_re.fill(0.0);
    out_im.fill(0.0);
    for y in 0..h {
        let row_re = &mut out_re[y * w..(y + 1) * w];
        let row_im = &mut out_im[y * w..(y + 1) * w];
        for ky in 0..support {
            let in_row = &padded[(y + ky) * pw..(y + ky) * pw + pw];
            for kx in 0..support {
                let window = &in_row[kx..kx + w];
                let cre = re[ky * support + kx];
                if cre != 0.0 {
                    axpy(cre, window, row_re);
                }
                let cim = im[ky * support + kx];
                if cim != 0.0 {
                    axpy(cim, window, row_im);
                }
            }
        }
    }
}

/// Separable low-pass then stride decimation: only the kept output rows and
/// columns are ever computed.
fn lowpass_decimate(
    plane: &[f64],
    h: usize,
    w: usize,
    g: &[f64],
    mode: PadMode,
    stride: usize,
    out: &mut [f64],
) {
    let k = g.len();
    let pad = k / 2;
    let padded = pad_plane(plane, h, w, pad, mode);
    let pw = w + 2 * pad;
    let (h_out, w_out) = (h / stride, w / stride);
    debug_assert_eq!(out.len(), h_out * w_out);
    let mut row_acc = vec![0.0f64; pw];
    for yo in 0..h_out {
        row_acc.fill(0.0);
        let y0 = yo * stride;
        for (ki, &gk) in g.iter().enumerate() {
            axpy(gk, &padded[(y0 + ki) * pw..(y0 + ki) * pw + pw], &mut row_acc);
        }
        let out_row = &mut out[yo * w_out..(yo + 1) * w_out];
        for (xo, o) in out_row.iter_mut().enumerate() {
            *o = dot(g, &row_acc[xo * stride..xo * stride + k]);
        }
    }
}

fn build_path_index(cfg: &ScatteringConfig, channels: usize) -> Vec<ScatterPath> {
    let mut paths = Vec::with_capacity(channels * cfg.paths_per_channel());
    for channel in 0..channels {
        if cfg.include_order0 {
            paths.push(ScatterPath::Order0 { channel });
        }
        for scale in 0..cfg.scales {
            for angle in 0..cfg.angles {
                for phase in 0..cfg.phases {
                    paths.push(ScatterPath::Order1 {
                        channel,
                        scale,
                        angle,
                        phase,
                    });
                }
            }
        }
    }
    paths
}

/// Runs the first-order scattering transform over an image batch.
///
/// The transform is a pure function of its arguments; batch items are
/// processed independently, so scattering a batch equals scattering each
/// item alone, bit for bit.
pub fn scatter(
    x: &Tensor,
    bank: &WaveletFilterBank,
    cfg: &ScatteringConfig,
) -> Result<ScatteringOutput> {
    cfg.validate()?;
    if bank.j_count() != cfg.scales || bank.angles() != cfg.angles || bank.phases() != cfg.phases {
        return Err(Error::Config(format!(
            "filter bank built for J={} L={} A={} does not match scattering config J={} L={} A={}",
            bank.j_count(),
            bank.angles(),
            bank.phases(),
            cfg.scales,
            cfg.angles,
            cfg.phases
        )));
    }
    let s = x.shape();
    let stride = cfg.stride();
    if s.h % stride != 0 || s.w % stride != 0 {
        return Err(Error::Shape(format!(
            "input sides {}x{} are not divisible by 2^J = {}",
            s.h, s.w, stride
        )));
    }
    let (h, w) = (s.h, s.w);
    let (h_out, w_out) = (h / stride, w / stride);
    let per_channel = cfg.paths_per_channel();
    let out_shape = Shape {
        n: s.n,
        c: s.c * per_channel,
        h: h_out,
        w: w_out,
    };
    let mut out = Tensor::zeros(out_shape);
    let path_index = build_path_index(cfg, s.c);

    let plane_out = h_out * w_out;
    let g = bank.phi_1d().to_vec();
    let mut resp_re = vec![0.0f64; h * w];
    let mut resp_im = vec![0.0f64; h * w];
    let mut rect = vec![0.0f64; h * w];

    let data = x.data().to_vec();
    let out_data = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = &data[(n * s.c + c) * h * w..(n * s.c + c + 1) * h * w];
            let out_base = (n * s.c * per_channel + c * per_channel) * plane_out;
            let mut cursor = out_base;
            if cfg.include_order0 {
                lowpass_decimate(
                    plane,
                    h,
                    w,
                    &g,
                    cfg.pad,
                    stride,
                    &mut out_data[cursor..cursor + plane_out],
                );
                cursor += plane_out;
            }
            for j in 0..cfg.scales {
                let support = bank.psi(j, 0).support();
                let pad = support / 2;
                let padded = pad_plane(plane, h, w, pad, cfg.pad);
                let pw = w + 2 * pad;
                for l in 0..cfg.angles {
                    let psi = bank.psi(j, l);
                    correlate_complex(
                        &padded,
                        pw,
                        h,
                        w,
                        support,
                        psi.re(),
                        psi.im(),
                        &mut resp_re,
                        &mut resp_im,
                    );
                    for k in 0..cfg.phases {
                        let alpha = bank.alpha(k);
                        let (sin_a, cos_a) = alpha.sin_cos();
                        for ((r, &a), &b) in rect.iter_mut().zip(&resp_re).zip(&resp_im) {
                            *r = (cos_a * a + sin_a * b).abs();
                        }
                        lowpass_decimate(
                            &rect,
                            h,
                            w,
                            &g,
                            cfg.pad,
                            stride,
                            &mut out_data[cursor..cursor + plane_out],
                        );
                        cursor += plane_out;
                    }
                }
            }
        }
    }
    Ok(ScatteringOutput {
        coefficients: out,
        path_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelets::{build_filter_bank, MorletParams};

    fn params_capped(side: usize) -> MorletParams {
        MorletParams {
            support: side,
            ..MorletParams::default()
        }
    }

    fn bank_for(j: usize, angles: usize, phases: usize, side: usize) -> WaveletFilterBank {
        build_filter_bank(j, angles, phases, &params_capped(side)).unwrap()
    }

    fn cfg(scales: usize, angles: usize, phases: usize, pad: PadMode) -> ScatteringConfig {
        ScatteringConfig {
            scales,
            angles,
            phases,
            order: 1,
            include_order0: true,
            pad,
        }
    }

    /// Deterministic smooth-ish test plane with mixed frequencies.
    fn wavy_image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(
            Shape {
                n: 1,
                c: 1,
                h,
                w,
            },
            |_, _, y, x| {
                let (fy, fx) = (y as f64, x as f64);
                0.8 + 0.4 * (0.31 * fx + 0.11 * fy).sin()
                    + 0.25 * (0.07 * fx * fy / w as f64).cos()
                    + 0.2 * (0.9 * fy).sin() * (0.4 * fx).cos()
            },
        )
    }

    /// A smooth 64x64 image built from circularly wrapped Gaussian bumps,
    /// so that a circular 2 px shift is an exact resample of the same
    /// continuous scene. Bump placements are frozen.
    fn bump_image(side: usize) -> Tensor {
        const BUMPS: [(f64, f64, f64, f64); 6] = [
            (40.765547988573076, 17.2663496808877, 8.3277881914895566, 0.31156934486997034),
            (52.049295308817435, 58.41635694577419, 12.853086206137439, 0.81064759268879882),
            (34.791999453787064, 59.844635122417166, 14.526828432972257, 0.30191695011910363),
            (54.873873701604438, 2.1494768195497187, 13.837243571439553, 0.42295893442179128),
            (55.243451030392741, 34.65351809594187, 10.397695124299078, 0.59588105483836085),
            (1.8124589533096298, 7.9541296959720924, 13.364995317549042, 0.75303265810197506),
        ];
        let n = side as f64;
        let mut img = Tensor::from_fn(
            Shape {
                n: 1,
                c: 1,
                h: side,
                w: side,
            },
            |_, _, y, x| {
                let (fy, fx) = (y as f64, x as f64);
                let mut v = 0.0;
                for (cy, cx, sg, amp) in BUMPS {
                    let dy = (fy - cy).abs().min(n - (fy - cy).abs());
                    let dx = (fx - cx).abs().min(n - (fx - cx).abs());
                    v += amp * (-(dy * dy + dx * dx) / (2.0 * sg * sg)).exp();
                }
                v
            },
        );
        let peak = img.max_abs();
        for v in img.data_mut() {
            *v /= peak;
        }
        img
    }

    fn roll_columns(x: &Tensor, delta: usize) -> Tensor {
        let s = x.shape();
        Tensor::from_fn(s, |n, c, y, xx| {
            let src = (xx + s.w - delta % s.w) % s.w;
            x.get(n, c, y, src)
        })
    }

    #[test]
    fn channel_count_matches_the_fusion_table() {
        let mk = |scales, angles, phases, incl0| ScatteringConfig {
            scales,
            angles,
            phases,
            order: 1,
            include_order0: incl0,
            pad: PadMode::Reflect,
        };
        assert_eq!(scattering_channel_count(&mk(2, 8, 4, true), 3), 195);
        assert_eq!(scattering_channel_count(&mk(3, 8, 4, true), 3), 291);
        assert_eq!(scattering_channel_count(&mk(1, 1, 1, false), 1), 1);
        assert_eq!(scattering_channel_count(&mk(2, 8, 4, true), 1), 65);
        assert_eq!(scattering_channel_count(&mk(3, 8, 4, true), 1), 97);
    }

    #[test]
    fn output_shape_and_path_layout_follow_the_config() {
        let bank = bank_for(2, 3, 2, 31);
        let c = cfg(2, 3, 2, PadMode::Reflect);
        let x = Tensor::from_fn(
            Shape {
                n: 2,
                c: 2,
                h: 32,
                w: 32,
            },
            |n, ch, y, x| (n + ch) as f64 + 0.01 * (y * 32 + x) as f64,
        );
        let out = scatter(&x, &bank, &c).unwrap();
        let per = 2 * 3 * 2 + 1;
        assert_eq!(
            out.coefficients.shape(),
            Shape {
                n: 2,
                c: 2 * per,
                h: 8,
                w: 8,
            }
        );
        assert_eq!(out.path_index.len(), 2 * per);
        assert_eq!(out.path_index[0], ScatterPath::Order0 { channel: 0 });
        assert_eq!(
            out.path_index[1],
            ScatterPath::Order1 {
                channel: 0,
                scale: 0,
                angle: 0,
                phase: 0,
            }
        );
        assert_eq!(
            out.path_index[2],
            ScatterPath::Order1 {
                channel: 0,
                scale: 0,
                angle: 0,
                phase: 1,
            }
        );
        assert_eq!(
            out.path_index[3],
            ScatterPath::Order1 {
                channel: 0,
                scale: 0,
                angle: 1,
                phase: 0,
            }
        );
        assert_eq!(out.path_index[per], ScatterPath::Order0 { channel: 1 });
        assert_eq!(
            out.path_index[2 * per - 1],
            ScatterPath::Order1 {
                channel: 1,
                scale: 1,
                angle: 2,
                phase: 1,
            }
        );
    }

    #[test]
    fn constant_images_collapse_to_the_order0_path() {
        let bank = bank_for(2, 8, 4, 31);
        for pad in [PadMode::Reflect, PadMode::Circular] {
            let c = cfg(2, 8, 4, pad);
            let x = Tensor::from_fn(
                Shape {
                    n: 1,
                    c: 1,
                    h: 32,
                    w: 32,
                },
                |_, _, _, _| 0.7,
            );
            let out = scatter(&x, &bank, &c).unwrap();
            let coeff = out.coefficients.data();
            let plane = 8 * 8;
            for v in &coeff[..plane] {
                assert!((v - 0.7).abs() < 1e-9, "order-0 should reproduce c, got {v}");
            }
            for (i, v) in coeff[plane..].iter().enumerate() {
                assert!(
                    v.abs() <= 1e-6 * 0.7,
                    "order-1 path sample {i} should annihilate DC, got {v}"
                );
            }
        }
    }

    #[test]
    fn scattering_is_positively_homogeneous() {
        let bank = bank_for(2, 4, 2, 31);
        let c = cfg(2, 4, 2, PadMode::Reflect);
        let x = wavy_image(32, 32);
        let lambda = 3.7;
        let scaled = Tensor::from_fn(x.shape(), |n, ch, y, xx| lambda * x.get(n, ch, y, xx));
        let a = scatter(&x, &bank, &c).unwrap();
        let b = scatter(&scaled, &bank, &c).unwrap();
        for (&va, &vb) in a.coefficients.data().iter().zip(b.coefficients.data()) {
            let rel = (lambda * va - vb).abs() / vb.abs().max(1e-300);
            assert!(rel < 1e-10, "expected {}, got {vb}", lambda * va);
        }
    }

    #[test]
    fn order1_coefficients_are_non_negative() {
        let bank = bank_for(2, 4, 2, 31);
        let c = cfg(2, 4, 2, PadMode::Reflect);
        // Signed image: order-1 paths must still be non-negative.
        let x = Tensor::from_fn(
            Shape {
                n: 1,
                c: 1,
                h: 32,
                w: 32,
            },
            |_, _, y, xx| (0.5 * xx as f64).sin() - 0.3 * (0.2 * y as f64).cos(),
        );
        let out = scatter(&x, &bank, &c).unwrap();
        let plane = 8 * 8;
        for &v in &out.coefficients.data()[plane..] {
            assert!(v >= 0.0, "order-1 coefficient went negative: {v}");
        }
    }

    #[test]
    fn batches_scatter_independently() {
        let bank = bank_for(2, 3, 2, 31);
        let c = cfg(2, 3, 2, PadMode::Reflect);
        let shape = Shape {
            n: 1,
            c: 1,
            h: 32,
            w: 32,
        };
        let a = Tensor::from_fn(shape, |_, _, y, x| ((y * 31 + x * 7) % 13) as f64 * 0.1);
        let b = Tensor::from_fn(shape, |_, _, y, x| ((y as f64).sin() + (x as f64).cos()) * 0.5);
        let mut stacked = Vec::new();
        stacked.extend_from_slice(a.data());
        stacked.extend_from_slice(b.data());
        let batch = Tensor::from_vec(
            Shape {
                n: 2,
                c: 1,
                h: 32,
                w: 32,
            },
            stacked,
        )
        .unwrap();
        let sa = scatter(&a, &bank, &c).unwrap();
        let sb = scatter(&b, &bank, &c).unwrap();
        let sbatch = scatter(&batch, &bank, &c).unwrap();
        let per_item = sa.coefficients.data().len();
        assert_eq!(sbatch.coefficients.data()[..per_item], *sa.coefficients.data());
        assert_eq!(sbatch.coefficients.data()[per_item..], *sb.coefficients.data());
    }

    #[test]
    fn rejects_mismatched_bank_or_resolution() {
        let bank = bank_for(2, 8, 4, 31);
        let x = Tensor::zeros(Shape {
            n: 1,
            c: 1,
            h: 32,
            w: 32,
        });
        let mismatched = cfg(3, 8, 4, PadMode::Reflect);
        assert!(matches!(
            scatter(&x, &bank, &mismatched),
            Err(Error::Config(_))
        ));
        let odd = Tensor::zeros(Shape {
            n: 1,
            c: 1,
            h: 30,
            w: 30,
        });
        let ok_cfg = cfg(2, 8, 4, PadMode::Reflect);
        assert!(matches!(scatter(&odd, &bank, &ok_cfg), Err(Error::Shape(_))));
        let mut bad_order = ok_cfg;
        bad_order.order = 2;
        assert!(matches!(
            scatter(&x, &bank, &bad_order),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn circular_shift_by_the_stride_rolls_the_output() {
        let bank = bank_for(2, 3, 2, 31);
        let c = cfg(2, 3, 2, PadMode::Circular);
        let x = wavy_image(32, 32);
        let shifted = roll_columns(&x, 4);
        let sx = scatter(&x, &bank, &c).unwrap();
        let ss = scatter(&shifted, &bank, &c).unwrap();
        let rolled = roll_columns(&sx.coefficients, 1);
        // Same products summed in the same order: equality is exact.
        assert_eq!(ss.coefficients.data(), rolled.data());
    }

    #[test]
    fn shifts_perturb_smooth_images_less_at_coarser_scales() {
        let side = 64;
        let x = bump_image(side);
        let shifted = roll_columns(&x, 2);
        let mut rels = Vec::new();
        for j in 1..=3 {
            let bank = bank_for(j, 8, 4, side - 1);
            let c = cfg(j, 8, 4, PadMode::Circular);
            let a = scatter(&x, &bank, &c).unwrap();
            let b = scatter(&shifted, &bank, &c).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for (&va, &vb) in a.coefficients.data().iter().zip(b.coefficients.data()) {
                num += (va - vb) * (va - vb);
                den += va * va;
            }
            rels.push((num / den).sqrt());
        }
        assert!(
            rels[2] <= 0.10,
            "J=3 relative change should stay within 10%, got {}",
            rels[2]
        );
        assert!(
            rels[0] > rels[1] && rels[1] > rels[2],
            "change should shrink as J grows: {rels:?}"
        );
    }
}
