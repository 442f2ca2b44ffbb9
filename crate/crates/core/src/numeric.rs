//! Small numeric helpers shared across modules.

use statrs::function::erf::erfc;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Binomial coefficient as a float; exact for the small arguments used here.
pub fn binom_coeff(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c.round()
}

/// `P(Bin(n, p) = k)`.
pub fn binom_pmf(k: u32, n: u32, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    binom_coeff(n, k) * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// Adaptive Simpson quadrature of a vector-valued integrand over `[a, b]`.
///
/// `f(x, out)` writes the integrand components at `x`. The result is added
/// to `acc`. The error test uses the largest component deviation.
pub fn adaptive_simpson<F>(f: &F, a: f64, b: f64, tol: f64, acc: &mut [f64])
where
    F: Fn(f64, &mut [f64]),
{
    if b <= a {
        return;
    }
    let dim = acc.len();
    let mut fa = vec![0.0; dim];
    let mut fm = vec![0.0; dim];
    let mut fb = vec![0.0; dim];
    f(a, &mut fa);
    f(0.5 * (a + b), &mut fm);
    f(b, &mut fb);
    let whole: Vec<f64> = (0..dim)
        .map(|i| (b - a) / 6.0 * (fa[i] + 4.0 * fm[i] + fb[i]))
        .collect();
    simpson_step(f, a, b, &fa, &fm, &fb, &whole, tol, 48, acc);
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: &[f64],
    fm: &[f64],
    fb: &[f64],
    whole: &[f64],
    tol: f64,
    depth: u32,
    acc: &mut [f64],
) where
    F: Fn(f64, &mut [f64]),
{
    let dim = acc.len();
    let m = 0.5 * (a + b);
    let mut flm = vec![0.0; dim];
    let mut frm = vec![0.0; dim];
    f(0.5 * (a + m), &mut flm);
    f(0.5 * (m + b), &mut frm);
    let h = (b - a) / 12.0;
    let left: Vec<f64> = (0..dim).map(|i| h * (fa[i] + 4.0 * flm[i] + fm[i])).collect();
    let right: Vec<f64> = (0..dim).map(|i| h * (fm[i] + 4.0 * frm[i] + fb[i])).collect();
    let err = (0..dim)
        .map(|i| (left[i] + right[i] - whole[i]).abs())
        .fold(0.0, f64::max);
    if depth == 0 || err <= 15.0 * tol {
        for i in 0..dim {
            acc[i] += left[i] + right[i] + (left[i] + right[i] - whole[i]) / 15.0;
        }
        return;
    }
    simpson_step(f, a, m, fa, &flm, fm, &left, 0.5 * tol, depth - 1, acc);
    simpson_step(f, m, b, fm, &frm, fb, &right, 0.5 * tol, depth - 1, acc);
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
