// Welch t-test p-values by direct quadrature of the Student-t density.
//
// With x = sqrt(v)·tan(u) the tail mass becomes
//   P(|T| > t) = ∫_{u0}^{π/2} cos^(v-1) u du / ∫_0^{π/2} cos^(v-1) u du,
// u0 = atan(t / sqrt(v)), which is smooth on a finite interval for v ≥ 1.

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(&f, a, b, fa, fm, fb, whole, 1e-14, 50)
}

pub fn two_sided_p(t: f64, v: f64) -> f64 {
    assert!(v >= 1.0, "df {v} below 1");
    let half_pi = std::f64::consts::FRAC_PI_2;
    let u0 = (t.abs() / v.sqrt()).atan();
    // Split the kernel at its peak width so narrow peaks (large v) are resolved.
    let f = |u: f64| u.cos().powf(v - 1.0);
    let w = (4.0 / v.sqrt()).min(half_pi);
    let pieces = |a: f64, b: f64| -> f64 {
        let cuts = [0.0, w / 4.0, w / 2.0, w, (2.0 * w).min(half_pi), half_pi];
        let mut s = 0.0;
        for c in cuts.windows(2) {
            let (lo, hi) = (c[0].max(a), c[1].min(b));
            if hi > lo {
                s += integrate(f, lo, hi);
            }
        }
        s
    };
    let total = pieces(0.0, half_pi);
    (pieces(u0, half_pi) / total).clamp(0.0, 1.0)
}

pub struct Sample {
    pub n: usize,
    pub mean: f64,
    pub var: f64,
}

pub fn sample(xs: &[f64]) -> Sample {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Sample { n, mean, var }
}

/// (t, df, p) for Welch's unequal-variance test.
pub fn welch(a: &Sample, b: &Sample) -> (f64, f64, f64) {
    let (qa, qb) = (a.var / a.n as f64, b.var / b.n as f64);
    let t = (b.mean - a.mean) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa * qa / (a.n - 1) as f64 + qb * qb / (b.n - 1) as f64);
    (t, df, two_sided_p(t, df))
}
