//! Adaptive 7/15-point Gauss–Kronrod quadrature for vector-valued integrands.
//!
//! Used as the independent numerical route against closed-form expressions.

use nalgebra::DVector;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd Kronrod nodes (1, 3, 5) and the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_DEPTH: u32 = 50;

#[derive(Debug, Clone)]
pub struct Integral {
    pub value: DVector<f64>,
    /// Sum of the per-panel Kronrod–Gauss differences (max-norm).
    pub error_estimate: f64,
    pub evaluations: usize,
}

fn kronrod<F>(f: &F, a: f64, b: f64) -> (DVector<f64>, f64)
where
    F: Fn(f64) -> DVector<f64>,
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = &fc * WGK[7];
    let mut g = &fc * WG[3];
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        k += &s * WGK[i];
        if i % 2 == 1 {
            g += &s * WG[i / 2];
        }
    }
    k *= h;
    g *= h;
    let err = (&k - &g).amax();
    (k, err)
}

/// Integrates `f` over `[a, b]` to absolute (max-norm) tolerance `abs_tol`.
pub fn integrate<F>(f: F, a: f64, b: f64, abs_tol: f64) -> Integral
where
    F: Fn(f64) -> DVector<f64>,
{
    let mut evaluations = 0;
    let (value, error_estimate) = refine(&f, a, b, abs_tol, 0, &mut evaluations);
    Integral { value, error_estimate, evaluations }
}

/// Scalar convenience wrapper around [`integrate`].
pub fn integrate_scalar<F>(f: F, a: f64, b: f64, abs_tol: f64) -> f64
where
    F: Fn(f64) -> f64,
{
    integrate(|x| DVector::from_element(1, f(x)), a, b, abs_tol).value[0]
}

fn refine<F>(f: &F, a: f64, b: f64, tol: f64, depth: u32, evals: &mut usize) -> (DVector<f64>, f64)
where
    F: Fn(f64) -> DVector<f64>,
{
    let (whole, err) = kronrod(f, a, b);
    *evals += 15;
    if err <= tol || depth >= MAX_DEPTH || (b - a).abs() < 1e-14 * (1.0 + a.abs()) {
        return (whole, err);
    }
    let m = 0.5 * (a + b);
    let (left, el) = refine(f, a, m, 0.5 * tol, depth + 1, evals);
    let (right, er) = refine(f, m, b, 0.5 * tol, depth + 1, evals);
    (left + right, el + er)
}
