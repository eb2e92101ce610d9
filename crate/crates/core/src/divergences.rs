//! Distances between two densities sampled on the same points.
//!
//! The reporting forms take quadrature weights; the `*_loss` forms are the
//! plain per-point means used during training and also return the derivative
//! with respect to the model values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Densities below this contribute nothing to KL/JS sums.
pub const LOG_FLOOR: f64 = 1e-12;

/// Two densities and quadrature weights on a shared point set.
#[derive(Debug, Clone, Copy)]
pub struct GridPair<'a> {
    pub p: &'a [f64],
    pub q: &'a [f64],
    pub weights: &'a [f64],
}

impl<'a> GridPair<'a> {
    pub fn new(p: &'a [f64], q: &'a [f64], weights: &'a [f64]) -> Result<Self> {
        if p.len() != q.len() || p.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                got: if p.len() != q.len() {
                    q.len()
                } else {
                    weights.len()
                },
            });
        }
        check_density(p)?;
        check_density(q)?;
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config(
                format!("weights[{i}]"),
                format!("quadrature weight must be positive, got {}", weights[i]),
            ));
        }
        Ok(GridPair { p, q, weights })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

fn check_density(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
        Some(i) => Err(Error::InvalidDensity {
            index: i,
            value: v[i],
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HellingerMode {
    /// `1/(2N) sum (sqrt p - sqrt q)^2`.
    PaperMean,
    /// `sqrt(1/2 sum w (sqrt p - sqrt q)^2)`.
    Quadrature,
}

pub fn hellinger(pair: &GridPair<'_>, mode: HellingerMode) -> f64 {
    let sq = |p: f64, q: f64| {
        let d = p.sqrt() - q.sqrt();
        d * d
    };
    match mode {
        HellingerMode::PaperMean => {
            let s: f64 = pair.p.iter().zip(pair.q).map(|(p, q)| sq(*p, *q)).sum();
            s / (2.0 * pair.len() as f64)
        }
        HellingerMode::Quadrature => {
            let s: f64 = pair
                .p
                .iter()
                .zip(pair.q)
                .zip(pair.weights)
                .map(|((p, q), w)| w * sq(*p, *q))
                .sum();
            (0.5 * s).sqrt()
        }
    }
}

/// `p log(p/q)` for one point; zero below the floor.
fn kl_term(index: usize, p: f64, q: f64) -> Result<f64> {
    if p < LOG_FLOOR {
        return Ok(0.0);
    }
    if q <= 0.0 {
        return Err(Error::SupportMismatch { index, p, q });
    }
    Ok(p * (p / q).ln())
}

/// `sum w p log(p/q)`.
pub fn kl(pair: &GridPair<'_>) -> Result<f64> {
    let mut s = 0.0;
    for (i, ((p, q), w)) in pair.p.iter().zip(pair.q).zip(pair.weights).enumerate() {
        s += w * kl_term(i, *p, *q)?;
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsForm {
    /// `KL(p || m)/2 + KL(m || p)/2` with `m = (p+q)/2`.
    #[default]
    Verbatim,
    /// `KL(p || m)/2 + KL(q || m)/2`.
    Textbook,
}

fn js_point(i: usize, p: f64, q: f64, form: JsForm) -> Result<f64> {
    let m = 0.5 * (p + q);
    Ok(match form {
        JsForm::Verbatim => 0.5 * kl_term(i, p, m)? + 0.5 * kl_term(i, m, p)?,
        JsForm::Textbook => 0.5 * kl_term(i, p, m)? + 0.5 * kl_term(i, q, m)?,
    })
}

pub fn js(pair: &GridPair<'_>, form: JsForm) -> Result<f64> {
    let mut s = 0.0;
    for (i, ((p, q), w)) in pair.p.iter().zip(pair.q).zip(pair.weights).enumerate() {
        s += w * js_point(i, *p, *q, form)?;
    }
    Ok(s)
}

/// `1/N sum (p - q)^2`.
pub fn mse(pair: &GridPair<'_>) -> f64 {
    let s: f64 = pair
        .p
        .iter()
        .zip(pair.q)
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    s / pair.len() as f64
}

/// Hellinger training loss in terms of `s = sqrt(p)`; returns the value and
/// `dL/ds_i`.
pub fn hellinger_loss(sqrt_p: &[f64], q: &[f64]) -> (f64, Vec<f64>) {
    let n = sqrt_p.len() as f64;
    let mut value = 0.0;
    let grad = sqrt_p
        .iter()
        .zip(q)
        .map(|(s, q)| {
            let d = s - q.sqrt();
            value += d * d;
            d / n
        })
        .collect();
    (value / (2.0 * n), grad)
}

/// Per-point mean JS loss `1/N sum js_i`, values of `p` floored at
/// [`LOG_FLOOR`]; returns the value and `dL/dp_i`.
pub fn js_loss(p: &[f64], q: &[f64], form: JsForm) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let mut value = 0.0;
    let grad = p
        .iter()
        .zip(q)
        .map(|(p, q)| {
            let floored = *p < LOG_FLOOR;
            let p = p.max(LOG_FLOOR);
            let q = q.max(LOG_FLOOR);
            let m = 0.5 * (p + q);
            let lpm = (p / m).ln();
            let lqm = (q / m).ln();
            let (v, d) = match form {
                JsForm::Verbatim => (
                    0.5 * p * lpm - 0.5 * m * lpm,
                    0.5 * lpm + 0.5 * (1.0 - 0.5 * p / m) - 0.25 * lpm + 0.25 - 0.5 * m / p,
                ),
                JsForm::Textbook => (0.5 * p * lpm + 0.5 * q * lqm, 0.5 * lpm),
            };
            value += v;
            if floored {
                0.0
            } else {
                d / n
            }
        })
        .collect();
    (value / n, grad)
}

/// `1/N sum (p - q)^2` and `dL/dp_i`.
pub fn mse_loss(p: &[f64], q: &[f64]) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let mut value = 0.0;
    let grad = p
        .iter()
        .zip(q)
        .map(|(p, q)| {
            value += (p - q) * (p - q);
            2.0 * (p - q) / n
        })
        .collect();
    (value / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::gaussian_pdf;
    use crate::quadrature::{linspace, simpson_weights};

    fn grid(
        lo: f64,
        hi: f64,
        n: usize,
        f: impl Fn(f64) -> f64,
        g: impl Fn(f64) -> f64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let xs = linspace(lo, hi, n);
        let w = simpson_weights(n, xs[1] - xs[0]);
        (
            xs.iter().map(|x| f(*x)).collect(),
            xs.iter().map(|x| g(*x)).collect(),
            w,
        )
    }

    #[test]
    fn identical_densities_give_zero() {
        let (p, _, w) = grid(-5.0, 5.0, 501, |x| gaussian_pdf(x, 0.3, 1.2), |_| 0.0);
        let pair = GridPair::new(&p, &p, &w).unwrap();
        assert_eq!(hellinger(&pair, HellingerMode::PaperMean), 0.0);
        assert_eq!(hellinger(&pair, HellingerMode::Quadrature), 0.0);
        assert_eq!(kl(&pair).unwrap(), 0.0);
        assert_eq!(js(&pair, JsForm::Verbatim).unwrap(), 0.0);
        assert_eq!(js(&pair, JsForm::Textbook).unwrap(), 0.0);
        assert_eq!(mse(&pair), 0.0);
    }

    #[test]
    fn hellinger_gaussian_closed_forms() {
        let (p, q, w) = grid(
            -8.0,
            8.0,
            2001,
            |x| gaussian_pdf(x, 0.0, 1.0),
            |x| gaussian_pdf(x, 1.0, 1.0),
        );
        let h = hellinger(
            &GridPair::new(&p, &q, &w).unwrap(),
            HellingerMode::Quadrature,
        );
        assert!((h - (1.0 - (-0.125f64).exp()).sqrt()).abs() < 1e-4, "{h}");
        assert!((h - 0.342_787_248_034_994_2).abs() < 1e-4);

        let (p, q, w) = grid(
            -12.0,
            12.0,
            2001,
            |x| gaussian_pdf(x, 0.0, 1.0),
            |x| gaussian_pdf(x, 0.0, 2.0),
        );
        let h = hellinger(
            &GridPair::new(&p, &q, &w).unwrap(),
            HellingerMode::Quadrature,
        );
        assert!((h - (1.0 - 0.8f64.sqrt()).sqrt()).abs() < 1e-4, "{h}");
        assert!((h - 0.324_919_696_232_906_3).abs() < 1e-4);
    }

    #[test]
    fn hellinger_grid_refinement() {
        let f = |x: f64| gaussian_pdf(x, -0.4, 0.9);
        let g = |x: f64| 0.5 * gaussian_pdf(x, 1.0, 0.7) + 0.5 * gaussian_pdf(x, -1.0, 0.7);
        let (p1, q1, w1) = grid(-7.0, 7.0, 1001, f, g);
        let (p2, q2, w2) = grid(-7.0, 7.0, 2001, f, g);
        let a = hellinger(
            &GridPair::new(&p1, &q1, &w1).unwrap(),
            HellingerMode::Quadrature,
        );
        let b = hellinger(
            &GridPair::new(&p2, &q2, &w2).unwrap(),
            HellingerMode::Quadrature,
        );
        assert!((a - b).abs() < 1e-4);
    }

    #[test]
    fn kl_closed_forms_and_asymmetry() {
        let (p, q, w) = grid(
            -10.0,
            11.0,
            2101,
            |x| gaussian_pdf(x, 0.0, 1.0),
            |x| gaussian_pdf(x, 1.0, 1.0),
        );
        let v = kl(&GridPair::new(&p, &q, &w).unwrap()).unwrap();
        assert!((v - 0.5).abs() < 1e-3, "{v}");

        let (p, q, w) = grid(
            -20.0,
            20.0,
            4001,
            |x| gaussian_pdf(x, 0.0, 1.0),
            |x| gaussian_pdf(x, 0.0, 2.0),
        );
        let fwd = kl(&GridPair::new(&p, &q, &w).unwrap()).unwrap();
        let rev = kl(&GridPair::new(&q, &p, &w).unwrap()).unwrap();
        // ln 2 + 1/8 - 1/2 and -ln 2 + 2 - 1/2
        assert!((fwd - 0.318_147_180_559_945_3).abs() < 1e-4, "{fwd}");
        assert!((rev - 0.806_852_819_440_054_6).abs() < 1e-4, "{rev}");
        assert!((fwd - rev).abs() > 0.1);
    }

    #[test]
    fn kl_support_mismatch() {
        let p = [0.5, 0.5];
        let q = [1.0, 0.0];
        let w = [1.0, 1.0];
        let e = kl(&GridPair::new(&p, &q, &w).unwrap()).unwrap_err();
        assert!(matches!(e, Error::SupportMismatch { index: 1, .. }));
        // below the floor the term is dropped
        let p = [1.0, 1e-13];
        assert_eq!(kl(&GridPair::new(&p, &q, &w).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn js_separated_gaussians() {
        let (p, q, w) = grid(
            -10.0,
            13.0,
            4601,
            |x| gaussian_pdf(x, 0.0, 1.0),
            |x| gaussian_pdf(x, 3.0, 1.0),
        );
        let pair = GridPair::new(&p, &q, &w).unwrap();
        let tb = js(&pair, JsForm::Textbook).unwrap();
        assert!((tb - 0.526_777_306_521_373_4).abs() < 1e-6, "{tb}");
        assert!(tb < std::f64::consts::LN_2);
        let vb = js(&pair, JsForm::Verbatim).unwrap();
        assert!((vb - 1.125).abs() < 1e-6, "{vb}");
    }

    #[test]
    fn mse_values() {
        let q: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin().abs()).collect();
        let p: Vec<f64> = q.iter().map(|v| v + 0.1).collect();
        let w = vec![1.0; 100];
        assert!((mse(&GridPair::new(&p, &q, &w).unwrap()) - 0.01).abs() < 1e-15);

        let (p, q, w) = grid(
            -6.0,
            6.0,
            1201,
            |x| gaussian_pdf(x, 0.0, 1.0),
            |x| gaussian_pdf(x, 0.0, 1.1),
        );
        let v = mse(&GridPair::new(&p, &q, &w).unwrap());
        let mut oracle = 0.0;
        for i in (0..p.len()).rev() {
            oracle += p[i] * p[i] - 2.0 * p[i] * q[i] + q[i] * q[i];
        }
        oracle /= p.len() as f64;
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        let w = [1.0, 1.0];
        assert!(matches!(
            GridPair::new(&[0.1, -0.2], &[0.1, 0.2], &w),
            Err(Error::InvalidDensity { index: 1, .. })
        ));
        assert!(GridPair::new(&[0.1], &[0.1, 0.2], &w).is_err());
        assert!(GridPair::new(&[0.1, 0.1], &[0.1, 0.2], &[1.0, 0.0]).is_err());
    }

    fn check_loss_grad(f: impl Fn(&[f64]) -> (f64, Vec<f64>), p: &[f64]) {
        let (_, g) = f(p);
        for i in 0..p.len() {
            let h = 1e-7 * p[i].max(1e-3);
            let mut a = p.to_vec();
            let mut b = p.to_vec();
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a).0 - f(&b).0) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() < 1e-5 * fd.abs().max(1e-3),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn training_loss_derivatives() {
        let p = [0.3, 0.01, 0.7, 0.2, 1.1];
        let q = [0.25, 0.05, 0.9, 0.2, 0.4];
        check_loss_grad(|s| hellinger_loss(s, &q), &p);
        check_loss_grad(|s| js_loss(s, &q, JsForm::Verbatim), &p);
        check_loss_grad(|s| js_loss(s, &q, JsForm::Textbook), &p);
        check_loss_grad(|s| mse_loss(s, &q), &p);
        let (v, _) = hellinger_loss(&[0.0; 3], &[0.1, 0.2, 0.3]);
        assert!((v - 0.6 / 6.0).abs() < 1e-15);
    }
}
