//! Dense complex matrix exponential and its Frechet derivative.
//!
//! Scaling and squaring with diagonal Pade approximants. The factorization
//! of `exp(A)` is kept so that `L(A, E)` can be evaluated for many directions
//! `E` at the cost of a handful of matrix products each.

use faer::linalg::matmul::matmul;
use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::{c64, Accum, Mat, MatRef, Par};

use crate::error::{Error, Result};

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// 1-norm bounds below which degree m keeps the backward error of both the
/// exponential and its Frechet derivative under unit roundoff.
const THETA: [(usize, f64); 4] = [(3, 1.08e-2), (5, 2.00e-1), (7, 7.83e-1), (9, 1.78)];
const THETA_13: f64 = 4.74;

/// Operator 1-norm (maximum absolute column sum).
pub fn norm1(a: MatRef<'_, c64>) -> f64 {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn mul(a: MatRef<'_, c64>, b: MatRef<'_, c64>) -> Mat<c64> {
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a, b, c64::new(1.0, 0.0), Par::Seq);
    out
}

/// `dst += a * b`
fn mul_add(dst: &mut Mat<c64>, a: MatRef<'_, c64>, b: MatRef<'_, c64>) {
    matmul(dst.as_mut(), Accum::Add, a, b, c64::new(1.0, 0.0), Par::Seq);
}

/// `a b + b' a'`, the derivative of a product of two commuting powers.
fn sym_mul(a: MatRef<'_, c64>, da: MatRef<'_, c64>, b: MatRef<'_, c64>, db: MatRef<'_, c64>) -> Mat<c64> {
    let mut out = mul(a, db);
    mul_add(&mut out, da, b);
    out
}

/// `sum_k coeffs[k] * mats[k]`, plus `diag` on the diagonal.
fn lin_comb(n: usize, terms: &[(f64, &Mat<c64>)], diag: f64) -> Mat<c64> {
    Mat::from_fn(n, n, |i, j| {
        let mut v = c64::new(if i == j { diag } else { 0.0 }, 0.0);
        for (c, m) in terms {
            v += m[(i, j)] * *c;
        }
        v
    })
}

enum Pade {
    /// Degrees 3..9: even powers `A^2, A^4, ...` and the odd-part polynomial `W`.
    Low {
        coeffs: &'static [f64],
        powers: Vec<Mat<c64>>,
        w: Mat<c64>,
    },
    /// Degree 13 with the split `W = A6 W1 + W2`, `V = A6 Z1 + Z2`.
    High {
        a2: Mat<c64>,
        a4: Mat<c64>,
        a6: Mat<c64>,
        w1: Mat<c64>,
        z1: Mat<c64>,
        w: Mat<c64>,
    },
}

/// Factorized `exp(A)` that also evaluates Frechet derivatives `L(A, E)`.
pub struct ExpmWorkspace {
    n: usize,
    squarings: usize,
    scale: f64,
    a: Mat<c64>,
    pade: Pade,
    lu: PartialPivLu<c64>,
    /// `R_0 = r_m(A / 2^s)` followed by its successive squares; the last is `exp(A)`.
    chain: Vec<Mat<c64>>,
}

impl ExpmWorkspace {
    pub fn new(a: MatRef<'_, c64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::InvalidInput(format!(
                "matrix exponential needs a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let norm = norm1(a);
        if !norm.is_finite() {
            return Err(Error::Numerical("non-finite entry in exponent".into()));
        }
        let mut low = None;
        for &(m, theta) in &THETA {
            if norm <= theta {
                low = Some(m);
                break;
            }
        }
        let (squarings, scale) = match low {
            Some(_) => (0, 1.0),
            None => {
                let s = (norm / THETA_13).log2().ceil().max(0.0) as usize;
                (s, 0.5f64.powi(s as i32))
            }
        };
        let a = Mat::from_fn(n, n, |i, j| a[(i, j)] * scale);
        let (pade, u, v) = match low {
            Some(m) => {
                let coeffs: &'static [f64] = match m {
                    3 => &B3,
                    5 => &B5,
                    7 => &B7,
                    _ => &B9,
                };
                let a2 = mul(a.as_ref(), a.as_ref());
                let mut powers = vec![a2];
                while 2 * (powers.len() + 1) < m {
                    let next = match powers.len() {
                        // A^4, A^6 = A^4 A^2, A^8 = A^4 A^4
                        1 => mul(powers[0].as_ref(), powers[0].as_ref()),
                        2 => mul(powers[1].as_ref(), powers[0].as_ref()),
                        _ => mul(powers[1].as_ref(), powers[1].as_ref()),
                    };
                    powers.push(next);
                }
                let odd: Vec<(f64, &Mat<c64>)> = powers
                    .iter()
                    .enumerate()
                    .map(|(j, p)| (coeffs[2 * j + 3], p))
                    .collect();
                let even: Vec<(f64, &Mat<c64>)> = powers
                    .iter()
                    .enumerate()
                    .map(|(j, p)| (coeffs[2 * j + 2], p))
                    .collect();
                let w = lin_comb(n, &odd, coeffs[1]);
                let v = lin_comb(n, &even, coeffs[0]);
                let u = mul(a.as_ref(), w.as_ref());
                (Pade::Low { coeffs, powers, w }, u, v)
            }
            None => {
                let b = &B13;
                let a2 = mul(a.as_ref(), a.as_ref());
                let a4 = mul(a2.as_ref(), a2.as_ref());
                let a6 = mul(a4.as_ref(), a2.as_ref());
                let w1 = lin_comb(n, &[(b[13], &a6), (b[11], &a4), (b[9], &a2)], 0.0);
                let w2 = lin_comb(n, &[(b[7], &a6), (b[5], &a4), (b[3], &a2)], b[1]);
                let z1 = lin_comb(n, &[(b[12], &a6), (b[10], &a4), (b[8], &a2)], 0.0);
                let z2 = lin_comb(n, &[(b[6], &a6), (b[4], &a4), (b[2], &a2)], b[0]);
                let mut w = w2;
                mul_add(&mut w, a6.as_ref(), w1.as_ref());
                let mut v = z2;
                mul_add(&mut v, a6.as_ref(), z1.as_ref());
                let u = mul(a.as_ref(), w.as_ref());
                (
                    Pade::High {
                        a2,
                        a4,
                        a6,
                        w1,
                        z1,
                        w,
                    },
                    u,
                    v,
                )
            }
        };
        let q = Mat::from_fn(n, n, |i, j| v[(i, j)] - u[(i, j)]);
        let lu = q.partial_piv_lu();
        let mut r = Mat::from_fn(n, n, |i, j| u[(i, j)] + v[(i, j)]);
        lu.solve_in_place(r.as_mut());
        let mut chain = Vec::with_capacity(squarings + 1);
        chain.push(r);
        for _ in 0..squarings {
            let last = chain.last().unwrap();
            chain.push(mul(last.as_ref(), last.as_ref()));
        }
        let ws = ExpmWorkspace {
            n,
            squarings,
            scale,
            a,
            pade,
            lu,
            chain,
        };
        let r = ws.exp();
        let finite = (0..n).all(|j| (0..n).all(|i| r[(i, j)].re.is_finite() && r[(i, j)].im.is_finite()));
        if !finite {
            return Err(Error::Numerical("matrix exponential overflowed".into()));
        }
        Ok(ws)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn squarings(&self) -> usize {
        self.squarings
    }

    pub fn exp(&self) -> &Mat<c64> {
        self.chain.last().unwrap()
    }

    /// Frechet derivative of `exp` at `A` in direction `E`.
    pub fn frechet(&self, e: MatRef<'_, c64>) -> Mat<c64> {
        let n = self.n;
        assert_eq!((e.nrows(), e.ncols()), (n, n));
        let e = Mat::from_fn(n, n, |i, j| e[(i, j)] * self.scale);
        let a = self.a.as_ref();
        let (lu_, lv) = match &self.pade {
            Pade::Low { coeffs, powers, w } => {
                let m2 = sym_mul(a, e.as_ref(), a, e.as_ref());
                let mut dp = vec![m2];
                for k in 1..powers.len() {
                    let next = match k {
                        1 => sym_mul(powers[0].as_ref(), dp[0].as_ref(), powers[0].as_ref(), dp[0].as_ref()),
                        2 => sym_mul(powers[1].as_ref(), dp[1].as_ref(), powers[0].as_ref(), dp[0].as_ref()),
                        _ => sym_mul(powers[1].as_ref(), dp[1].as_ref(), powers[1].as_ref(), dp[1].as_ref()),
                    };
                    dp.push(next);
                }
                let odd: Vec<(f64, &Mat<c64>)> =
                    dp.iter().enumerate().map(|(j, p)| (coeffs[2 * j + 3], p)).collect();
                let even: Vec<(f64, &Mat<c64>)> =
                    dp.iter().enumerate().map(|(j, p)| (coeffs[2 * j + 2], p)).collect();
                let lw = lin_comb(n, &odd, 0.0);
                let lv = lin_comb(n, &even, 0.0);
                let mut lu_ = mul(a, lw.as_ref());
                mul_add(&mut lu_, e.as_ref(), w.as_ref());
                (lu_, lv)
            }
            Pade::High {
                a2,
                a4,
                a6,
                w1,
                z1,
                w,
            } => {
                let b = &B13;
                let m2 = sym_mul(a, e.as_ref(), a, e.as_ref());
                let m4 = sym_mul(a2.as_ref(), m2.as_ref(), a2.as_ref(), m2.as_ref());
                let m6 = sym_mul(a4.as_ref(), m4.as_ref(), a2.as_ref(), m2.as_ref());
                let lw1 = lin_comb(n, &[(b[13], &m6), (b[11], &m4), (b[9], &m2)], 0.0);
                let lw2 = lin_comb(n, &[(b[7], &m6), (b[5], &m4), (b[3], &m2)], 0.0);
                let lz1 = lin_comb(n, &[(b[12], &m6), (b[10], &m4), (b[8], &m2)], 0.0);
                let lz2 = lin_comb(n, &[(b[6], &m6), (b[4], &m4), (b[2], &m2)], 0.0);
                let mut lw = lw2;
                mul_add(&mut lw, a6.as_ref(), lw1.as_ref());
                mul_add(&mut lw, m6.as_ref(), w1.as_ref());
                let mut lu_ = mul(a, lw.as_ref());
                mul_add(&mut lu_, e.as_ref(), w.as_ref());
                let mut lv = lz2;
                mul_add(&mut lv, a6.as_ref(), lz1.as_ref());
                mul_add(&mut lv, m6.as_ref(), z1.as_ref());
                (lu_, lv)
            }
        };
        // (V - U) L = Lu + Lv + (Lu - Lv) R
        let diff = Mat::from_fn(n, n, |i, j| lu_[(i, j)] - lv[(i, j)]);
        let mut l = Mat::from_fn(n, n, |i, j| lu_[(i, j)] + lv[(i, j)]);
        mul_add(&mut l, diff.as_ref(), self.chain[0].as_ref());
        self.lu.solve_in_place(l.as_mut());
        for r in &self.chain[..self.squarings] {
            let mut next = mul(r.as_ref(), l.as_ref());
            mul_add(&mut next, l.as_ref(), r.as_ref());
            l = next;
        }
        l
    }
}

pub fn expm(a: MatRef<'_, c64>) -> Result<Mat<c64>> {
    Ok(ExpmWorkspace::new(a)?.exp().clone())
}

pub fn expm_frechet(a: MatRef<'_, c64>, e: MatRef<'_, c64>) -> Result<(Mat<c64>, Mat<c64>)> {
    let ws = ExpmWorkspace::new(a)?;
    let l = ws.frechet(e);
    Ok((ws.exp().clone(), l))
}
