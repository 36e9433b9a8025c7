//! Polar Newton-Raphson power flow on the full bus admittance matrix.
//!
//! Shares nothing with the sweep solver except the `Network` accessors: it
//! builds Ybus, forms the analytic Jacobian of the power mismatch equations
//! and solves with a dense LU factorization.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use voltgrid::grid::{Injection, Network};

pub struct NrSolution {
    pub voltages: Vec<f64>,
    pub iterations: usize,
}

pub fn newton_raphson(net: &Network, inj: &[Injection], tol: f64) -> NrSolution {
    let n = net.len();
    let slack = net.slack();
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for l in net.lines() {
        let yl = Complex64::new(1.0, 0.0) / Complex64::new(l.r_pu, l.x_pu);
        y[l.from][l.from] += yl;
        y[l.to][l.to] += yl;
        y[l.from][l.to] -= yl;
        y[l.to][l.from] -= yl;
    }
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();
    let mut vm = vec![net.v_slack; n];
    let mut va = vec![0.0; n];

    let calc = |vm: &[f64], va: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            for k in 0..n {
                let (g, b) = (y[i][k].re, y[i][k].im);
                if g == 0.0 && b == 0.0 {
                    continue;
                }
                let d = va[i] - va[k];
                p[i] += vm[i] * vm[k] * (g * d.cos() + b * d.sin());
                q[i] += vm[i] * vm[k] * (g * d.sin() - b * d.cos());
            }
        }
        (p, q)
    };

    for iter in 0..50 {
        let (p, q) = calc(&vm, &va);
        let mut f = DVector::zeros(2 * m);
        for (r, &i) in pq.iter().enumerate() {
            f[r] = inj[i].p - p[i];
            f[m + r] = inj[i].q - q[i];
        }
        if f.amax() < tol {
            return NrSolution { voltages: vm, iterations: iter };
        }
        let mut jac = DMatrix::zeros(2 * m, 2 * m);
        for (r, &i) in pq.iter().enumerate() {
            for (c, &k) in pq.iter().enumerate() {
                let (g, b) = (y[i][k].re, y[i][k].im);
                if i == k {
                    let (gii, bii) = (g, b);
                    jac[(r, c)] = -q[i] - bii * vm[i] * vm[i];
                    jac[(r, m + c)] = p[i] / vm[i] + gii * vm[i];
                    jac[(m + r, c)] = p[i] - gii * vm[i] * vm[i];
                    jac[(m + r, m + c)] = q[i] / vm[i] - bii * vm[i];
                } else {
                    let d = va[i] - va[k];
                    let (s, co) = d.sin_cos();
                    jac[(r, c)] = vm[i] * vm[k] * (g * s - b * co);
                    jac[(r, m + c)] = vm[i] * (g * co + b * s);
                    jac[(m + r, c)] = -vm[i] * vm[k] * (g * co + b * s);
                    jac[(m + r, m + c)] = vm[i] * (g * s - b * co);
                }
            }
        }
        let dx = jac.lu().solve(&f).expect("singular Jacobian");
        for (r, &i) in pq.iter().enumerate() {
            va[i] += dx[r];
            vm[i] += dx[m + r];
        }
    }
    panic!("Newton-Raphson oracle did not converge");
}
