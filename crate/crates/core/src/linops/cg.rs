use crate::tensor::{dot, norm};

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Conjugate gradients for a symmetric positive definite operator given as a
/// closure. Starts from zero and stops once `‖b − Gx‖ ≤ tol·‖b‖`.
pub fn conjugate_gradient<G>(gram: G, b: &[f64], tol: f64, max_iter: usize) -> CgOutcome
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let b_norm = norm(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return CgOutcome {
            solution: x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = tol * b_norm;
    let mut iterations = 0;
    while iterations < max_iter {
        if rr.sqrt() <= target {
            break;
        }
        let gp = gram(&p);
        let pgp = dot(&p, &gp);
        if pgp <= 0.0 {
            // lost positive definiteness (or exact breakdown)
            break;
        }
        let alpha = rr / pgp;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * gp[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        iterations += 1;
    }
    // recompute the true residual; the recursive one drifts
    let gx = gram(&x);
    let true_res: f64 = b
        .iter()
        .zip(&gx)
        .map(|(bi, gi)| (bi - gi) * (bi - gi))
        .sum::<f64>()
        .sqrt();
    let relative_residual = true_res / b_norm;
    CgOutcome {
        solution: x,
        iterations,
        relative_residual,
        converged: relative_residual <= tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_spd_system() {
        // [[4,1],[1,3]] x = [1,2] -> x = [1/11, 7/11]
        let g = |v: &[f64]| vec![4.0 * v[0] + v[1], v[0] + 3.0 * v[1]];
        let out = conjugate_gradient(g, &[1.0, 2.0], 1e-12, 10);
        assert!(out.converged);
        assert!((out.solution[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((out.solution[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rhs_is_trivial() {
        let out = conjugate_gradient(|v: &[f64]| v.to_vec(), &[0.0; 4], 1e-8, 10);
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn reports_non_convergence() {
        let g = |v: &[f64]| v.iter().enumerate().map(|(i, x)| (1.0 + i as f64 * 100.0) * x).collect();
        let b = vec![1.0; 50];
        let out = conjugate_gradient(g, &b, 1e-14, 2);
        assert!(!out.converged);
        assert_eq!(out.iterations, 2);
    }
}
