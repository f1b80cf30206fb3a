use nalgebra::{DMatrix, DVector};

use super::{Capabilities, LinearOperator, LinopError, SvdFactors};

/// Explicit `M×N` matrix operator.
///
/// Mostly a reference implementation: the kernel solve uses a Cholesky
/// factorization and the SVD is a full dense decomposition, sorted.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    svd: DenseSvd,
}

#[derive(Debug, Clone)]
struct DenseSvd {
    u: DMatrix<f64>,
    values: Vec<f64>,
    v_t: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, LinopError> {
        let (m, n) = matrix.shape();
        Self::with_shapes(matrix, vec![n], vec![m])
    }

    pub fn with_shapes(
        matrix: DMatrix<f64>,
        input_shape: Vec<usize>,
        output_shape: Vec<usize>,
    ) -> Result<Self, LinopError> {
        let (m, n) = matrix.shape();
        if m == 0 || n == 0 {
            return Err(LinopError::InvalidParameter("empty dense matrix".into()));
        }
        if input_shape.iter().product::<usize>() != n || output_shape.iter().product::<usize>() != m {
            return Err(LinopError::InvalidParameter(format!(
                "shapes {input_shape:?} -> {output_shape:?} do not fit a {m}x{n} matrix"
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(LinopError::InvalidParameter("dense matrix has non-finite entries".into()));
        }
        let svd = DenseSvd::new(&matrix);
        Ok(Self {
            matrix,
            input_shape,
            output_shape,
            svd,
        })
    }

    /// Seeded standard-normal `m×n` matrix.
    pub fn random(m: usize, n: usize, seed: u64) -> Result<Self, LinopError> {
        let mut rng = crate::rng::NoiseRng::new(seed, crate::rng::STREAM_OPERATOR);
        let data = rng.normal_vec(m * n);
        Self::new(DMatrix::from_row_slice(m, n, &data))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl DenseSvd {
    fn new(a: &DMatrix<f64>) -> Self {
        let svd = a.clone().svd(true, true);
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested Vt");
        let s = svd.singular_values;
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
        let k = order.len();
        let mut su = DMatrix::zeros(u.nrows(), k);
        let mut sv = DMatrix::zeros(k, v_t.ncols());
        for (dst, &src) in order.iter().enumerate() {
            su.set_column(dst, &u.column(src));
            sv.set_row(dst, &v_t.row(src));
        }
        Self {
            u: su,
            values: order.iter().map(|&i| s[i]).collect(),
            v_t: sv,
        }
    }
}

impl LinearOperator for DenseOperator {
    fn name(&self) -> String {
        format!("dense({}x{})", self.matrix.nrows(), self.matrix.ncols())
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_svd: true,
            exact_kernel_solve: true,
            gram_scale: None,
        }
    }

    fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(x)).data.into()
    }

    fn adjoint_slice(&self, y: &[f64]) -> Vec<f64> {
        (self.matrix.tr_mul(&DVector::from_column_slice(y))).data.into()
    }

    fn exact_kernel_solve(&self, c: f64, sigma2: f64, r: &[f64]) -> Option<Result<Vec<f64>, LinopError>> {
        let m = self.matrix.nrows();
        let k = &self.matrix * self.matrix.transpose() * c + DMatrix::identity(m, m) * sigma2;
        let out = match k.cholesky() {
            Some(ch) => Ok(ch.solve(&DVector::from_column_slice(r)).data.into()),
            None => Err(LinopError::Singular),
        };
        Some(out)
    }

    fn svd_factors(&self) -> Result<Box<dyn SvdFactors + '_>, LinopError> {
        Ok(Box::new(&self.svd))
    }
}

impl SvdFactors for &DenseSvd {
    fn singular_values(&self) -> &[f64] {
        &self.values
    }

    fn right_adjoint(&self, x: &[f64]) -> Vec<f64> {
        (&self.v_t * DVector::from_column_slice(x)).data.into()
    }

    fn right_apply(&self, c: &[f64]) -> Vec<f64> {
        self.v_t.tr_mul(&DVector::from_column_slice(c)).data.into()
    }

    fn left_adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.u.tr_mul(&DVector::from_column_slice(y)).data.into()
    }

    fn left_apply(&self, c: &[f64]) -> Vec<f64> {
        (&self.u * DVector::from_column_slice(c)).data.into()
    }
}

/// Materializes any operator as an explicit `M×N` matrix, one column per basis vector.
pub fn to_dense(op: &dyn LinearOperator) -> DMatrix<f64> {
    let (m, n) = (op.output_dim(), op.input_dim());
    let mut out = DMatrix::zeros(m, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = op.apply_slice(&e);
        out.set_column(j, &DVector::from_vec(col));
        e[j] = 0.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::testing::*;
    use crate::rng::NoiseRng;

    #[test]
    fn random_dense_solve_matches_inverse() {
        let op = DenseOperator::random(12, 20, 4).unwrap();
        let mut rng = NoiseRng::new(9, 0);
        let r = rng.normal_vec(12);
        let v = op.exact_kernel_solve(0.8, 0.05, &r).unwrap().unwrap();
        let a = op.matrix();
        let k = a * a.transpose() * 0.8 + DMatrix::identity(12, 12) * 0.05;
        let inv = k.try_inverse().unwrap();
        let expect = inv * DVector::from_vec(r.clone());
        assert!(rel(&v, expect.as_slice()) < 1e-12);
        assert!(solve_residual(&op, 0.8, 0.05, &v, &r) < 1e-12);
        // iterative path agrees
        let cg = op.kernel_solve_iterative_slice(0.8, 0.05, &r, 1e-12, 240).unwrap();
        assert!(rel(&cg, &v) < 1e-10);
    }

    #[test]
    fn svd_sorted_and_valid() {
        let op = DenseOperator::random(12, 20, 2).unwrap();
        let f = op.svd_factors().unwrap();
        let s = f.singular_values();
        assert_eq!(s.len(), 12);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        let (recon, vo, uo) = svd_defects(&op, 8, 1);
        assert!(recon < 1e-12 && vo < 1e-12 && uo < 1e-12);
        assert!(adjoint_defect(&op, 32, 4) < 1e-12);
    }

    #[test]
    fn to_dense_round_trip() {
        let op = DenseOperator::random(5, 7, 3).unwrap();
        assert_eq!(&to_dense(&op), op.matrix());
    }
}
