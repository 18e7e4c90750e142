//! Measurement factors: residuals and analytic Jacobians.
//!
//! Residuals are `measurement − prediction`, angles wrapped. Both residual and
//! Jacobian are whitened by `L⁻¹` where `Σ = L Lᵀ`, so the squared norm of the
//! whitened residual is the Mahalanobis cost of the factor.
//!
//! Every variable is handled as a 3-vector block: poses are `(x, y, θ)`,
//! landmarks `(x, y, ·)` with an unused third column.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{GraphError, Values, Variable, VariableKey};
use crate::geometry::{wrap, Point2, Pose2, MIN_RANGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FactorKind {
    Prior,
    Odometry,
    Gps,
    RangeBearing,
    InterDistance,
}

impl FactorKind {
    pub fn arity(self) -> usize {
        match self {
            FactorKind::Prior | FactorKind::Gps => 1,
            _ => 2,
        }
    }
}

/// Gaussian noise with a cached whitening matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    dim: usize,
    cov: Matrix3<f64>,
    whiten: Matrix3<f64>,
}

impl NoiseModel {
    /// `cov` must be square (1 to 3), symmetric and positive definite.
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self, GraphError> {
        let dim = cov.nrows();
        if dim == 0 || dim > 3 || cov.ncols() != dim {
            return Err(GraphError::InvalidNoise("covariance must be 1x1, 2x2 or 3x3".into()));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::InvalidNoise("non-finite covariance".into()));
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        if (cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(GraphError::InvalidNoise("covariance is not symmetric".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| GraphError::InvalidNoise("covariance is not positive definite".into()))?;
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(dim, dim))
            .ok_or_else(|| GraphError::InvalidNoise("singular covariance".into()))?;
        let mut c = Matrix3::zeros();
        let mut w = Matrix3::zeros();
        for i in 0..dim {
            for j in 0..dim {
                c[(i, j)] = cov[(i, j)];
                w[(i, j)] = l_inv[(i, j)];
            }
        }
        Ok(Self { dim, cov: c, whiten: w })
    }

    pub fn diagonal_sigmas(sigmas: &[f64]) -> Result<Self, GraphError> {
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(GraphError::InvalidNoise(format!("sigmas must be positive: {sigmas:?}")));
        }
        let d = DVector::from_iterator(sigmas.len(), sigmas.iter().map(|s| s * s));
        Self::from_covariance(&DMatrix::from_diagonal(&d))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.cov.view((0, 0), (self.dim, self.dim)).into_owned()
    }

    pub(crate) fn whiten_matrix(&self) -> &Matrix3<f64> {
        &self.whiten
    }
}

/// A single term of the least-squares cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub keys: Vec<VariableKey>,
    /// Prior/full GPS: (x, y, θ). Position GPS: (x, y). Odometry: (dx, dy, dθ).
    /// Range-bearing: (r, φ). Inter-distance: (δ).
    pub measurement: Vec<f64>,
    pub noise: NoiseModel,
}

/// Residual and Jacobian blocks before whitening, padded to 3 rows.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RawLinearization {
    pub residual: Vector3<f64>,
    pub jac: [Matrix3<f64>; 2],
}

fn as_pose(v: Variable, k: VariableKey) -> Result<Pose2, GraphError> {
    match v {
        Variable::Pose(p) => Ok(p),
        _ => Err(GraphError::WrongKind(k)),
    }
}

fn as_landmark(v: Variable, k: VariableKey) -> Result<Point2, GraphError> {
    match v {
        Variable::Landmark(p) => Ok(p),
        _ => Err(GraphError::WrongKind(k)),
    }
}

impl Factor {
    pub fn new(
        kind: FactorKind,
        keys: Vec<VariableKey>,
        measurement: Vec<f64>,
        noise: NoiseModel,
    ) -> Result<Self, GraphError> {
        if keys.len() != kind.arity() {
            return Err(GraphError::Arity { kind, got: keys.len() });
        }
        let expected = match kind {
            FactorKind::Prior | FactorKind::Odometry => 3,
            FactorKind::Gps => noise.dim(),
            FactorKind::RangeBearing => 2,
            FactorKind::InterDistance => 1,
        };
        if measurement.len() != expected || noise.dim() != expected || (kind == FactorKind::Gps && expected == 1) {
            return Err(GraphError::InvalidMeasurement(format!(
                "{kind:?} expects {expected} values with matching covariance"
            )));
        }
        if measurement.iter().any(|m| !m.is_finite()) {
            return Err(GraphError::InvalidMeasurement("non-finite measurement".into()));
        }
        if kind == FactorKind::InterDistance && keys[0] == keys[1] {
            return Err(GraphError::IdenticalKeys(keys[0]));
        }
        Ok(Self {
            kind,
            keys,
            measurement,
            noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.noise.dim()
    }

    pub(crate) fn raw(&self, v: &Values) -> Result<RawLinearization, GraphError> {
        let a = v.get(self.keys[0]).ok_or(GraphError::MissingKey(self.keys[0]))?;
        let b = match self.keys.get(1) {
            Some(&k) => v.get(k).ok_or(GraphError::MissingKey(k))?,
            None => a,
        };
        self.raw_at(a, b)
    }

    /// Linearization at explicit variable values; `b` is ignored by unary
    /// factors.
    pub(crate) fn raw_at(&self, a: Variable, b: Variable) -> Result<RawLinearization, GraphError> {
        let z = &self.measurement;
        let mut r = Vector3::zeros();
        let mut ja = Matrix3::zeros();
        let mut jb = Matrix3::zeros();
        match self.kind {
            FactorKind::Prior | FactorKind::Gps => {
                let p = as_pose(a, self.keys[0])?;
                r.x = z[0] - p.x;
                r.y = z[1] - p.y;
                ja[(0, 0)] = -1.0;
                ja[(1, 1)] = -1.0;
                if z.len() == 3 {
                    r.z = wrap(z[2] - p.theta);
                    ja[(2, 2)] = -1.0;
                }
            }
            FactorKind::Odometry => {
                let a = as_pose(a, self.keys[0])?;
                let b = as_pose(b, self.keys[1])?;
                let d = a.between(&b);
                r = Vector3::new(z[0] - d.dx, z[1] - d.dy, wrap(z[2] - d.dtheta));
                let (s, c) = a.theta.sin_cos();
                let ex = b.x - a.x;
                let ey = b.y - a.y;
                // prediction Jacobians, negated below
                ja = Matrix3::new(-c, -s, -s * ex + c * ey, s, -c, -c * ex - s * ey, 0.0, 0.0, -1.0);
                jb = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
                ja = -ja;
                jb = -jb;
            }
            FactorKind::RangeBearing => {
                let p = as_pose(a, self.keys[0])?;
                let l = as_landmark(b, self.keys[1])?;
                let dx = l.x - p.x;
                let dy = l.y - p.y;
                let q = dx * dx + dy * dy;
                let range = q.sqrt();
                if range <= MIN_RANGE {
                    return Err(GraphError::Degenerate(self.keys[1]));
                }
                let bearing = wrap(dy.atan2(dx) - p.theta);
                r.x = z[0] - range;
                r.y = wrap(z[1] - bearing);
                // ∂range = (-dx, -dy)/r wrt pose, (dx, dy)/r wrt landmark
                // ∂bearing = (dy, -dx)/q, -1 wrt pose, (-dy, dx)/q wrt landmark
                ja[(0, 0)] = dx / range;
                ja[(0, 1)] = dy / range;
                ja[(1, 0)] = -dy / q;
                ja[(1, 1)] = dx / q;
                ja[(1, 2)] = 1.0;
                jb[(0, 0)] = -dx / range;
                jb[(0, 1)] = -dy / range;
                jb[(1, 0)] = dy / q;
                jb[(1, 1)] = -dx / q;
            }
            FactorKind::InterDistance => {
                let li = as_landmark(a, self.keys[0])?;
                let lj = as_landmark(b, self.keys[1])?;
                let dx = li.x - lj.x;
                let dy = li.y - lj.y;
                let n = dx.hypot(dy);
                if n <= MIN_RANGE {
                    return Err(GraphError::Degenerate(self.keys[1]));
                }
                r.x = z[0] - n;
                ja[(0, 0)] = -dx / n;
                ja[(0, 1)] = -dy / n;
                jb[(0, 0)] = dx / n;
                jb[(0, 1)] = dy / n;
            }
        }
        Ok(RawLinearization {
            residual: r,
            jac: [ja, jb],
        })
    }

    pub(crate) fn whitened(&self, v: &Values) -> Result<RawLinearization, GraphError> {
        self.whiten(self.raw(v)?)
    }

    pub(crate) fn whitened_at(&self, a: Variable, b: Variable) -> Result<RawLinearization, GraphError> {
        self.whiten(self.raw_at(a, b)?)
    }

    fn whiten(&self, raw: RawLinearization) -> Result<RawLinearization, GraphError> {
        let w = self.noise.whiten_matrix();
        Ok(RawLinearization {
            residual: w * raw.residual,
            jac: [w * raw.jac[0], w * raw.jac[1]],
        })
    }

    /// Whitened residual, length equal to the factor dimension.
    pub fn residual(&self, v: &Values) -> Result<DVector<f64>, GraphError> {
        let w = self.whitened(v)?;
        Ok(DVector::from_iterator(
            self.dim(),
            w.residual.iter().copied().take(self.dim()),
        ))
    }

    /// Whitened Jacobian blocks, one per key, each `dim × dof(key)`.
    pub fn jacobians(&self, v: &Values) -> Result<Vec<DMatrix<f64>>, GraphError> {
        let w = self.whitened(v)?;
        Ok(self
            .keys
            .iter()
            .enumerate()
            .map(|(n, k)| w.jac[n].view((0, 0), (self.dim(), k.dof())).into_owned())
            .collect())
    }

    /// Squared Mahalanobis norm of the residual.
    pub fn cost(&self, v: &Values) -> Result<f64, GraphError> {
        Ok(self.whitened(v)?.residual.norm_squared())
    }
}

pub fn factor_residual(f: &Factor, v: &Values) -> Result<DVector<f64>, GraphError> {
    f.residual(v)
}

pub fn factor_jacobian(f: &Factor, v: &Values) -> Result<Vec<DMatrix<f64>>, GraphError> {
    f.jacobians(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_4;

    fn pk(i: u64) -> VariableKey {
        VariableKey::pose(i)
    }
    fn lk(i: u64) -> VariableKey {
        VariableKey::landmark(i)
    }

    fn values(poses: &[Pose2], lms: &[Point2]) -> Values {
        let mut v = Values::default();
        for (i, p) in poses.iter().enumerate() {
            v.insert_pose(i as u64, *p);
        }
        for (i, l) in lms.iter().enumerate() {
            v.insert_landmark(i as u64, *l);
        }
        v
    }

    #[test]
    fn range_bearing_examples() {
        let v = values(&[Pose2::new(0.0, 0.0, 0.0)], &[Point2::new(1.0, 0.0)]);
        let n = NoiseModel::diagonal_sigmas(&[1.0, 1.0]).unwrap();
        let f = Factor::new(FactorKind::RangeBearing, vec![pk(0), lk(0)], vec![1.0, 0.0], n.clone()).unwrap();
        assert_eq!(f.residual(&v).unwrap().as_slice(), &[0.0, 0.0]);
        let f = Factor::new(FactorKind::RangeBearing, vec![pk(0), lk(0)], vec![2.0, FRAC_PI_4], n).unwrap();
        let r = f.residual(&v).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-15 && (r[1] - FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn inter_distance_examples() {
        let n = NoiseModel::diagonal_sigmas(&[1.0]).unwrap();
        let v = values(&[], &[Point2::new(0.0, 0.0), Point2::new(1.1, 0.0)]);
        let f = Factor::new(FactorKind::InterDistance, vec![lk(0), lk(1)], vec![1.1], n.clone()).unwrap();
        assert_eq!(f.residual(&v).unwrap()[0], 0.0);

        let v = values(&[], &[Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)]);
        let j = f.jacobians(&v).unwrap();
        // residual = δ − |l_i − l_j|, so moving l_j away lowers it
        assert_eq!(j[1].as_slice(), &[-1.0, 0.0]);
        assert_eq!(j[0].as_slice(), &[1.0, 0.0]);

        assert!(matches!(
            Factor::new(FactorKind::InterDistance, vec![lk(0), lk(0)], vec![1.0], n),
            Err(GraphError::IdenticalKeys(_))
        ));
    }

    #[test]
    fn gps_position_block_is_negative_identity() {
        let v = values(&[Pose2::new(3.0, 4.0, 1.0)], &[]);
        let f = Factor::new(
            FactorKind::Gps,
            vec![pk(0)],
            vec![3.5, 3.0],
            NoiseModel::diagonal_sigmas(&[1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let j = &f.jacobians(&v).unwrap()[0];
        assert_eq!(j.as_slice(), &[-1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        assert_eq!(f.residual(&v).unwrap().as_slice(), &[0.5, -1.0]);
    }

    #[test]
    fn coincident_landmark_is_degenerate() {
        let v = values(&[Pose2::new(1.0, 1.0, 0.0)], &[Point2::new(1.0, 1.0)]);
        let f = Factor::new(
            FactorKind::RangeBearing,
            vec![pk(0), lk(0)],
            vec![1.0, 0.0],
            NoiseModel::diagonal_sigmas(&[0.1, 0.05]).unwrap(),
        )
        .unwrap();
        assert!(matches!(f.residual(&v), Err(GraphError::Degenerate(_))));
        let missing = values(&[Pose2::new(1.0, 1.0, 0.0)], &[]);
        assert!(matches!(f.residual(&missing), Err(GraphError::MissingKey(_))));
    }

    #[test]
    fn whitening_matches_mahalanobis() {
        let cov = DMatrix::from_row_slice(3, 3, &[0.04, 0.01, 0.0, 0.01, 0.09, 0.002, 0.0, 0.002, 0.01]);
        let n = NoiseModel::from_covariance(&cov).unwrap();
        let v = values(&[Pose2::new(0.2, -0.1, 0.3)], &[]);
        let f = Factor::new(FactorKind::Prior, vec![pk(0)], vec![0.0, 0.0, 0.0], n).unwrap();
        let raw = DVector::from_column_slice(&[-0.2, 0.1, -0.3]);
        let expected = (raw.transpose() * cov.try_inverse().unwrap() * &raw)[0];
        assert!((f.cost(&v).unwrap() - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn invalid_noise_rejected() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(NoiseModel::from_covariance(&asym).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(NoiseModel::from_covariance(&indef).is_err());
        assert!(NoiseModel::diagonal_sigmas(&[0.0]).is_err());
    }

    fn perturbed(v: &Values, k: VariableKey, axis: usize, h: f64) -> Values {
        let mut out = v.clone();
        match v.get(k).unwrap() {
            Variable::Pose(p) => {
                let mut a = [p.x, p.y, p.theta];
                a[axis] += h;
                // keep θ unwrapped here so the difference quotient is smooth
                out.insert_pose(
                    k.index,
                    Pose2 {
                        x: a[0],
                        y: a[1],
                        theta: a[2],
                    },
                );
            }
            Variable::Landmark(l) => {
                let mut a = [l.x, l.y];
                a[axis] += h;
                out.insert_landmark(k.index, Point2::new(a[0], a[1]));
            }
        }
        out
    }

    fn check_fd(f: &Factor, v: &Values) -> f64 {
        let h = 1e-6;
        let analytic = f.jacobians(v).unwrap();
        let mut worst: f64 = 0.0;
        for (n, &k) in f.keys.iter().enumerate() {
            for axis in 0..k.dof() {
                let rp = f.residual(&perturbed(v, k, axis, h)).unwrap();
                let rm = f.residual(&perturbed(v, k, axis, -h)).unwrap();
                for row in 0..f.dim() {
                    let fd = (rp[row] - rm[row]) / (2.0 * h);
                    let a = analytic[n][(row, axis)];
                    let err = (fd - a).abs() / a.abs().max(fd.abs()).max(1.0);
                    worst = worst.max(err);
                }
            }
        }
        worst
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sig = |rng: &mut ChaCha8Rng, n: usize| {
            NoiseModel::diagonal_sigmas(&(0..n).map(|_| rng.random_range(0.05..2.0)).collect::<Vec<_>>()).unwrap()
        };
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let pose = |rng: &mut ChaCha8Rng| {
                Pose2::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-3.0..3.0),
                )
            };
            let a = pose(&mut rng);
            let b = pose(&mut rng);
            let l0 = Point2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let mut l1 = Point2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            if l1.distance(&l0) < 0.2 {
                l1.x += 1.0;
            }
            let v = values(&[a, b], &[l0, l1]);
            let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.2..0.2);

            let d = a.between(&b);
            let odo = Factor::new(
                FactorKind::Odometry,
                vec![pk(0), pk(1)],
                vec![
                    d.dx + jitter(&mut rng),
                    d.dy + jitter(&mut rng),
                    d.dtheta + jitter(&mut rng),
                ],
                sig(&mut rng, 3),
            )
            .unwrap();
            let prior = Factor::new(
                FactorKind::Prior,
                vec![pk(0)],
                vec![a.x + jitter(&mut rng), a.y, a.theta + jitter(&mut rng)],
                sig(&mut rng, 3),
            )
            .unwrap();
            let gps = Factor::new(
                FactorKind::Gps,
                vec![pk(1)],
                vec![b.x, b.y + jitter(&mut rng)],
                sig(&mut rng, 2),
            )
            .unwrap();
            let gps_full = Factor::new(
                FactorKind::Gps,
                vec![pk(1)],
                vec![b.x, b.y, b.theta + jitter(&mut rng)],
                sig(&mut rng, 3),
            )
            .unwrap();
            let (r, phi) = a.range_bearing(&l0).unwrap();
            let rb = Factor::new(
                FactorKind::RangeBearing,
                vec![pk(0), lk(0)],
                vec![r + jitter(&mut rng), phi + jitter(&mut rng)],
                sig(&mut rng, 2),
            )
            .unwrap();
            let id = Factor::new(
                FactorKind::InterDistance,
                vec![lk(0), lk(1)],
                vec![l0.distance(&l1) + jitter(&mut rng)],
                sig(&mut rng, 1),
            )
            .unwrap();
            for f in [&odo, &prior, &gps, &gps_full, &rb, &id] {
                worst = worst.max(check_fd(f, &v));
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }
}
