//! Thin-plate-spline warp fields and differentiable bilinear resampling.
//!
//! Coordinates are normalized to [-1, 1]² with pixel `i` of an `n`-pixel axis
//! centred at `-1 + (2i+1)/n`. Control points sit on a regular `side × side`
//! grid with corners at (±1, ±1), stored row-major (y outer, x inner).
//!
//! Every TPS fitted to shifted control points is linear in the shifts, so a
//! warp field over a fixed set of query points is `identity + shifts · B`
//! where `B` depends only on the grid and the query points. [`WarpBasis`]
//! precomputes `B` once; [`tps_grid`] is then a single matrix product on the
//! tape.

use crate::element::Element;
use crate::error::{Error, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Control points per side of the default grid.
pub const GRID_SIDE: usize = 8;
/// Number of control points, C.
pub const CONTROL_POINTS: usize = GRID_SIDE * GRID_SIDE;
/// Added to the kernel diagonal before factorization.
pub const KERNEL_REGULARIZATION: f64 = 1e-8;

/// Radial basis `U(r) = r² log r²`, written in terms of `r²`; `U(0) = 0`.
pub fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Normalized centre of pixel `i` on an axis of `n` pixels.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    points: Vec<[f64; 2]>,
}

impl ControlGrid {
    pub fn regular(side: usize) -> Self {
        assert!(side >= 2, "control grid needs at least 2 points per side");
        let coord = |i: usize| -1.0 + 2.0 * i as f64 / (side - 1) as f64;
        let points = (0..side)
            .flat_map(|iy| (0..side).map(move |ix| [coord(ix), coord(iy)]))
            .collect();
        Self { points }
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl Default for ControlGrid {
    fn default() -> Self {
        Self::regular(GRID_SIDE)
    }
}

/// LU factorization with partial pivoting of a small dense matrix.
#[derive(Clone, Debug)]
struct Lu {
    n: usize,
    a: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(mut a: Vec<f64>, n: usize) -> Option<Self> {
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))?;
            if a[p * n + k].abs() < 1e-300 {
                return None;
            }
            if p != k {
                for j in 0..n {
                    a.swap(p * n + j, k * n + j);
                }
                perm.swap(p, k);
            }
            let pivot = a[k * n + k];
            for i in k + 1..n {
                let f = a[i * n + k] / pivot;
                a[i * n + k] = f;
                for j in k + 1..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
            }
        }
        Some(Self { n, a, perm })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.a[i * n + j] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.a[i * n + j] * x[j]).sum();
            x[i] = (x[i] - s) / self.a[i * n + i];
        }
        x
    }
}

/// Solved TPS for one coordinate: `f(p) = Σ w_j U(|p-c_j|) + a0 + a1·x + a2·y`.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsCoefficients {
    pub weights: Vec<f64>,
    pub affine: [f64; 3],
}

impl TpsCoefficients {
    /// Norm of the non-affine part; zero exactly when the fit is affine.
    pub fn bending_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// The factorized `(C+3)×(C+3)` interpolation system of a control grid.
#[derive(Clone, Debug)]
pub struct TpsSystem {
    grid: ControlGrid,
    lu: Lu,
}

impl TpsSystem {
    pub fn new(grid: ControlGrid) -> Result<Self> {
        let c = grid.len();
        for (i, p) in grid.points().iter().enumerate() {
            if grid.points()[..i].contains(p) {
                return Err(Error::Config(format!("duplicate control point {p:?}")));
            }
        }
        let n = c + 3;
        let mut a = vec![0.0; n * n];
        let pts = grid.points();
        for i in 0..c {
            for j in 0..c {
                let dx = pts[i][0] - pts[j][0];
                let dy = pts[i][1] - pts[j][1];
                a[i * n + j] = tps_kernel(dx * dx + dy * dy);
            }
            a[i * n + i] += KERNEL_REGULARIZATION;
            let row = [1.0, pts[i][0], pts[i][1]];
            for (k, &v) in row.iter().enumerate() {
                a[i * n + c + k] = v;
                a[(c + k) * n + i] = v;
            }
        }
        let lu = Lu::factor(a, n).ok_or_else(|| Error::Config("singular thin-plate-spline system".into()))?;
        Ok(Self { grid, lu })
    }

    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }

    /// Fits the TPS taking value `targets[j]` at control point `j`.
    pub fn solve(&self, targets: &[f64]) -> TpsCoefficients {
        let c = self.grid.len();
        assert_eq!(targets.len(), c, "one target per control point");
        let mut rhs = targets.to_vec();
        rhs.extend_from_slice(&[0.0; 3]);
        let x = self.lu.solve(&rhs);
        TpsCoefficients {
            weights: x[..c].to_vec(),
            affine: [x[c], x[c + 1], x[c + 2]],
        }
    }

    pub fn evaluate(&self, coef: &TpsCoefficients, p: [f64; 2]) -> f64 {
        let radial: f64 = self
            .grid
            .points()
            .iter()
            .zip(&coef.weights)
            .map(|(c, w)| {
                let dx = p[0] - c[0];
                let dy = p[1] - c[1];
                w * tps_kernel(dx * dx + dy * dy)
            })
            .sum();
        radial + coef.affine[0] + coef.affine[1] * p[0] + coef.affine[2] * p[1]
    }

    /// `B[j][q]`: the value at query `q` of the TPS interpolating the unit
    /// impulse at control point `j`.
    fn basis_matrix(&self, queries: &[[f64; 2]]) -> Vec<f64> {
        let c = self.grid.len();
        let n = c + 3;
        // Columns j < C of the inverse system.
        let mut inv_cols = vec![0.0; n * c];
        for j in 0..c {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.lu.solve(&e);
            for (m, v) in col.into_iter().enumerate() {
                inv_cols[m * c + j] = v;
            }
        }
        let mut basis = vec![0.0; c * queries.len()];
        let mut row = vec![0.0; n];
        for (q, p) in queries.iter().enumerate() {
            for (m, cp) in self.grid.points().iter().enumerate() {
                let dx = p[0] - cp[0];
                let dy = p[1] - cp[1];
                row[m] = tps_kernel(dx * dx + dy * dy);
            }
            row[c] = 1.0;
            row[c + 1] = p[0];
            row[c + 2] = p[1];
            for j in 0..c {
                let v: f64 = (0..n).map(|m| row[m] * inv_cols[m * c + j]).sum();
                basis[j * queries.len() + q] = v;
            }
        }
        basis
    }
}

/// Precomputed warp basis for a fixed set of query points.
#[derive(Clone, Debug)]
pub struct WarpBasis<T> {
    height: usize,
    width: usize,
    control_points: usize,
    /// `C × Q`
    basis: Tensor<T>,
    /// `2 × Q`, x plane then y plane
    identity: Tensor<T>,
}

impl<T: Element> WarpBasis<T> {
    /// Basis over the pixel centres of an `height × width` output grid.
    pub fn for_grid(system: &TpsSystem, height: usize, width: usize) -> Self {
        let queries: Vec<[f64; 2]> = (0..height)
            .flat_map(|i| (0..width).map(move |j| [pixel_center(j, width), pixel_center(i, height)]))
            .collect();
        let mut b = Self::for_points(system, &queries);
        b.height = height;
        b.width = width;
        b
    }

    /// Basis over arbitrary query points, laid out as a `1 × Q` field.
    pub fn for_points(system: &TpsSystem, queries: &[[f64; 2]]) -> Self {
        let c = system.grid().len();
        let q = queries.len();
        let basis = system.basis_matrix(queries);
        let mut identity = Vec::with_capacity(2 * q);
        identity.extend(queries.iter().map(|p| T::from_f64(p[0])));
        identity.extend(queries.iter().map(|p| T::from_f64(p[1])));
        Self {
            height: 1,
            width: q,
            control_points: c,
            basis: Tensor::new(&[c, q], basis.into_iter().map(T::from_f64).collect()).expect("basis shape"),
            identity: Tensor::new(&[2, q], identity).expect("identity shape"),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn control_points(&self) -> usize {
        self.control_points
    }

    /// Warp field with zero shifts, `2 × H × W`.
    pub fn identity_field(&self) -> Tensor<T> {
        self.identity.clone().reshape(&[2, self.height, self.width]).expect("identity shape")
    }

    /// Evaluates the warp field outside any tape.
    pub fn field(&self, params: &TpsParams<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let s = tape.constant(params.shifts.clone());
        let f = tps_grid(&mut tape, s, self)?;
        Ok(tape.value(f).clone())
    }
}

/// Control-point displacements: all Δx first, then all Δy (length 2C).
#[derive(Clone, Debug, PartialEq)]
pub struct TpsParams<T> {
    pub shifts: Tensor<T>,
}

impl<T: Element> TpsParams<T> {
    pub fn new(shifts: Vec<T>) -> Result<Self> {
        let n = shifts.len();
        if n % 2 != 0 || n == 0 {
            return Err(Error::Data(format!("TPS shift vector must have even positive length, got {n}")));
        }
        Ok(Self {
            shifts: Tensor::new(&[n], shifts)?,
        })
    }

    pub fn zeros(control_points: usize) -> Self {
        Self {
            shifts: Tensor::zeros(&[2 * control_points]),
        }
    }

    /// Every control point displaced by `(dx, dy)`.
    pub fn uniform(control_points: usize, dx: T, dy: T) -> Self {
        Self {
            shifts: Tensor::from_fn(&[2 * control_points], |i| if i < control_points { dx } else { dy }),
        }
    }

    pub fn control_points(&self) -> usize {
        self.shifts.numel() / 2
    }

    pub fn dx(&self) -> &[T] {
        &self.shifts.data()[..self.control_points()]
    }

    pub fn dy(&self) -> &[T] {
        &self.shifts.data()[self.control_points()..]
    }
}

/// Warp field `identity + shifts·B` on the tape, shaped `2 × H × W`.
pub fn tps_grid<'a, T: Element>(tape: &mut Tape<'a, T>, shifts: Var, basis: &'a WarpBasis<T>) -> Result<Var, TensorError> {
    let c = basis.control_points;
    let n = tape.value(shifts).numel();
    if n != 2 * c {
        return Err(TensorError::invalid("tps_grid", format!("expected {} shift values, got {n}", 2 * c)));
    }
    if !tape.value(shifts).all_finite() {
        return Err(TensorError::NonFinite("tps_grid"));
    }
    let s = tape.reshape(shifts, &[2, c])?;
    let b = tape.constant_ref(&basis.basis);
    let disp = tape.matmul(s, b)?;
    let id = tape.constant_ref(&basis.identity);
    let field = tape.add(disp, id)?;
    tape.reshape(field, &[2, basis.height, basis.width])
}

/// Bilinear resampling of `features: D×H×W` at `field: 2×H'×W'`, border-clamped.
pub fn grid_sample<T: Element>(tape: &mut Tape<'_, T>, features: Var, field: Var) -> Result<Var, TensorError> {
    tape.grid_sample(features, field)
}
