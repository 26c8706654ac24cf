//! Spatial and phase-space discretizations.
//!
//! The spatial grid is a uniform vertex-centered Cartesian lattice over the
//! bounding box of the enclosing domain. Phase space adds `n_theta`
//! equispaced unit directions; the physical velocity at a node is
//! `theta = p(x) v_j`.

use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::scalar::{Scalar, Vector};

/// Uniform vertex-centered grid: node `(ix, iy)` sits at
/// `(x_min + ix dx, y_min + iy dy)` with `dx = (x_max - x_min)/(nx - 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialGrid<S: Scalar> {
    pub x_min: S,
    pub x_max: S,
    pub y_min: S,
    pub y_max: S,
    pub nx: usize,
    pub ny: usize,
    pub dx: S,
    pub dy: S,
}

impl<S: Scalar> SpatialGrid<S> {
    pub fn new(lo: Vector<S>, hi: Vector<S>, nx: usize, ny: usize) -> Self {
        assert!(nx >= 2 && ny >= 2, "grid needs at least 2 nodes per axis");
        SpatialGrid {
            x_min: lo[0],
            x_max: hi[0],
            y_min: lo[1],
            y_max: hi[1],
            nx,
            ny,
            dx: (hi[0] - lo[0]) / S::of((nx - 1) as f64),
            dy: (hi[1] - lo[1]) / S::of((ny - 1) as f64),
        }
    }

    /// Grid covering the bounding box of `domain`.
    pub fn covering(domain: &Domain<S>, nx: usize, ny: usize) -> Self {
        let (lo, hi) = domain.bounding_box();
        Self::new(lo, hi, nx, ny)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Area weight of one node cell.
    pub fn cell_area(&self) -> S {
        self.dx * self.dy
    }

    #[inline]
    pub fn node(&self, ix: usize, iy: usize) -> Vector<S> {
        [
            self.x_min + S::of(ix as f64) * self.dx,
            self.y_min + S::of(iy as f64) * self.dy,
        ]
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    /// Iterate `(ix, iy, position)` in row-major order.
    pub fn node_iter(&self) -> impl Iterator<Item = (usize, usize, Vector<S>)> + '_ {
        let (nx, ny) = (self.nx, self.ny);
        (0..ny).flat_map(move |iy| (0..nx).map(move |ix| (ix, iy, self.node(ix, iy))))
    }

    /// Inside-mask for `domain` (true where the node is strictly inside).
    pub fn inside_mask(&self, domain: &Domain<S>) -> Vec<bool> {
        self.node_iter()
            .map(|(_, _, x)| domain.inside(x))
            .collect()
    }

    /// Bilinear interpolation stencil for the point `x`, clamped to the box.
    /// Returns the base node index (lower-left corner) and fractional
    /// coordinates in `[0, 1]`.
    #[inline]
    pub fn stencil(&self, x: Vector<S>) -> (usize, S, S) {
        let fx = ((x[0] - self.x_min) / self.dx)
            .max(S::zero())
            .min(S::of((self.nx - 1) as f64));
        let fy = ((x[1] - self.y_min) / self.dy)
            .max(S::zero())
            .min(S::of((self.ny - 1) as f64));
        let ix = fx.floor().to_usize().unwrap_or(0).min(self.nx - 2);
        let iy = fy.floor().to_usize().unwrap_or(0).min(self.ny - 2);
        let wx = fx - S::of(ix as f64);
        let wy = fy - S::of(iy as f64);
        (self.index(ix, iy), wx, wy)
    }

    pub fn same_shape(&self, other: &SpatialGrid<S>) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && (self.x_min - other.x_min).abs() < S::of(1e-12)
            && (self.y_min - other.y_min).abs() < S::of(1e-12)
            && (self.x_max - other.x_max).abs() < S::of(1e-12)
            && (self.y_max - other.y_max).abs() < S::of(1e-12)
    }

    pub fn shape_string(&self) -> String {
        format!(
            "{}x{} over [{}, {}] x [{}, {}]",
            self.nx,
            self.ny,
            self.x_min.to_f64_lossy(),
            self.x_max.to_f64_lossy(),
            self.y_min.to_f64_lossy(),
            self.y_max.to_f64_lossy()
        )
    }
}

/// Scalar grid function over a [`SpatialGrid`] (row-major values).
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage<S: Scalar> {
    pub grid: SpatialGrid<S>,
    pub values: Vec<S>,
}

impl<S: Scalar> GridImage<S> {
    pub fn zeros(grid: SpatialGrid<S>) -> Self {
        GridImage {
            values: vec![S::zero(); grid.len()],
            grid,
        }
    }

    pub fn from_fn(grid: SpatialGrid<S>, f: impl Fn(Vector<S>) -> S) -> Self {
        let values = grid.node_iter().map(|(_, _, x)| f(x)).collect();
        GridImage { grid, values }
    }

    pub fn new(grid: SpatialGrid<S>, values: Vec<S>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch {
                expected: format!("{} values", grid.len()),
                got: format!("{}", values.len()),
            });
        }
        Ok(GridImage { grid, values })
    }

    /// Bilinear point evaluation (clamped at the box edge).
    #[inline]
    pub fn interp(&self, x: Vector<S>) -> S {
        let (base, wx, wy) = self.grid.stencil(x);
        let nx = self.grid.nx;
        let v = &self.values;
        let one = S::one();
        (one - wy) * ((one - wx) * v[base] + wx * v[base + 1])
            + wy * ((one - wx) * v[base + nx] + wx * v[base + nx + 1])
    }

    /// Zero all nodes outside `domain`.
    pub fn mask_to(&mut self, domain: &Domain<S>) {
        for (i, (_, _, x)) in self.grid.node_iter().enumerate() {
            if !domain.inside(x) {
                self.values[i] = S::zero();
            }
        }
    }

    /// Weighted L2 norm with cell-area weights.
    pub fn l2_norm(&self) -> S {
        let a = self.grid.cell_area();
        (self
            .values
            .iter()
            .map(|&v| v * v)
            .fold(S::zero(), |s, v| s + v)
            * a)
            .sqrt()
    }

    /// Cell-area weighted inner product.
    pub fn dot(&self, other: &GridImage<S>) -> S {
        debug_assert!(self.grid.same_shape(&other.grid));
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a * b)
            .fold(S::zero(), |s, v| s + v)
            * self.grid.cell_area()
    }

    pub fn axpy(&mut self, alpha: S, other: &GridImage<S>) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: S) {
        for a in self.values.iter_mut() {
            *a = *a * alpha;
        }
    }

    /// Discrete H1 norm: `(||g||^2 + ||grad g||^2)^(1/2)` with centered
    /// differences inside `mask`, one-sided at the mask edge.
    pub fn h1_norm(&self, mask: &[bool]) -> S {
        let g = &self.grid;
        let a = g.cell_area();
        let mut total = S::zero();
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let i = g.index(ix, iy);
                if !mask[i] {
                    continue;
                }
                let v = self.values[i];
                let dxv = self.masked_diff(mask, ix, iy, true);
                let dyv = self.masked_diff(mask, ix, iy, false);
                total = total + a * (v * v + dxv * dxv + dyv * dyv);
            }
        }
        total.sqrt()
    }

    fn masked_diff(&self, mask: &[bool], ix: usize, iy: usize, x_axis: bool) -> S {
        let g = &self.grid;
        let (n, h) = if x_axis { (g.nx, g.dx) } else { (g.ny, g.dy) };
        let coord = if x_axis { ix } else { iy };
        let at = |c: usize| {
            let (jx, jy) = if x_axis { (c, iy) } else { (ix, c) };
            let idx = g.index(jx, jy);
            (mask[idx], self.values[idx])
        };
        let has_prev = coord > 0 && at(coord - 1).0;
        let has_next = coord + 1 < n && at(coord + 1).0;
        match (has_prev, has_next) {
            (true, true) => (at(coord + 1).1 - at(coord - 1).1) / (h + h),
            (false, true) => (at(coord + 1).1 - at(coord).1) / h,
            (true, false) => (at(coord).1 - at(coord - 1).1) / h,
            (false, false) => S::zero(),
        }
    }

    pub fn max_abs(&self) -> S {
        self.values
            .iter()
            .fold(S::zero(), |m, &v| m.max(v.abs()))
    }
}

/// Source term on the spatial grid, zero outside the support domain by
/// construction.
#[derive(Clone, Debug)]
pub struct SourceImage<S: Scalar> {
    image: GridImage<S>,
}

impl<S: Scalar> SourceImage<S> {
    /// Masks `image` to `support` and wraps it.
    pub fn new(mut image: GridImage<S>, support: &Domain<S>) -> Self {
        image.mask_to(support);
        SourceImage { image }
    }

    pub fn image(&self) -> &GridImage<S> {
        &self.image
    }

    pub fn into_image(self) -> GridImage<S> {
        self.image
    }
}

impl<S: Scalar> std::ops::Deref for SourceImage<S> {
    type Target = GridImage<S>;
    fn deref(&self) -> &GridImage<S> {
        &self.image
    }
}

/// Phase-space grid: spatial nodes times `n_theta` equispaced directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseGrid<S: Scalar> {
    pub spatial: SpatialGrid<S>,
    pub n_theta: usize,
}

impl<S: Scalar> PhaseGrid<S> {
    pub fn new(spatial: SpatialGrid<S>, n_theta: usize) -> Result<Self> {
        if n_theta < 4 || n_theta % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "n_theta must be even and >= 4, got {n_theta}"
            )));
        }
        Ok(PhaseGrid { spatial, n_theta })
    }

    pub fn len(&self) -> usize {
        self.spatial.len() * self.n_theta
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Direction angle of node `j`.
    #[inline]
    pub fn angle(&self, j: usize) -> S {
        S::of(j as f64) * (S::PI() + S::PI()) / S::of(self.n_theta as f64)
    }

    /// Angular quadrature weight on the unit circle.
    #[inline]
    pub fn d_angle(&self) -> S {
        (S::PI() + S::PI()) / S::of(self.n_theta as f64)
    }

    #[inline]
    pub fn index(&self, spatial_idx: usize, j: usize) -> usize {
        spatial_idx * self.n_theta + j
    }

    /// Periodic linear interpolation stencil in angle: returns
    /// `(j0, w)` so that `value = (1 - w) f[j0] + w f[(j0 + 1) % n]`.
    #[inline]
    pub fn angle_stencil(&self, angle: S) -> (usize, S) {
        let two_pi = S::PI() + S::PI();
        let mut a = angle % two_pi;
        if a < S::zero() {
            a = a + two_pi;
        }
        let f = a / self.d_angle();
        let j = f.floor().to_usize().unwrap_or(0).min(self.n_theta - 1);
        (j, f - S::of(j as f64))
    }
}

/// Function on phase space (spatial node-major, angle-minor layout).
#[derive(Clone, Debug)]
pub struct PhaseFunction<S: Scalar> {
    pub grid: PhaseGrid<S>,
    pub values: Vec<S>,
}

impl<S: Scalar> PhaseFunction<S> {
    pub fn zeros(grid: PhaseGrid<S>) -> Self {
        PhaseFunction {
            values: vec![S::zero(); grid.len()],
            grid,
        }
    }

    /// Lift of a grid image: constant in angle.
    pub fn lift(grid: PhaseGrid<S>, image: &GridImage<S>) -> Result<Self> {
        if !grid.spatial.same_shape(&image.grid) {
            return Err(Error::GridMismatch {
                expected: grid.spatial.shape_string(),
                got: image.grid.shape_string(),
            });
        }
        let mut values = Vec::with_capacity(grid.len());
        for &v in &image.values {
            for _ in 0..grid.n_theta {
                values.push(v);
            }
        }
        Ok(PhaseFunction { grid, values })
    }

    #[inline]
    pub fn at(&self, spatial_idx: usize, j: usize) -> S {
        self.values[self.grid.index(spatial_idx, j)]
    }

    /// Bilinear-in-space, periodic-linear-in-angle point evaluation.
    pub fn interp(&self, x: Vector<S>, angle: S) -> S {
        let (base, wx, wy) = self.grid.spatial.stencil(x);
        let (j0, wa) = self.grid.angle_stencil(angle);
        let j1 = (j0 + 1) % self.grid.n_theta;
        let nx = self.grid.spatial.nx;
        let one = S::one();
        let spatial = |j: usize| {
            let v = |s: usize| self.values[self.grid.index(s, j)];
            (one - wy) * ((one - wx) * v(base) + wx * v(base + 1))
                + wy * ((one - wx) * v(base + nx) + wx * v(base + nx + 1))
        };
        (one - wa) * spatial(j0) + wa * spatial(j1)
    }

    /// Weighted phase-space L2 norm: weights `cell_area * p(x)^(n-1) * d_angle`.
    /// `speed_per_node` holds `p(x)` per spatial node (zero to skip a node).
    pub fn l2_norm(&self, speed_per_node: &[S]) -> S {
        let a = self.grid.spatial.cell_area() * self.grid.d_angle();
        let mut total = S::zero();
        for (s, &p) in speed_per_node.iter().enumerate() {
            if p <= S::zero() {
                continue;
            }
            let mut node = S::zero();
            for j in 0..self.grid.n_theta {
                let v = self.at(s, j);
                node = node + v * v;
            }
            total = total + node * p;
        }
        (total * a).sqrt()
    }

    pub fn axpy(&mut self, alpha: S, other: &PhaseFunction<S>) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: S) {
        for a in self.values.iter_mut() {
            *a = *a * alpha;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_reproduces_linear_functions() {
        let grid = SpatialGrid::new([-1.0, -1.0], [1.0, 1.0], 17, 17);
        let img = GridImage::from_fn(grid, |x| 2.0 * x[0] - 0.5 * x[1] + 0.25);
        for &p in &[[0.13f64, -0.71], [0.99, 0.99], [-1.0, -1.0], [0.0, 0.5]] {
            let exact = 2.0 * p[0] - 0.5 * p[1] + 0.25;
            assert!((img.interp(p) - exact).abs() < 1e-14);
        }
    }

    #[test]
    fn angle_stencil_wraps() {
        let grid = PhaseGrid::new(SpatialGrid::new([0.0, 0.0], [1.0, 1.0], 2, 2), 8).unwrap();
        let (j, w) = grid.angle_stencil(-0.1);
        assert_eq!(j, 7);
        assert!(w > 0.0 && w < 1.0);
        let (j, w) = grid.angle_stencil(2.0 * std::f64::consts::PI - 1e-12);
        assert_eq!(j, 7);
        assert!(w > 0.99);
    }

    #[test]
    fn phase_grid_rejects_odd_counts() {
        let sg = SpatialGrid::<f64>::new([0.0, 0.0], [1.0, 1.0], 4, 4);
        assert!(PhaseGrid::new(sg, 7).is_err());
        assert!(PhaseGrid::new(sg, 2).is_err());
        assert!(PhaseGrid::new(sg, 8).is_ok());
    }

    #[test]
    fn mask_zeroes_outside() {
        let dom = Domain::<f64>::unit_disc();
        let grid = SpatialGrid::new([-1.3, -1.3], [1.3, 1.3], 21, 21);
        let mut img = GridImage::from_fn(grid, |_| 1.0);
        img.mask_to(&dom);
        for (i, (_, _, x)) in grid.node_iter().enumerate() {
            if x[0] * x[0] + x[1] * x[1] > 1.0 {
                assert_eq!(img.values[i], 0.0);
            }
        }
    }

    #[test]
    fn h1_norm_of_linear_field() {
        let grid = SpatialGrid::new([0.0, 0.0], [1.0, 1.0], 33, 33);
        let img = GridImage::from_fn(grid, |x| 3.0 * x[0]);
        let mask = vec![true; grid.len()];
        // ||f||^2 = 9 * 1/3 = 3 (approx by nodes), ||grad f||^2 = 9.
        let h1 = img.h1_norm(&mask);
        let expect = (3.0_f64 + 9.0).sqrt();
        assert!((h1 - expect).abs() / expect < 0.05, "h1 = {h1}");
    }
}
