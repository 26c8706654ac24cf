//! Deterministic phantom catalog plus the seeded band-limited ensemble used
//! by the probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::grid::{GridImage, SourceImage, SpatialGrid};
use crate::scalar::{Scalar, Vector};

fn support_frame<S: Scalar>(support: &Domain<S>) -> (Vector<S>, S) {
    let (lo, hi) = support.bounding_box();
    let center = [
        (lo[0] + hi[0]) / S::of(2.0),
        (lo[1] + hi[1]) / S::of(2.0),
    ];
    let scale = ((hi[0] - lo[0]).min(hi[1] - lo[1])) / S::of(2.0);
    (center, scale)
}

/// Smooth off-center Gaussian, the standard reconstruction target.
pub fn gaussian_bump<S: Scalar>(grid: SpatialGrid<S>, support: &Domain<S>) -> SourceImage<S> {
    let (c, r) = support_frame(support);
    let cx = c[0] + S::of(0.2) * r;
    let cy = c[1] - S::of(0.1) * r;
    let w = S::of(0.3) * r;
    let img = GridImage::from_fn(grid, |x| {
        let dx = x[0] - cx;
        let dy = x[1] - cy;
        (-(dx * dx + dy * dy) / (w * w)).exp()
    });
    SourceImage::new(img, support)
}

/// Two C1 bumps of different heights.
pub fn two_discs<S: Scalar>(grid: SpatialGrid<S>, support: &Domain<S>) -> SourceImage<S> {
    let (c, r) = support_frame(support);
    let bump = move |x: Vector<S>, cx: S, cy: S, rad: S| -> S {
        let dx = x[0] - cx;
        let dy = x[1] - cy;
        let u = (dx * dx + dy * dy) / (rad * rad);
        if u < S::one() {
            let t = S::one() - u;
            t * t
        } else {
            S::zero()
        }
    };
    let img = GridImage::from_fn(grid, |x| {
        S::of(0.9) * bump(x, c[0] - S::of(0.35) * r, c[1] + S::of(0.2) * r, S::of(0.3) * r)
            + S::of(0.6) * bump(x, c[0] + S::of(0.3) * r, c[1] - S::of(0.25) * r, S::of(0.35) * r)
    });
    SourceImage::new(img, support)
}

/// Gaussian ridge along a circle.
pub fn smooth_ring<S: Scalar>(grid: SpatialGrid<S>, support: &Domain<S>) -> SourceImage<S> {
    let (c, r) = support_frame(support);
    let r0 = S::of(0.55) * r;
    let w = S::of(0.15) * r;
    let img = GridImage::from_fn(grid, |x| {
        let dx = x[0] - c[0];
        let dy = x[1] - c[1];
        let rad = (dx * dx + dy * dy).sqrt();
        let d = rad - r0;
        (-(d * d) / (w * w)).exp()
    });
    SourceImage::new(img, support)
}

/// Single-node indicator at grid index `(i, j)`.
pub fn one_hot<S: Scalar>(
    grid: SpatialGrid<S>,
    support: &Domain<S>,
    i: usize,
    j: usize,
) -> Result<SourceImage<S>> {
    if i >= grid.nx || j >= grid.ny {
        return Err(Error::InvalidArgument(format!(
            "one-hot index ({i}, {j}) outside {}x{} grid",
            grid.nx, grid.ny
        )));
    }
    let mut img = GridImage::zeros(grid);
    img.values[grid.index(i, j)] = S::one();
    Ok(SourceImage::new(img, support))
}

/// Parse a catalog name: `gaussian-bump`, `two-discs`, `smooth-ring`, or
/// `one-hot(i,j)`.
pub fn by_name<S: Scalar>(
    name: &str,
    grid: SpatialGrid<S>,
    support: &Domain<S>,
) -> Result<SourceImage<S>> {
    match name {
        "gaussian-bump" => Ok(gaussian_bump(grid, support)),
        "two-discs" => Ok(two_discs(grid, support)),
        "smooth-ring" => Ok(smooth_ring(grid, support)),
        _ => {
            if let Some(rest) = name
                .strip_prefix("one-hot(")
                .and_then(|r| r.strip_suffix(')'))
            {
                let mut parts = rest.split(',');
                let i = parts
                    .next()
                    .and_then(|s| s.trim().parse::<usize>().ok());
                let j = parts
                    .next()
                    .and_then(|s| s.trim().parse::<usize>().ok());
                if let (Some(i), Some(j), None) = (i, j, parts.next()) {
                    return one_hot(grid, support, i, j);
                }
            }
            Err(Error::InvalidArgument(format!(
                "unknown phantom '{name}' (expected gaussian-bump, two-discs, smooth-ring, or one-hot(i,j))"
            )))
        }
    }
}

/// Seeded ensemble of smooth band-limited phantoms supported in `support`:
/// low-order Fourier modes under a C1 cutoff bump.
pub fn band_limited_ensemble<S: Scalar>(
    grid: SpatialGrid<S>,
    support: &Domain<S>,
    count: usize,
    max_mode: usize,
    seed: u64,
) -> Vec<SourceImage<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, r) = support_frame(support);
    (0..count)
        .map(|_| {
            let mut coeffs = Vec::new();
            for kx in 0..=max_mode {
                for ky in 0..=max_mode {
                    coeffs.push((
                        kx as f64,
                        ky as f64,
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                    ));
                }
            }
            let img = GridImage::from_fn(grid, |x| {
                let u = (x[0] - c[0]) / r;
                let v = (x[1] - c[1]) / r;
                let rho2 = u * u + v * v;
                if rho2 >= S::one() {
                    return S::zero();
                }
                let cut = (S::one() - rho2) * (S::one() - rho2);
                let mut acc = S::zero();
                for &(kx, ky, a, b) in &coeffs {
                    let phase_x = S::of(kx) * S::PI() * u;
                    let phase_y = S::of(ky) * S::PI() * v;
                    acc = acc
                        + S::of(a) * phase_x.cos() * phase_y.cos()
                        + S::of(b) * phase_x.sin() * phase_y.sin();
                }
                cut * acc
            });
            SourceImage::new(img, support)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_names_resolve() {
        let omega = Domain::<f64>::unit_disc();
        let grid = SpatialGrid::new([-1.3, -1.3], [1.3, 1.3], 33, 33);
        for name in ["gaussian-bump", "two-discs", "smooth-ring", "one-hot(16,16)"] {
            let p = by_name(name, grid, &omega).unwrap();
            assert!(p.l2_norm() > 0.0, "{name} is empty");
        }
        assert!(by_name("bogus", grid, &omega).is_err());
        assert!(by_name("one-hot(99,0)", grid, &omega).is_err());
    }

    #[test]
    fn phantoms_vanish_outside_support() {
        let omega = Domain::<f64>::unit_disc();
        let grid = SpatialGrid::new([-1.3, -1.3], [1.3, 1.3], 41, 41);
        for p in [
            gaussian_bump(grid, &omega),
            two_discs(grid, &omega),
            smooth_ring(grid, &omega),
        ] {
            for (i, (_, _, x)) in grid.node_iter().enumerate() {
                if !omega.inside(x) {
                    assert_eq!(p.values[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn ensemble_is_deterministic_per_seed() {
        let omega = Domain::<f64>::unit_disc();
        let grid = SpatialGrid::new([-1.0, -1.0], [1.0, 1.0], 17, 17);
        let a = band_limited_ensemble(grid, &omega, 3, 2, 42);
        let b = band_limited_ensemble(grid, &omega, 3, 2, 42);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.values, pb.values);
        }
        let c = band_limited_ensemble(grid, &omega, 3, 2, 43);
        assert_ne!(a[0].values, c[0].values);
    }
}
