//! Channel covariance over a user's reachable region.
//!
//! Within one covariance-coherence frame the user, last seen at `center` with
//! speed `v`, lies during channel interval `q` somewhere in the disc of radius
//! `v·T_q`, assumed uniform. Averaging the per-interval covariances is the same
//! as one weighted pass over the largest disc with the radial density
//! `w(ρ) = (1/N) Σ_q 1{ρ ≤ v T_q} / (π v² T_q²)`; on a finite grid the weights
//! are normalized to probabilities.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::geometry::ArrayConfig;
use crate::linalg::{add_outer_lower, hermitian_deviation, hermitize_from_lower, max_abs, trace_re, CMatrix, HermitianEigen};
use crate::scene::{channel_map, Grid, GridCache, Scene, UserPosition};
use crate::sim::FrameTiming;
use crate::{Error, Result};

const HERMITIAN_TOL: f64 = 1e-12;

/// Hermitian channel covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix(CMatrix);

impl CovMatrix {
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension { expected: m.nrows(), got: m.ncols() });
        }
        if m.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::NonFinite("covariance entry".into()));
        }
        let dev = hermitian_deviation(&m);
        if dev > HERMITIAN_TOL * max_abs(&m).max(1.0) {
            return Err(Error::NotHermitian(dev));
        }
        Ok(CovMatrix(m))
    }

    pub(crate) fn from_lower(mut m: CMatrix) -> Self {
        hermitize_from_lower(&mut m);
        CovMatrix(m)
    }

    pub fn zeros(n: usize) -> Self {
        CovMatrix(CMatrix::zeros(n, n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        CovMatrix(CMatrix::from_diagonal_element(n, n, Complex64::new(s, 0.0)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        trace_re(&self.0)
    }

    pub fn scaled(&self, s: f64) -> CovMatrix {
        CovMatrix(&self.0 * Complex64::new(s, 0.0))
    }

    pub fn eigen(&self) -> HermitianEigen {
        HermitianEigen::new(&self.0)
    }
}

/// Real packing of a Hermitian matrix: column-major `vec(O)` with real parts
/// on and below the diagonal and imaginary parts strictly above it.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedCov(pub Vec<f64>);

pub fn pack_cov(r: &CovMatrix) -> PackedCov {
    let n = r.dim();
    let m = r.matrix();
    let mut out = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            out[i + j * n] = if i >= j { m[(i, j)].re } else { m[(i, j)].im };
        }
    }
    PackedCov(out)
}

pub fn unpack_cov(v: &PackedCov) -> Result<CovMatrix> {
    let len = v.0.len();
    let n = (len as f64).sqrt().round() as usize;
    if n * n != len || n == 0 {
        return Err(Error::Dimension { expected: n.max(1) * n.max(1), got: len });
    }
    if v.0.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("packed covariance".into()));
    }
    let o = |i: usize, j: usize| v.0[i + j * n];
    let mut m = CMatrix::zeros(n, n);
    for j in 0..n {
        m[(j, j)] = Complex64::new(o(j, j), 0.0);
        for i in (j + 1)..n {
            // upper entry (j, i) holds Im R_ji = -Im R_ij
            m[(i, j)] = Complex64::new(o(i, j), -o(j, i));
        }
    }
    Ok(CovMatrix::from_lower(m))
}

/// Replaces negative eigenvalues by the smallest nonnegative one (zero when
/// none exists). Eigenvalues below `1e-12·|tr R|/N` in magnitude count as zero.
pub fn psd_repair(r: &CovMatrix) -> CovMatrix {
    let n = r.dim();
    if n == 0 {
        return r.clone();
    }
    let eig = r.eigen();
    let tol = 1e-12 * r.trace().abs() / n as f64;
    let cleaned: Vec<f64> = eig.values.iter().map(|&l| if l.abs() < tol { 0.0 } else { l }).collect();
    if cleaned.iter().all(|&l| l >= 0.0) {
        return r.clone();
    }
    let floor = cleaned.iter().copied().filter(|&l| l >= 0.0).fold(f64::INFINITY, f64::min);
    let floor = if floor.is_finite() { floor } else { 0.0 };
    let repaired: Vec<f64> = cleaned.iter().map(|&l| if l < 0.0 { floor } else { l }).collect();
    CovMatrix(eig.reconstruct(&repaired))
}

/// Scales labels so their mean trace is `N_B`; returns the inverse factor
/// `Σ tr(R_i) / (N_B·S)`.
pub fn label_scale(labels: &[CovMatrix]) -> Result<(Vec<CovMatrix>, f64)> {
    if labels.is_empty() {
        return Err(Error::Empty("label set"));
    }
    let n_b = labels[0].dim();
    let total: f64 = labels.iter().map(CovMatrix::trace).sum();
    if !(total > 0.0) {
        return Err(Error::domain("labels have non-positive total trace"));
    }
    let coefficient = total / (n_b * labels.len()) as f64;
    let scaled = labels.iter().map(|r| r.scaled(1.0 / coefficient)).collect();
    Ok((scaled, coefficient))
}

/// The user's reachable region over one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionSpec {
    pub center: UserPosition,
    pub speed: f64,
    pub timing: FrameTiming,
}

impl RegionSpec {
    pub fn new(center: UserPosition, speed: f64, timing: FrameTiming) -> Result<Self> {
        if !(speed >= 0.0 && speed.is_finite()) {
            return Err(Error::domain(format!("speed {speed} must be nonnegative")));
        }
        Ok(RegionSpec { center, speed, timing })
    }

    pub fn radius(&self) -> f64 {
        self.speed * self.timing.last_offset()
    }
}

/// Radial density `w(ρ)` of the user position over the frame.
pub fn region_weight(rho: f64, spec: &RegionSpec) -> Result<f64> {
    if !(rho >= 0.0) {
        return Err(Error::domain(format!("radius {rho} must be nonnegative")));
    }
    let v = spec.speed;
    let n = spec.timing.n_cct as f64;
    Ok(spec
        .timing
        .offsets()
        .filter(|&t| rho <= v * t)
        .map(|t| 1.0 / (PI * v * v * t * t))
        .sum::<f64>()
        / n)
}

/// Grid indices inside the region with their normalized probabilities.
fn region_indices(grid: &Grid, spec: &RegionSpec) -> Result<Vec<(usize, f64)>> {
    let idx = grid.indices_within(spec.center, spec.radius());
    weigh(idx.into_iter().map(|k| (k, grid.position(k))), spec)
}

fn weigh<T>(points: impl Iterator<Item = (T, UserPosition)>, spec: &RegionSpec) -> Result<Vec<(T, f64)>> {
    let radius = spec.radius();
    let mut out = Vec::new();
    for (tag, p) in points {
        let rho = p.distance(&spec.center);
        if rho > radius {
            continue;
        }
        // A stationary user occupies a single point; weigh coincident points equally.
        let w = if spec.speed == 0.0 { 1.0 } else { region_weight(rho, spec)? };
        out.push((tag, w));
    }
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    if out.is_empty() || !(total > 0.0) {
        return Err(Error::EmptyRegion { radius });
    }
    for (_, w) in out.iter_mut() {
        *w /= total;
    }
    Ok(out)
}

/// Grid points inside the region with their discrete probabilities.
pub fn region_points(spec: &RegionSpec, grid: &[UserPosition]) -> Result<Vec<(UserPosition, f64)>> {
    if grid.is_empty() {
        return Err(Error::Empty("grid"));
    }
    weigh(grid.iter().map(|&p| (p, p)), spec)
}

/// `Σ_s P{x = x_s} M(x_s) M(x_s)^H` over the grid points inside the region.
pub fn discrete_ccm(cfg: &ArrayConfig, scene: &Scene, spec: &RegionSpec, grid: &[UserPosition]) -> Result<CovMatrix> {
    let n = cfg.n_antennas();
    let mut acc = CMatrix::zeros(n, n);
    for (p, prob) in region_points(spec, grid)? {
        add_outer_lower(&mut acc, channel_map(cfg, scene, p)?.as_vector(), prob);
    }
    Ok(CovMatrix::from_lower(acc))
}

impl GridCache {
    /// [`discrete_ccm`] over the cached lattice.
    pub fn discrete_ccm(&self, spec: &RegionSpec) -> Result<CovMatrix> {
        let mut acc = CMatrix::zeros(self.n_antennas, self.n_antennas);
        for (k, prob) in region_indices(&self.grid, spec)? {
            add_outer_lower(&mut acc, self.channel(k).as_vector(), prob);
        }
        Ok(CovMatrix::from_lower(acc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{outer, CVector};
    use proptest::prelude::*;

    fn two_step_timing() -> FrameTiming {
        FrameTiming { t_co: 3.0, t_c: 1.0, t_o: 1.0, n_cct: 2 }
    }

    fn random_hermitian(vals: &[f64], n: usize) -> CMatrix {
        let mut m = CMatrix::zeros(n, n);
        let mut k = 0;
        for j in 0..n {
            m[(j, j)] = Complex64::new(vals[k], 0.0);
            k += 1;
            for i in (j + 1)..n {
                m[(i, j)] = Complex64::new(vals[k], vals[k + 1]);
                m[(j, i)] = m[(i, j)].conj();
                k += 2;
            }
        }
        m
    }

    #[test]
    fn weight_hand_values() {
        let spec = RegionSpec::new(UserPosition::new(0.0, 0.0), 1.0, two_step_timing()).unwrap();
        assert!((region_weight(1.5, &spec).unwrap() - 1.0 / (8.0 * PI)).abs() < 1e-15);
        assert_eq!(region_weight(2.5, &spec).unwrap(), 0.0);
        let inner = 0.5 * (1.0 / PI + 1.0 / (4.0 * PI));
        assert!((region_weight(0.5, &spec).unwrap() - inner).abs() < 1e-15);
        assert!(region_weight(-1.0, &spec).is_err());
    }

    #[test]
    fn weight_inside_smallest_disc_default_timing() {
        let t = FrameTiming::default();
        let spec = RegionSpec::new(UserPosition::new(5.0, 5.0), 4.0, t).unwrap();
        let want: f64 = t.offsets().map(|tq| 1.0 / (PI * 16.0 * tq * tq)).sum::<f64>() / 50.0;
        let got = region_weight(4.0 * t.offset(1), &spec).unwrap();
        assert!((got - want).abs() < 1e-12 * want);
    }

    #[test]
    fn region_points_normalization() {
        let c = UserPosition::new(3.0, 3.0);
        let spec = RegionSpec::new(c, 2.0, FrameTiming::default()).unwrap();
        let single = region_points(&spec, &[c]).unwrap();
        assert_eq!(single, vec![(c, 1.0)]);
        let pair = region_points(&spec, &[UserPosition::new(3.1, 3.0), UserPosition::new(3.0, 2.9)]).unwrap();
        assert!((pair[0].1 - 0.5).abs() < 1e-15 && (pair[1].1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn region_points_three_radii() {
        let t = FrameTiming::default();
        let c = UserPosition::new(10.0, 10.0);
        let spec = RegionSpec::new(c, 6.0, t).unwrap();
        let r = spec.radius();
        let fr = [0.13, 0.47, 1.2];
        let pts: Vec<_> = fr.iter().map(|f| UserPosition::new(10.0 + f * r, 10.0)).collect();
        let got = region_points(&spec, &pts).unwrap();
        // only the first two lie inside
        assert_eq!(got.len(), 2);
        // direct summation of f_q at each radius
        let w = |rho: f64| t.offsets().filter(|tq| rho <= 6.0 * tq).map(|tq| 1.0 / (PI * 36.0 * tq * tq)).sum::<f64>() / 50.0;
        let (w1, w2) = (w(0.13 * r), w(0.47 * r));
        assert!((got[0].1 - w1 / (w1 + w2)).abs() < 1e-12);
        assert!((got[1].1 - w2 / (w1 + w2)).abs() < 1e-12);
    }

    #[test]
    fn empty_region_is_an_error() {
        let spec = RegionSpec::new(UserPosition::new(0.0, 0.0), 1.0, FrameTiming::default()).unwrap();
        let far = [UserPosition::new(10.0, 10.0)];
        assert!(matches!(region_points(&spec, &far), Err(Error::EmptyRegion { .. })));
        assert!(matches!(region_points(&spec, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn discrete_ccm_small_cases() {
        let cfg = ArrayConfig::default();
        let scene = Scene::default();
        let c = UserPosition::new(12.0, 4.0);
        let spec = RegionSpec::new(c, 3.0, FrameTiming::default()).unwrap();
        let h = channel_map(&cfg, &scene, c).unwrap();
        let one = discrete_ccm(&cfg, &scene, &spec, &[c]).unwrap();
        assert!((one.matrix() - outer(h.as_vector())).iter().all(|z| z.norm() < 1e-18));
        assert!((one.trace() - h.norm_sqr()).abs() < 1e-15);

        let (p1, p2) = (UserPosition::new(12.2, 4.0), UserPosition::new(12.0, 3.8));
        let two = discrete_ccm(&cfg, &scene, &spec, &[p1, p2]).unwrap();
        let h1 = channel_map(&cfg, &scene, p1).unwrap();
        let h2 = channel_map(&cfg, &scene, p2).unwrap();
        let want = (outer(h1.as_vector()) + outer(h2.as_vector())) * Complex64::new(0.5, 0.0);
        assert!((two.matrix() - want).iter().all(|z| z.norm() < 1e-18));
    }

    #[test]
    fn cached_route_matches_direct_route() {
        let cfg = ArrayConfig::default();
        let scene = Scene::default();
        let grid = Grid::square(scene.plane_bounds, 100).unwrap();
        let cache = GridCache::build(&cfg, &scene, grid).unwrap();
        let spec = RegionSpec::new(UserPosition::new(20.0, 5.0), 7.0, FrameTiming::default()).unwrap();
        let a = cache.discrete_ccm(&spec).unwrap();
        let b = discrete_ccm(&cfg, &scene, &spec, &grid.positions()).unwrap();
        let rel = (a.matrix() - b.matrix()).norm() / b.matrix().norm();
        assert!(rel < 1e-12, "rel {rel}");
    }

    #[test]
    fn stationary_user_gives_rank_one() {
        let cfg = ArrayConfig::default();
        let scene = Scene::default();
        let grid = Grid::square(scene.plane_bounds, 50).unwrap();
        let cache = GridCache::build(&cfg, &scene, grid).unwrap();
        let center = grid.position(1234);
        for speed in [0.0, 1e-6] {
            let spec = RegionSpec::new(center, speed, FrameTiming::default()).unwrap();
            let r = cache.discrete_ccm(&spec).unwrap();
            let want = outer(cache.channel(1234).as_vector());
            assert!((r.matrix() - want).norm() < 1e-15);
        }
    }

    #[test]
    fn identity_packs_to_diagonal_ones() {
        let id = CovMatrix::scaled_identity(12, 1.0);
        let p = pack_cov(&id);
        assert_eq!(p.0.len(), 144);
        for j in 0..12 {
            for i in 0..12 {
                assert_eq!(p.0[i + 12 * j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn unpack_rejects_bad_length() {
        assert!(matches!(unpack_cov(&PackedCov(vec![0.0; 143])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut m = CMatrix::identity(3, 3);
        m[(0, 1)] = Complex64::new(0.5, 0.0);
        assert!(matches!(CovMatrix::new(m), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn psd_repair_cases() {
        let n = 3;
        // eigenbasis from a fixed unitary (eigenvectors of a Hermitian matrix)
        let basis = HermitianEigen::new(&random_hermitian(&[1.0, 0.3, -0.2, 0.1, 0.4, 2.0, 0.5, 0.2, 3.0], n));
        let build = |vals: &[f64]| CovMatrix::new(basis.reconstruct(vals)).unwrap();

        let psd = build(&[2.0, 1.0, 0.25]);
        let same = psd_repair(&psd);
        assert!((same.matrix() - psd.matrix()).norm() < 1e-10);

        let fixed = psd_repair(&build(&[2.0, 1e-3, -0.5]));
        let vals = fixed.eigen().values;
        for (got, want) in vals.iter().zip([2.0, 1e-3, 1e-3]) {
            assert!((got - want).abs() < 1e-12, "{vals:?}");
        }

        let neg = psd_repair(&build(&[-0.1, -1.0, -2.0]));
        assert!(neg.matrix().norm() < 1e-14);
    }

    #[test]
    fn label_scale_cases() {
        let r = CovMatrix::scaled_identity(12, 1.0);
        let (s, c) = label_scale(std::slice::from_ref(&r)).unwrap();
        assert_eq!(c, 1.0);
        assert_eq!(s[0], r);

        let r2 = CovMatrix::scaled_identity(12, 2.0);
        let (s, c) = label_scale(&[r2.clone(), r2]).unwrap();
        assert_eq!(c, 2.0);
        assert_eq!(s[0], r);
        assert!(label_scale(&[CovMatrix::zeros(4)]).is_err());
        assert!(label_scale(&[]).is_err());
    }

    proptest! {
        #[test]
        fn pack_round_trip(vals in prop::collection::vec(-5.0..5.0f64, 144)) {
            let r = CovMatrix::new(random_hermitian(&vals, 12)).unwrap();
            prop_assert_eq!(unpack_cov(&pack_cov(&r)).unwrap(), r);
        }

        #[test]
        fn repaired_is_psd_and_keeps_nonnegative_spectrum(vals in prop::collection::vec(-3.0..3.0f64, 16)) {
            let r = CovMatrix::new(random_hermitian(&vals, 4)).unwrap();
            let before = r.eigen();
            let after = psd_repair(&r);
            let e = after.eigen();
            let tol = 1e-10 * (1.0 + r.matrix().norm());
            prop_assert!(e.values.iter().all(|&l| l >= -tol));
            // each eigenvector with a nonnegative eigenvalue is preserved
            for (k, &l) in before.values.iter().enumerate() {
                if l > 1e-8 {
                    let v: CVector = before.vectors.column(k).into();
                    let av = after.matrix() * &v;
                    prop_assert!((av - &v * Complex64::new(l, 0.0)).norm() < tol);
                }
            }
        }

        #[test]
        fn label_scaling_fixes_mean_trace(traces in prop::collection::vec(0.01..10.0f64, 1..20)) {
            let labels: Vec<_> = traces.iter().map(|t| CovMatrix::scaled_identity(12, t / 12.0)).collect();
            let (scaled, c) = label_scale(&labels).unwrap();
            let mean = scaled.iter().map(CovMatrix::trace).sum::<f64>() / scaled.len() as f64;
            prop_assert!((mean - 12.0).abs() < 1e-9);
            prop_assert!((c - traces.iter().sum::<f64>() / (12.0 * traces.len() as f64)).abs() < 1e-12);
        }
    }
}
