//! Intimate-mixture simulation.
//!
//! Reflectance is mapped to single-scattering albedo (SSA) through the
//! diffusive-reflectance relation `r = (1 - g) / (1 + g)`, `g = sqrt(1 - w)`.
//! Intimate mixing is linear in SSA, so a mixed spectrum is obtained per band
//! by converting each endmember to SSA, taking the abundance-weighted sum and
//! converting back. Abundances weight SSA directly (equal relative geometric
//! cross-sections).
//!
//! Because the reflectance-to-SSA map is concave, the mixed reflectance never
//! exceeds the linear blend of the endmember reflectances. Uniform samples on
//! the abundance simplex therefore crowd together near dark endmembers.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{EndmemberRow, SpectralDataset};
use crate::error::{Error, Result};

/// Tolerance on abundance sums accepted by [`mix_intimate`].
pub const ABUNDANCE_SUM_TOL: f64 = 1e-9;

/// Converts a diffuse reflectance in `[0, 1)` to single-scattering albedo.
pub fn reflectance_to_ssa(r: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Domain {
            what: "reflectance",
            value: r,
            domain: "[0, 1)",
        });
    }
    let g = (1.0 - r) / (1.0 + r);
    Ok(1.0 - g * g)
}

/// Inverse of [`reflectance_to_ssa`].
pub fn ssa_to_reflectance(w: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&w) {
        return Err(Error::Domain {
            what: "single-scattering albedo",
            value: w,
            domain: "[0, 1)",
        });
    }
    let g = (1.0 - w).sqrt();
    Ok((1.0 - g) / (1.0 + g))
}

fn check_abundance(abundance: &[f64]) -> Result<()> {
    if abundance.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::input(format!(
            "abundance has a negative or non-finite entry: {abundance:?}"
        )));
    }
    let sum: f64 = abundance.iter().sum();
    if (sum - 1.0).abs() > ABUNDANCE_SUM_TOL {
        return Err(Error::input(format!(
            "abundance sums to {sum}, expected 1 within {ABUNDANCE_SUM_TOL:e}"
        )));
    }
    Ok(())
}

/// Mixes the columns of `endmembers` (D x m reflectances) intimately.
///
/// Bands where every endmember with nonzero abundance has the same
/// reflectance are copied through unchanged, so simplex vertices reproduce
/// the endmember columns bit for bit.
pub fn mix_intimate(endmembers: &DMatrix<f64>, abundance: &[f64]) -> Result<DVector<f64>> {
    let (bands, m) = endmembers.shape();
    if abundance.len() != m {
        return Err(Error::dim(format!(
            "abundance has {} entries for {m} endmembers",
            abundance.len()
        )));
    }
    check_abundance(abundance)?;
    let active: Vec<usize> = (0..m).filter(|&j| abundance[j] > 0.0).collect();

    let mut out = DVector::zeros(bands);
    for b in 0..bands {
        let first = endmembers[(b, active[0])];
        if active.iter().all(|&j| endmembers[(b, j)] == first) {
            out[b] = first;
            continue;
        }
        let mut w = 0.0;
        for &j in &active {
            w += abundance[j] * reflectance_to_ssa(endmembers[(b, j)])?;
        }
        out[b] = ssa_to_reflectance(w)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Dirichlet(1, ..., 1) draws via normalized exponential spacings.
    UniformRandom,
    /// Lattice points `i / resolution` summing to one.
    RegularGrid,
}

/// Number of lattice points of the regular simplex grid.
pub fn grid_point_count(n_e: usize, resolution: usize) -> usize {
    // C(resolution + n_e - 1, n_e - 1)
    let mut c: u128 = 1;
    for i in 0..(n_e as u128 - 1) {
        c = c * (resolution as u128 + 1 + i) / (i + 1);
    }
    c as usize
}

fn grid_rows(n_e: usize, resolution: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, slots: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for v in (0..=left).rev() {
            prefix.push(v);
            rec(left - v, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(resolution, n_e, &mut Vec::with_capacity(n_e), &mut out);
    out
}

fn dirichlet_row<R: Rng>(n_e: usize, rng: &mut R) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n_e).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= sum);
    row
}

/// Samples `n` rows on the `n_e`-simplex.
///
/// In grid mode `n` must equal the lattice size for `resolution`
/// (66 for three endmembers at resolution 10).
pub fn sample_simplex(
    n_e: usize,
    n: usize,
    mode: SamplingMode,
    resolution: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if n_e < 2 {
        return Err(Error::input(format!("simplex needs at least 2 vertices, got {n_e}")));
    }
    match mode {
        SamplingMode::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = DMatrix::zeros(n, n_e);
            for i in 0..n {
                for (j, v) in dirichlet_row(n_e, &mut rng).into_iter().enumerate() {
                    out[(i, j)] = v;
                }
            }
            Ok(out)
        }
        SamplingMode::RegularGrid => {
            if resolution == 0 {
                return Err(Error::input("grid resolution must be at least 1"));
            }
            let expected = grid_point_count(n_e, resolution);
            if n != expected {
                return Err(Error::input(format!(
                    "grid with {n_e} vertices at resolution {resolution} has {expected} points, requested {n}"
                )));
            }
            let rows = grid_rows(n_e, resolution);
            let r = resolution as f64;
            Ok(DMatrix::from_fn(n, n_e, |i, j| rows[i][j] as f64 / r))
        }
    }
}

/// Endmember spectra stored column-wise (D bands x m endmembers).
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberSet {
    pub spectra: DMatrix<f64>,
    pub names: Vec<String>,
    /// Mean reflectance of each endmember.
    pub brightness: Vec<f64>,
}

impl EndmemberSet {
    pub fn new(spectra: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let brightness = spectra.column_iter().map(|c| c.mean()).collect();
        let set = EndmemberSet {
            spectra,
            names,
            brightness,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn bands(&self) -> usize {
        self.spectra.nrows()
    }

    pub fn count(&self) -> usize {
        self.spectra.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.count();
        if self.names.len() != m || self.brightness.len() != m {
            return Err(Error::dim(format!(
                "{m} spectra but {} names and {} brightness values",
                self.names.len(),
                self.brightness.len()
            )));
        }
        if let Some(v) = self.spectra.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::input(format!(
                "endmember reflectance {v} is outside (0, 1)"
            )));
        }
        for a in 0..m {
            for b in (a + 1)..m {
                if (self.spectra.column(a) - self.spectra.column(b)).norm() <= 0.0 {
                    return Err(Error::input(format!(
                        "endmembers {} and {} are identical",
                        self.names[a], self.names[b]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Index of the endmember with the lowest mean reflectance.
    pub fn darkest(&self) -> usize {
        argext(&self.brightness, |a, b| a < b)
    }

    pub fn brightest(&self) -> usize {
        argext(&self.brightness, |a, b| a > b)
    }
}

fn argext(v: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if better(x, v[best]) {
            best = i;
        }
    }
    best
}

/// Smooth synthetic reflectance spectra: a sloped continuum with a few
/// Gaussian absorption bands, rescaled so the mean reflectances are spread
/// evenly over `[0.1, 0.8]` (endmember 0 darkest).
pub fn synthetic_endmembers(bands: usize, m: usize, seed: u64) -> Result<EndmemberSet> {
    if bands < 2 || m < 2 {
        return Err(Error::input(format!(
            "need at least 2 bands and 2 endmembers, got {bands} and {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectra = DMatrix::zeros(bands, m);
    for j in 0..m {
        let level = 0.1 + 0.7 * j as f64 / (m - 1) as f64;
        let slope = rng.random_range(-0.3..0.3);
        let n_bumps = rng.random_range(2..=4);
        let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
            .map(|_| {
                (
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.03..0.12),
                    rng.random_range(0.05..0.2),
                )
            })
            .collect();
        let shape: Vec<f64> = (0..bands)
            .map(|b| {
                let t = b as f64 / (bands - 1) as f64;
                let dips: f64 = bumps
                    .iter()
                    .map(|(c, w, d)| d * (-(t - c) * (t - c) / (2.0 * w * w)).exp())
                    .sum();
                1.0 + slope * (t - 0.5) - dips
            })
            .collect();
        let mean = shape.iter().sum::<f64>() / bands as f64;
        for (b, s) in shape.iter().enumerate() {
            spectra[(b, j)] = (level * s / mean).clamp(0.005, 0.995);
        }
    }
    let names = (0..m).map(|j| format!("em{j}")).collect();
    EndmemberSet::new(spectra, names)
}

/// Simulation parameters for a set of intimate mixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    /// Endmember indices of each mixture; mixtures may share endmembers.
    pub endmember_indices: Vec<Vec<usize>>,
    /// Rows per mixture, counting the pure-endmember rows first emitted by
    /// that mixture.
    pub samples_per_mixture: usize,
    pub sampling: SamplingMode,
    pub grid_resolution: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl MixtureConfig {
    /// Two ternary mixtures sharing the two middle endmembers 1 and 2, with
    /// endmember 0 only in the first and endmember 3 only in the second.
    pub fn two_ternary(samples_per_mixture: usize, seed: u64) -> Self {
        MixtureConfig {
            endmember_indices: vec![vec![1, 2, 0], vec![1, 2, 3]],
            samples_per_mixture,
            sampling: SamplingMode::UniformRandom,
            grid_resolution: 10,
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self, n_endmembers: usize) -> Result<()> {
        if self.endmember_indices.is_empty() {
            return Err(Error::input("endmember_indices: at least one mixture is required"));
        }
        for (c, idx) in self.endmember_indices.iter().enumerate() {
            if idx.len() < 2 {
                return Err(Error::input(format!(
                    "endmember_indices: mixture {c} has fewer than 2 endmembers"
                )));
            }
            if let Some(bad) = idx.iter().find(|&&j| j >= n_endmembers) {
                return Err(Error::input(format!(
                    "endmember_indices: mixture {c} references endmember {bad}, only {n_endmembers} exist"
                )));
            }
            let uniq: HashSet<_> = idx.iter().collect();
            if uniq.len() != idx.len() {
                return Err(Error::input(format!(
                    "endmember_indices: mixture {c} repeats an endmember"
                )));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::input(format!(
                "noise_sigma: must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        match self.sampling {
            SamplingMode::UniformRandom => {
                let widest = self.endmember_indices.iter().map(Vec::len).max().unwrap_or(0);
                if self.samples_per_mixture < widest {
                    return Err(Error::input(format!(
                        "samples_per_mixture: {} cannot hold the {widest} pure endmember rows",
                        self.samples_per_mixture
                    )));
                }
            }
            SamplingMode::RegularGrid => {
                if self.grid_resolution == 0 {
                    return Err(Error::input("grid_resolution: must be at least 1"));
                }
                for (c, idx) in self.endmember_indices.iter().enumerate() {
                    let count = grid_point_count(idx.len(), self.grid_resolution);
                    if count != self.samples_per_mixture {
                        return Err(Error::input(format!(
                            "samples_per_mixture: mixture {c} grid at resolution {} has {count} points, configured {}",
                            self.grid_resolution, self.samples_per_mixture
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ (stream + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Simulates a dataset of intimate mixtures lying on several mixture manifolds.
///
/// Each unique pure-endmember spectrum appears once, in the first mixture
/// that contains it, and its row is recorded in `endmember_rows`. Grid
/// points repeated across mixtures (shared faces) are likewise kept once.
pub fn generate_mixture_dataset(
    endmembers: &EndmemberSet,
    config: &MixtureConfig,
) -> Result<SpectralDataset> {
    endmembers.validate()?;
    config.validate(endmembers.count())?;
    let m = endmembers.count();

    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut spectra: Vec<DVector<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut abundance_rows: Vec<Vec<f64>> = Vec::new();
    let mut endmember_rows = Vec::new();

    for (c, idx) in config.endmember_indices.iter().enumerate() {
        let local = endmembers.spectra.select_columns(idx.iter());
        let n_e = idx.len();
        let local_rows: Vec<Vec<f64>> = match config.sampling {
            SamplingMode::UniformRandom => {
                let mut rows: Vec<Vec<f64>> = (0..n_e)
                    .map(|v| (0..n_e).map(|j| if j == v { 1.0 } else { 0.0 }).collect())
                    .collect();
                let fresh_vertices = idx
                    .iter()
                    .filter(|&&e| !endmember_rows.iter().any(|r: &EndmemberRow| r.endmember == e))
                    .count();
                let draws = config.samples_per_mixture - fresh_vertices;
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, c as u64));
                rows.extend((0..draws).map(|_| dirichlet_row(n_e, &mut rng)));
                rows
            }
            SamplingMode::RegularGrid => {
                let r = config.grid_resolution as f64;
                grid_rows(n_e, config.grid_resolution)
                    .into_iter()
                    .map(|row| row.into_iter().map(|v| v as f64 / r).collect())
                    .collect()
            }
        };

        for local_ab in local_rows {
            let mut global = vec![0.0; m];
            for (t, &e) in idx.iter().enumerate() {
                global[e] = local_ab[t];
            }
            let key: Vec<u64> = global.iter().map(|v| v.to_bits()).collect();
            if !seen.insert(key) {
                continue;
            }
            let row = spectra.len();
            if let Some(t) = local_ab.iter().position(|&a| a == 1.0) {
                endmember_rows.push(EndmemberRow {
                    endmember: idx[t],
                    row,
                });
            }
            spectra.push(mix_intimate(&local, &local_ab)?);
            labels.push(c);
            abundance_rows.push(global);
        }
    }

    let n = spectra.len();
    let bands = endmembers.bands();
    let mut x = DMatrix::from_fn(n, bands, |i, b| spectra[i][b]);
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma)
            .map_err(|e| Error::input(format!("noise_sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, u64::MAX - 1));
        for i in 0..n {
            for b in 0..bands {
                x[(i, b)] += normal.sample(&mut rng);
            }
        }
    }
    let abundances = DMatrix::from_fn(n, m, |i, j| abundance_rows[i][j]);

    Ok(SpectralDataset {
        x,
        labels: Some(labels),
        abundances: Some(abundances),
        endmember_rows,
        mixtures: config.endmember_indices.clone(),
        config: Some(config.clone()),
        seed: Some(config.seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ssa_closed_forms() {
        assert_eq!(reflectance_to_ssa(0.0).unwrap(), 0.0);
        assert_relative_eq!(reflectance_to_ssa(0.5).unwrap(), 8.0 / 9.0, epsilon = 1e-15);
        assert_eq!(ssa_to_reflectance(0.0).unwrap(), 0.0);
        assert_relative_eq!(ssa_to_reflectance(8.0 / 9.0).unwrap(), 0.5, epsilon = 1e-15);
        assert!(reflectance_to_ssa(1.0 - 1e-12).unwrap() > 1.0 - 1e-6);
    }

    #[test]
    fn ssa_domain_errors() {
        for r in [-0.1, 1.0, 1.5, f64::NAN] {
            assert!(matches!(reflectance_to_ssa(r), Err(Error::Domain { .. })));
            assert!(matches!(ssa_to_reflectance(r), Err(Error::Domain { .. })));
        }
    }

    #[test]
    fn round_trip_dense_grid() {
        for i in 0..=9990 {
            let r = i as f64 * 1e-4;
            let back = ssa_to_reflectance(reflectance_to_ssa(r).unwrap()).unwrap();
            assert!((back - r).abs() < 1e-12, "r={r} back={back}");
        }
    }

    #[test]
    fn two_band_mix_darkens() {
        let e = DMatrix::from_row_slice(1, 2, &[0.2, 0.8]);
        let got = mix_intimate(&e, &[0.5, 0.5]).unwrap()[0];
        // w(0.2) = 5/9, w(0.8) = 80/81, mean 125/162
        let g = (1.0f64 - 125.0 / 162.0).sqrt();
        let expected = (1.0 - g) / (1.0 + g);
        assert_relative_eq!(got, expected, epsilon = 1e-14);
        assert!(got < 0.5);
    }

    #[test]
    fn vertices_and_identical_endmembers() {
        let e = DMatrix::from_row_slice(3, 3, &[0.1, 0.5, 0.9, 0.2, 0.3, 0.4, 0.7, 0.6, 0.05]);
        for v in 0..3 {
            let mut a = [0.0; 3];
            a[v] = 1.0;
            assert_eq!(mix_intimate(&e, &a).unwrap(), e.column(v).into_owned());
        }
        let col = DVector::from_vec(vec![0.3, 0.6, 0.12]);
        let same = DMatrix::from_columns(&[col.clone(), col.clone(), col.clone()]);
        assert_eq!(mix_intimate(&same, &[0.2, 0.5, 0.3]).unwrap(), col);
    }

    #[test]
    fn mix_rejects_bad_abundance() {
        let e = DMatrix::from_row_slice(1, 2, &[0.2, 0.8]);
        assert!(mix_intimate(&e, &[-0.1, 1.1]).is_err());
        assert!(mix_intimate(&e, &[0.5, 0.6]).is_err());
        assert!(mix_intimate(&e, &[1.0]).is_err());
    }

    #[test]
    fn grid_counts() {
        let g = sample_simplex(3, 66, SamplingMode::RegularGrid, 10, 0).unwrap();
        assert_eq!(g.nrows(), 66);
        for row in g.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let g2 = sample_simplex(2, 2, SamplingMode::RegularGrid, 1, 0).unwrap();
        assert_eq!(g2, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        assert!(sample_simplex(3, 65, SamplingMode::RegularGrid, 10, 0).is_err());
        assert!(sample_simplex(1, 5, SamplingMode::UniformRandom, 0, 0).is_err());
    }

    #[test]
    fn dirichlet_mean() {
        let s = sample_simplex(3, 100_000, SamplingMode::UniformRandom, 0, 11).unwrap();
        for j in 0..3 {
            let mean = s.column(j).mean();
            assert!((mean - 1.0 / 3.0).abs() < 0.01, "mean {mean}");
        }
    }

    #[test]
    fn synthetic_endmember_guarantees() {
        let a = synthetic_endmembers(40, 2, 3).unwrap();
        assert!((a.brightness[1] - a.brightness[0]).abs() >= 0.3);
        assert_eq!(a, synthetic_endmembers(40, 2, 3).unwrap());
        for seed in 0..20 {
            synthetic_endmembers(25, 5, seed).unwrap().validate().unwrap();
        }
        assert_eq!(a.darkest(), 0);
        assert_eq!(a.brightest(), 1);
    }

    #[test]
    fn two_ternary_counts() {
        let em = synthetic_endmembers(30, 4, 1).unwrap();
        let ds = generate_mixture_dataset(&em, &MixtureConfig::two_ternary(1003, 5)).unwrap();
        assert_eq!(ds.len(), 2006);
        let labels = ds.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 1003);
        assert_eq!(ds.endmember_rows.len(), 4);
        for r in &ds.endmember_rows {
            assert_eq!(ds.x.row(r.row).transpose(), em.spectra.column(r.endmember));
        }
    }

    #[test]
    fn grid_mode_dedups_shared_face() {
        let em = synthetic_endmembers(10, 4, 1).unwrap();
        let mut cfg = MixtureConfig::two_ternary(66, 5);
        cfg.sampling = SamplingMode::RegularGrid;
        let ds = generate_mixture_dataset(&em, &cfg).unwrap();
        // the 11 lattice points on the shared edge are emitted once
        assert_eq!(ds.len(), 66 + 55);
        cfg.samples_per_mixture = 60;
        assert!(generate_mixture_dataset(&em, &cfg).is_err());
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = [
            MixtureConfig {
                endmember_indices: vec![vec![0]],
                ..MixtureConfig::two_ternary(10, 0)
            },
            MixtureConfig {
                noise_sigma: -1.0,
                ..MixtureConfig::two_ternary(10, 0)
            },
            MixtureConfig {
                endmember_indices: vec![vec![0, 9]],
                ..MixtureConfig::two_ternary(10, 0)
            },
        ];
        let fields = ["endmember_indices", "noise_sigma", "endmember_indices"];
        for (cfg, field) in bad.iter().zip(fields) {
            let msg = cfg.validate(4).unwrap_err().to_string();
            assert!(msg.contains(field), "{msg}");
        }
    }
}
