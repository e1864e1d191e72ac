//! Sobol low-discrepancy points, training-set construction from the
//! dataset at the configured fractions, and per-iteration mini-batches.

use std::collections::HashSet;
use std::io::{self, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::FsiDataset;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("requested {0} points; count must be positive")]
    NonPositiveCount(i64),
    #[error("dimension {0} unsupported (up to {MAX_DIM})")]
    DimensionTooLarge(usize),
    #[error("sampling fraction for the {domain} domain yields zero points (fraction {fraction})")]
    EmptyDomain { domain: &'static str, fraction: f64 },
    #[error("could not collect {want} distinct fluid records after {attempts} Sobol draws")]
    Exhausted { want: usize, attempts: usize },
}

pub const MAX_DIM: usize = 8;

/// Primitive-polynomial degrees `s`, coefficients `a`, and initial
/// direction numbers `m` for dimensions 2..=8 (dimension 1 is the van der
/// Corput sequence). Joe-Kuo "new-joe-kuo-6" table entries.
const JOE_KUO: [(u32, &[u32]); 7] = [
    (0, &[1]),
    (1, &[1, 3]),
    (1, &[1, 3, 1]),
    (2, &[1, 1, 1]),
    (1, &[1, 1, 3, 3]),
    (4, &[1, 3, 5, 13]),
    (2, &[1, 1, 5, 5, 17]),
];

const INDEX_BITS: usize = 32;

fn direction_numbers(dim: usize) -> Vec<u32> {
    // v[k] holds the direction number for bit k, scaled to 32 fractional bits.
    let mut v = vec![0u32; INDEX_BITS];
    if dim == 0 {
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = 1u32 << (31 - k);
        }
        return v;
    }
    let (a, m) = JOE_KUO[dim - 1];
    let s = m.len();
    for k in 0..s.min(INDEX_BITS) {
        v[k] = m[k] << (31 - k);
    }
    for k in s..INDEX_BITS {
        let mut val = v[k - s] ^ (v[k - s] >> s);
        for t in 0..s - 1 {
            if (a >> t) & 1 == 1 {
                val ^= v[k - 1 - t];
            }
        }
        v[k] = val;
    }
    v
}

/// Standard Sobol sequence point (zero-indexed); `point(0)` is the origin.
pub struct SobolSequence {
    dirs: Vec<Vec<u32>>,
}

impl SobolSequence {
    pub fn new(dim: usize) -> Result<Self, SamplingError> {
        if dim == 0 || dim > MAX_DIM {
            return Err(SamplingError::DimensionTooLarge(dim));
        }
        Ok(SobolSequence {
            dirs: (0..dim).map(direction_numbers).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dirs.len()
    }

    /// The `index`-th point in the usual Gray-code enumeration order
    /// (so random access agrees with the incremental generator): XOR the
    /// direction numbers over the set bits of gray(index).
    pub fn point(&self, index: u32, out: &mut [f64]) {
        let gray = index ^ (index >> 1);
        for (d, dirs) in self.dirs.iter().enumerate() {
            let mut x = 0u32;
            let mut bits = gray;
            let mut k = 0;
            while bits != 0 {
                if bits & 1 == 1 {
                    x ^= dirs[k];
                }
                bits >>= 1;
                k += 1;
            }
            out[d] = x as f64 / 4294967296.0;
        }
    }
}

/// `n` Sobol points in [0,1)^dim. With `skip_origin` (the default in every
/// pipeline config) enumeration starts at index 1 so the all-zeros point
/// is left out.
pub fn sobol_points(n: i64, dim: usize, skip_origin: bool) -> Result<Vec<Vec<f64>>, SamplingError> {
    if n <= 0 {
        return Err(SamplingError::NonPositiveCount(n));
    }
    let seq = SobolSequence::new(dim)?;
    let start = u32::from(skip_origin);
    let mut out = Vec::with_capacity(n as usize);
    let mut buf = vec![0.0; dim];
    for i in 0..n as u32 {
        seq.point(start + i, &mut buf);
        out.push(buf.clone());
    }
    Ok(out)
}

/// A space-time point (t, x, y).
pub type PointTxy = [f64; 3];

/// One supervised interface sample pulled from the marker table.
#[derive(Clone, Copy, Debug)]
pub struct InterfaceSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub u: f64,
    pub v: f64,
    pub p: f64,
    pub nx: f64,
    pub ny: f64,
}

#[derive(Clone, Debug)]
pub struct Provenance {
    pub seed: u64,
    pub fluid_fraction: f64,
    pub interface_fraction: f64,
    pub wall_points: usize,
    pub initial_points: usize,
    pub sobol_skip_origin: bool,
    pub dataset_checksum: u64,
}

/// Point collections the losses draw from.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    /// Interior fluid collocation points (snapped to dataset records).
    pub collocation_fluid: Vec<PointTxy>,
    /// Lid points (y = 1).
    pub boundary_top: Vec<PointTxy>,
    pub boundary_bottom: Vec<PointTxy>,
    pub boundary_left: Vec<PointTxy>,
    pub boundary_right: Vec<PointTxy>,
    /// (0, x, y) points.
    pub initial: Vec<PointTxy>,
    /// Marker samples straight from the dataset.
    pub interface: Vec<InterfaceSample>,
    pub provenance: Provenance,
}

impl TrainingSet {
    /// Bottom, left and right wall points as one collection.
    pub fn gamma0(&self) -> Vec<PointTxy> {
        let mut v = Vec::with_capacity(
            self.boundary_bottom.len() + self.boundary_left.len() + self.boundary_right.len(),
        );
        v.extend_from_slice(&self.boundary_bottom);
        v.extend_from_slice(&self.boundary_left);
        v.extend_from_slice(&self.boundary_right);
        v
    }

    pub fn manifest(&self) -> String {
        let p = &self.provenance;
        format!(
            "FSILAB-TRAINING-SET v1\n\
             seed = {}\n\
             fluid_fraction = {}\n\
             interface_fraction = {}\n\
             wall_points = {}\n\
             initial_points = {}\n\
             sobol_skip_origin = {}\n\
             dataset_checksum = {:016x}\n\
             collocation_fluid = {}\n\
             boundary_top = {}\n\
             boundary_bottom = {}\n\
             boundary_left = {}\n\
             boundary_right = {}\n\
             initial = {}\n\
             interface = {}\n",
            p.seed,
            p.fluid_fraction,
            p.interface_fraction,
            p.wall_points,
            p.initial_points,
            p.sobol_skip_origin,
            p.dataset_checksum,
            self.collocation_fluid.len(),
            self.boundary_top.len(),
            self.boundary_bottom.len(),
            self.boundary_left.len(),
            self.boundary_right.len(),
            self.initial.len(),
            self.interface.len()
        )
    }

    pub fn write_manifest(&self, path: &Path) -> io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.manifest().as_bytes())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SamplingConfig {
    pub fluid_fraction: f64,
    pub interface_fraction: f64,
    pub wall_points: usize,
    pub initial_points: usize,
    pub sobol_skip_origin: bool,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            fluid_fraction: 0.005 / 100.0,
            interface_fraction: 0.05 / 100.0,
            wall_points: 2000,
            initial_points: 2000,
            sobol_skip_origin: true,
            seed: 0,
        }
    }
}

fn round_count(fraction: f64, total: usize) -> usize {
    // Round half away from zero; the manifest records the result.
    (fraction * total as f64).round() as usize
}

/// Build the training set: fluid collocation points from Sobol draws in
/// (t, x, y) snapped to the nearest dataset record outside the disc,
/// interface samples drawn uniformly without replacement from the marker
/// records, and Sobol-placed wall/initial points.
pub fn build_training_set(dataset: &FsiDataset, cfg: &SamplingConfig) -> Result<TrainingSet, SamplingError> {
    let n_eul = dataset.n_eulerian_records();
    let n_mark = dataset.n_marker_records();
    let want_fluid = round_count(cfg.fluid_fraction, n_eul);
    if want_fluid == 0 {
        return Err(SamplingError::EmptyDomain { domain: "fluid", fraction: cfg.fluid_fraction });
    }
    let want_interface = round_count(cfg.interface_fraction, n_mark);
    if want_interface == 0 {
        return Err(SamplingError::EmptyDomain { domain: "interface", fraction: cfg.interface_fraction });
    }

    let n = dataset.n;
    let nt = dataset.n_times();
    let t_end = *dataset.times.last().expect("nonempty dataset");

    let mut collocation = Vec::with_capacity(want_fluid);
    if cfg.fluid_fraction >= 1.0 {
        // Every in-fluid record exactly once.
        for ti in 0..nt {
            for i in 0..n {
                for j in 0..n {
                    if dataset.in_fluid[dataset.eul_idx(ti, i, j)] {
                        collocation.push([dataset.times[ti], dataset.cell_x(i), dataset.cell_y(j)]);
                    }
                }
            }
        }
    } else {
        let seq = SobolSequence::new(3)?;
        let mut seen: HashSet<usize> = HashSet::with_capacity(want_fluid * 2);
        let mut buf = [0.0; 3];
        let mut index: u32 = u32::from(cfg.sobol_skip_origin);
        let max_attempts = 1000 * want_fluid + 100_000;
        let mut attempts = 0;
        while collocation.len() < want_fluid {
            if attempts >= max_attempts {
                return Err(SamplingError::Exhausted { want: want_fluid, attempts });
            }
            seq.point(index, &mut buf);
            index = index.wrapping_add(1);
            attempts += 1;
            // Snap to the nearest record: nearest emitted time, nearest cell center.
            let ti = ((buf[0] * t_end / dataset.meta.config.dt).round() as usize).min(nt - 1);
            let i = ((buf[1] * n as f64).floor() as usize).min(n - 1);
            let j = ((buf[2] * n as f64).floor() as usize).min(n - 1);
            let rec = dataset.eul_idx(ti, i, j);
            if !dataset.in_fluid[rec] || !seen.insert(rec) {
                continue;
            }
            collocation.push([dataset.times[ti], dataset.cell_x(i), dataset.cell_y(j)]);
        }
    }

    // Interface: uniform without replacement over all marker records.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1f2e_3d4c_5b6a);
    let take = want_interface.min(n_mark);
    let picks = rand::seq::index::sample(&mut rng, n_mark, take);
    let m = dataset.n_markers;
    let mut interface: Vec<InterfaceSample> = picks
        .iter()
        .map(|k| {
            let ti = k / m;
            InterfaceSample {
                t: dataset.times[ti],
                x: dataset.mk.x[k],
                y: dataset.mk.y[k],
                u: dataset.mk.u[k],
                v: dataset.mk.v[k],
                p: dataset.mk.p[k],
                nx: dataset.mk.nx[k],
                ny: dataset.mk.ny[k],
            }
        })
        .collect();
    interface.sort_by(|a, b| (a.t, a.x, a.y).partial_cmp(&(b.t, b.x, b.y)).unwrap());

    // Wall and initial points: Sobol in (t, arc coordinate) / (x, y).
    let wall2d = sobol_points(cfg.wall_points.max(1) as i64, 2, cfg.sobol_skip_origin)?;
    let lid = wall2d.iter().map(|p| [p[0] * t_end, p[1], 1.0]).collect();
    let bottom = wall2d.iter().map(|p| [p[0] * t_end, p[1], 0.0]).collect();
    let left = wall2d.iter().map(|p| [p[0] * t_end, 0.0, p[1]]).collect();
    let right = wall2d.iter().map(|p| [p[0] * t_end, 1.0, p[1]]).collect();
    let init2d = sobol_points(cfg.initial_points.max(1) as i64, 2, cfg.sobol_skip_origin)?;
    let initial = init2d.iter().map(|p| [0.0, p[0], p[1]]).collect();

    Ok(TrainingSet {
        collocation_fluid: collocation,
        boundary_top: lid,
        boundary_bottom: bottom,
        boundary_left: left,
        boundary_right: right,
        initial,
        interface,
        provenance: Provenance {
            seed: cfg.seed,
            fluid_fraction: cfg.fluid_fraction,
            interface_fraction: cfg.interface_fraction,
            wall_points: cfg.wall_points,
            initial_points: cfg.initial_points,
            sobol_skip_origin: cfg.sobol_skip_origin,
            dataset_checksum: dataset.checksum(),
        },
    })
}

/// Loss terms that draw their own independent batches each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BatchTerm {
    Collocation,
    Lid,
    Walls,
    Initial,
    InterfaceFit,
    InterfacePressure,
    Coupling,
}

impl BatchTerm {
    fn tag(self) -> u64 {
        match self {
            BatchTerm::Collocation => 1,
            BatchTerm::Lid => 2,
            BatchTerm::Walls => 3,
            BatchTerm::Initial => 4,
            BatchTerm::InterfaceFit => 5,
            BatchTerm::InterfacePressure => 6,
            BatchTerm::Coupling => 7,
        }
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer.
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Uniform-without-replacement indices of size min(batch_size, len) for
/// one (seed, iteration, term); identical arguments give identical batches.
pub fn minibatch(len: usize, batch_size: usize, seed: u64, iteration: u64, term: BatchTerm) -> Vec<usize> {
    let take = batch_size.min(len);
    if take == 0 {
        return Vec::new();
    }
    let stream = mix(seed ^ mix(iteration.wrapping_mul(0x9e3779b97f4a7c15) ^ term.tag()));
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut idx = rand::seq::index::sample(&mut rng, len, take).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{run_simulation, DiscConfig, SolverConfig};

    #[test]
    fn sobol_dim1_prefix() {
        // After the origin: 0.5, 0.75, 0.25 for the van der Corput dimension.
        let pts = sobol_points(3, 1, true).unwrap();
        assert_eq!(pts[0][0], 0.5);
        assert_eq!(pts[1][0], 0.75);
        assert_eq!(pts[2][0], 0.25);
    }

    #[test]
    fn sobol_in_unit_cube() {
        for dim in 1..=MAX_DIM {
            let pts = sobol_points(512, dim, true).unwrap();
            for p in &pts {
                assert!(p.iter().all(|&x| (0.0..1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn sobol_rejects_bad_args() {
        assert!(matches!(sobol_points(0, 2, true), Err(SamplingError::NonPositiveCount(0))));
        assert!(matches!(sobol_points(4, 9, true), Err(SamplingError::DimensionTooLarge(9))));
    }

    /// Independent Gray-code implementation (as in the classic generator
    /// loops) to cross-check the direct-XOR construction.
    fn sobol_gray_dim(dim: usize, count: usize) -> Vec<f64> {
        let dirs = direction_numbers(dim);
        let mut x = 0u32;
        let mut out = Vec::with_capacity(count);
        for i in 0..count as u32 {
            // Incremental rule: flip the direction of the lowest zero bit of i.
            let c = (!i).trailing_zeros() as usize;
            x ^= dirs[c];
            out.push(x as f64 / 4294967296.0); // this is point index i+1
        }
        out
    }

    #[test]
    fn sobol_matches_independent_gray_code_construction() {
        for dim in 0..4 {
            let seq = SobolSequence::new(dim + 1).unwrap();
            let n = 256;
            let direct: Vec<f64> = (1..=n as u32)
                .map(|i| {
                    let mut buf = vec![0.0; dim + 1];
                    seq.point(i, &mut buf);
                    buf[dim]
                })
                .collect();
            let gray = sobol_gray_dim(dim, n);
            for (i, (a, b)) in direct.iter().zip(&gray).enumerate() {
                assert_eq!(a.to_bits(), b.to_bits(), "dim {dim} index {i}");
            }
        }
    }

    /// Brute-force star-discrepancy estimate on a g x g corner grid.
    fn star_discrepancy_2d(pts: &[Vec<f64>], g: usize) -> f64 {
        let n = pts.len() as f64;
        let mut worst = 0.0f64;
        for a in 1..=g {
            for b in 1..=g {
                let (ax, by) = (a as f64 / g as f64, b as f64 / g as f64);
                let count = pts.iter().filter(|p| p[0] < ax && p[1] < by).count() as f64;
                worst = worst.max((count / n - ax * by).abs());
            }
        }
        worst
    }

    #[test]
    fn sobol_beats_uniform_random_discrepancy() {
        use rand::Rng;
        let n = 1 << 10;
        let sob = sobol_points(n, 2, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let unif: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random(), rng.random()]).collect();
        let d_sob = star_discrepancy_2d(&sob, 64);
        let d_unif = star_discrepancy_2d(&unif, 64);
        assert!(d_sob < d_unif, "sobol {d_sob} vs uniform {d_unif}");
    }

    fn small_dataset() -> FsiDataset {
        let config = SolverConfig {
            grid_n: 25,
            t_end: 0.1,
            disc: Some(DiscConfig { n_markers: 40, ..DiscConfig::default() }),
            ..SolverConfig::default()
        };
        run_simulation(&config).unwrap()
    }

    #[test]
    fn full_fraction_selects_every_fluid_record_once() {
        let mut ds = small_dataset();
        // Strip the disc so every record is fluid.
        ds.in_fluid.iter_mut().for_each(|f| *f = true);
        let cfg = SamplingConfig { fluid_fraction: 1.0, interface_fraction: 0.5, ..SamplingConfig::default() };
        let ts = build_training_set(&ds, &cfg).unwrap();
        assert_eq!(ts.collocation_fluid.len(), ds.n_eulerian_records());
        let mut seen = HashSet::new();
        for p in &ts.collocation_fluid {
            assert!(seen.insert((p[0].to_bits(), p[1].to_bits(), p[2].to_bits())));
        }
    }

    #[test]
    fn paper_fraction_count() {
        // 0.005% of a 100 x 100 x 1001 Eulerian set is about 500 points.
        let total: usize = 100 * 100 * 1001;
        let count = round_count(0.005 / 100.0, total);
        assert!((499..=501).contains(&count), "{count}");
    }

    #[test]
    fn zero_interface_fraction_is_error() {
        let ds = small_dataset();
        let cfg = SamplingConfig {
            fluid_fraction: 0.01,
            interface_fraction: 0.0,
            ..SamplingConfig::default()
        };
        match build_training_set(&ds, &cfg) {
            Err(SamplingError::EmptyDomain { domain, .. }) => assert_eq!(domain, "interface"),
            other => panic!("expected empty-domain error, got {other:?}"),
        }
    }

    #[test]
    fn training_set_respects_walls_and_t0() {
        let ds = small_dataset();
        let cfg = SamplingConfig {
            fluid_fraction: 0.002,
            interface_fraction: 0.2,
            wall_points: 64,
            initial_points: 64,
            ..SamplingConfig::default()
        };
        let ts = build_training_set(&ds, &cfg).unwrap();
        assert!(ts.boundary_top.iter().all(|p| p[2] == 1.0));
        assert!(ts.boundary_bottom.iter().all(|p| p[2] == 0.0));
        assert!(ts.boundary_left.iter().all(|p| p[1] == 0.0));
        assert!(ts.boundary_right.iter().all(|p| p[1] == 1.0));
        assert!(ts.initial.iter().all(|p| p[0] == 0.0));
        assert!(!ts.collocation_fluid.is_empty());
        assert!(!ts.interface.is_empty());
    }

    #[test]
    fn training_set_deterministic() {
        let ds = small_dataset();
        let cfg = SamplingConfig { fluid_fraction: 0.002, interface_fraction: 0.1, ..SamplingConfig::default() };
        let a = build_training_set(&ds, &cfg).unwrap();
        let b = build_training_set(&ds, &cfg).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        assert_eq!(a.collocation_fluid, b.collocation_fluid);
        assert_eq!(
            a.interface.iter().map(|s| s.u.to_bits()).collect::<Vec<_>>(),
            b.interface.iter().map(|s| s.u.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn collocation_avoids_solid_interior() {
        let ds = small_dataset();
        let cfg = SamplingConfig { fluid_fraction: 0.005, interface_fraction: 0.1, ..SamplingConfig::default() };
        let ts = build_training_set(&ds, &cfg).unwrap();
        let n = ds.n;
        for p in &ts.collocation_fluid {
            let ti = ds.times.iter().position(|&t| (t - p[0]).abs() < 1e-12).unwrap();
            let i = ((p[1] / ds.h - 0.5).round() as usize).min(n - 1);
            let j = ((p[2] / ds.h - 0.5).round() as usize).min(n - 1);
            assert!(ds.in_fluid[ds.eul_idx(ti, i, j)], "collocation point inside solid");
        }
    }

    #[test]
    fn minibatch_clamps_and_repeats() {
        let b = minibatch(100, 128, 7, 3, BatchTerm::Lid);
        assert_eq!(b.len(), 100);
        let c = minibatch(1000, 128, 7, 3, BatchTerm::Lid);
        assert_eq!(c.len(), 128);
        let d = minibatch(1000, 128, 7, 3, BatchTerm::Lid);
        assert_eq!(c, d);
        let e = minibatch(1000, 128, 7, 4, BatchTerm::Lid);
        assert_ne!(c, e);
        let f = minibatch(1000, 128, 7, 3, BatchTerm::Walls);
        assert_ne!(c, f);
    }

    #[test]
    fn minibatch_frequencies_near_uniform() {
        // 10^4 draws of 128 from 1000: each index within 4 sigma of uniform.
        let len = 1000;
        let draws = 10_000u64;
        let bs = 128;
        let mut counts = vec![0u64; len];
        for it in 0..draws {
            for i in minibatch(len, bs, 123, it, BatchTerm::Collocation) {
                counts[i] += 1;
            }
        }
        let p = bs as f64 / len as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() < 4.0 * sigma,
                "index {i}: count {c}, mean {mean}, sigma {sigma}"
            );
        }
    }

    #[test]
    fn no_interface_sample_strictly_inside_exclusion() {
        let ds = small_dataset();
        let cfg = SamplingConfig { fluid_fraction: 0.002, interface_fraction: 0.25, ..SamplingConfig::default() };
        let ts = build_training_set(&ds, &cfg).unwrap();
        let n = ds.n;
        for s in &ts.interface {
            let ti = ds.times.iter().position(|&t| (t - s.t).abs() < 1e-12).unwrap();
            let i = ((s.x / ds.h - 0.5).round() as usize).min(n - 1);
            let j = ((s.y / ds.h - 0.5).round() as usize).min(n - 1);
            // Marker cells sit on the boundary: the four cells around a
            // marker cannot all be solid-interior.
            let mut any_fluid = false;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let ii = (i as i64 + di).clamp(0, n as i64 - 1) as usize;
                    let jj = (j as i64 + dj).clamp(0, n as i64 - 1) as usize;
                    any_fluid |= ds.in_fluid[ds.eul_idx(ti, ii, jj)];
                }
            }
            assert!(any_fluid, "interface sample buried in the solid interior");
        }
    }
}
