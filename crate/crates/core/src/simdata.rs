//! Charged-particle simulator and dataset files.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::{map_range, mix_seed, seeded_rng};
use crate::geometry::{fully_connected, GeometricTrajectory, Vec3};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimParams {
    pub kappa: f64,
    pub softening: f64,
    pub dt: f64,
    /// Integrator steps between saved frames.
    pub substeps: usize,
    /// Half-width of the initial position box.
    pub box_half_width: f64,
    pub velocity_std: f64,
    /// A particle farther than this from the origin counts as escaped.
    pub escape_radius: f64,
    pub max_retries: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            softening: 0.1,
            dt: 0.001,
            substeps: 100,
            box_half_width: 1.0,
            velocity_std: 0.5,
            escape_radius: 10.0,
            max_retries: 20,
        }
    }
}

/// Unit-mass particles with charges ±1.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    charges: Vec<f64>,
    positions: Vec<Vec3>,
    velocities: Vec<Vec3>,
    kappa: f64,
    softening: f64,
    dt: f64,
}

impl ParticleSystem {
    pub fn new(
        charges: Vec<f64>,
        positions: Vec<Vec3>,
        velocities: Vec<Vec3>,
        kappa: f64,
        softening: f64,
        dt: f64,
    ) -> Result<Self> {
        if charges.iter().any(|&q| q != 1.0 && q != -1.0) {
            return Err(Error::Invalid("charges must be +1 or -1".into()));
        }
        if positions.len() != charges.len() || velocities.len() != charges.len() {
            return Err(Error::Shape(format!(
                "{} charges, {} positions, {} velocities",
                charges.len(),
                positions.len(),
                velocities.len()
            )));
        }
        if !(dt > 0.0) || !(softening > 0.0) {
            return Err(Error::Invalid(format!(
                "dt {dt} and softening {softening} must be positive"
            )));
        }
        Ok(Self {
            charges,
            positions,
            velocities,
            kappa,
            softening,
            dt,
        })
    }

    /// Random charges, positions uniform in the box, Gaussian velocities.
    pub fn random(n: usize, params: &SimParams, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let charges = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let w = params.box_half_width;
        let positions = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-w..=w)))
            .collect();
        let velocities = (0..n)
            .map(|_| std::array::from_fn(|_| params.velocity_std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::new(
            charges,
            positions,
            velocities,
            params.kappa,
            params.softening,
            params.dt,
        )
    }

    pub fn n(&self) -> usize {
        self.charges.len()
    }

    pub fn charges(&self) -> &[f64] {
        &self.charges
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn velocities(&self) -> &[Vec3] {
        &self.velocities
    }

    /// `F_i = Σ_j κ q_i q_j (x_i − x_j) / (‖x_i − x_j‖² + ε²)^{3/2}`.
    pub fn forces(&self) -> Vec<Vec3> {
        let n = self.n();
        let eps2 = self.softening * self.softening;
        let mut f = vec![[0.0; 3]; n];
        for i in 0..n {
            for j in i + 1..n {
                let d: Vec3 = std::array::from_fn(|k| self.positions[i][k] - self.positions[j][k]);
                let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + eps2;
                let s = self.kappa * self.charges[i] * self.charges[j] / (r2 * r2.sqrt());
                for k in 0..3 {
                    f[i][k] += s * d[k];
                    f[j][k] -= s * d[k];
                }
            }
        }
        f
    }

    /// One kick-drift-kick leapfrog step.
    pub fn step(&mut self) {
        let h = 0.5 * self.dt;
        let f = self.forces();
        for (v, a) in self.velocities.iter_mut().zip(&f) {
            for k in 0..3 {
                v[k] += h * a[k];
            }
        }
        for (x, v) in self.positions.iter_mut().zip(&self.velocities) {
            for k in 0..3 {
                x[k] += self.dt * v[k];
            }
        }
        let f = self.forces();
        for (v, a) in self.velocities.iter_mut().zip(&f) {
            for k in 0..3 {
                v[k] += h * a[k];
            }
        }
    }

    pub fn momentum(&self) -> Vec3 {
        std::array::from_fn(|k| self.velocities.iter().map(|v| v[k]).sum())
    }

    /// Kinetic plus softened Coulomb potential energy.
    pub fn energy(&self) -> f64 {
        let n = self.n();
        let eps2 = self.softening * self.softening;
        let kin: f64 = self
            .velocities
            .iter()
            .map(|v| 0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]))
            .sum();
        let mut pot = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let r2: f64 = (0..3)
                    .map(|k| (self.positions[i][k] - self.positions[j][k]).powi(2))
                    .sum();
                pot += self.kappa * self.charges[i] * self.charges[j] / (r2 + eps2).sqrt();
            }
        }
        kin + pot
    }

    /// Positions at `frames` saved states, `substeps` integrator steps apart;
    /// frame 0 is the current state. Returns `N×frames×3`.
    pub fn run(&mut self, frames: usize, substeps: usize) -> Tensor {
        let n = self.n();
        let mut out = vec![0.0; n * frames * 3];
        for t in 0..frames {
            if t > 0 {
                for _ in 0..substeps {
                    self.step();
                }
            }
            for (i, p) in self.positions.iter().enumerate() {
                out[(i * frames + t) * 3..(i * frames + t) * 3 + 3].copy_from_slice(p);
            }
        }
        Tensor::from_parts(vec![n, frames, 3], out)
    }
}

/// One-hot charge features: `[1, 0]` for +1, `[0, 1]` for −1.
pub fn charge_features(charges: &[f64]) -> Tensor {
    Tensor::from_fn(&[charges.len(), 2], |k| {
        let positive = charges[k / 2] > 0.0;
        if (k % 2 == 0) == positive {
            1.0
        } else {
            0.0
        }
    })
}

/// A simulated trajectory with one-hot charges and full connectivity.
pub fn simulate_charged(n: usize, frames: usize, params: &SimParams, seed: u64) -> Result<GeometricTrajectory> {
    simulate_with_retries(n, frames, params, |attempt| mix_seed(seed, attempt as u64)).map(|(t, _)| t)
}

fn simulate_with_retries(
    n: usize,
    frames: usize,
    params: &SimParams,
    seed_for: impl Fn(usize) -> u64,
) -> Result<(GeometricTrajectory, u64)> {
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 particles, got {n}")));
    }
    if frames == 0 {
        return Err(Error::Invalid("need at least one frame".into()));
    }
    for attempt in 0..=params.max_retries {
        let seed = seed_for(attempt);
        let mut sys = ParticleSystem::random(n, params, seed)?;
        let coords = sys.run(frames, params.substeps);
        let r2 = params.escape_radius * params.escape_radius;
        let escaped = !coords.is_finite()
            || coords
                .data()
                .chunks(3)
                .any(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2] > r2);
        if escaped {
            log::debug!("seed {seed} escaped, retrying");
            continue;
        }
        let traj = GeometricTrajectory::new(charge_features(sys.charges()), coords, fully_connected(n))?;
        return Ok((traj, seed));
    }
    Err(Error::Simulation(format!(
        "particles escaped radius {} in {} attempts",
        params.escape_radius,
        params.max_retries + 1
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Simulation seed of attempt `attempt` for record `index` of `split`.
pub fn record_seed(seed: u64, split: Split, index: usize, attempt: usize) -> u64 {
    let stream = (split.stream() << 56) | ((index as u64) << 8) | attempt as u64;
    mix_seed(seed, stream)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub particles: usize,
    /// Saved frames per record, condition and prediction frames together.
    pub frames: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub sim: SimParams,
}

impl DatasetConfig {
    pub fn desk() -> Self {
        Self {
            particles: 5,
            frames: 12,
            train: 300,
            val: 100,
            test: 100,
            seed: 0,
            sim: SimParams::default(),
        }
    }

    pub fn full() -> Self {
        Self {
            particles: 5,
            frames: 35,
            train: 3000,
            val: 2000,
            test: 2000,
            ..Self::desk()
        }
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<GeometricTrajectory>,
    pub val: Vec<GeometricTrajectory>,
    pub test: Vec<GeometricTrajectory>,
    /// Seed that produced each record, per split in order.
    pub seeds: [Vec<u64>; 3],
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[GeometricTrajectory] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn make_dataset(config: &DatasetConfig) -> Result<Dataset> {
    let mut parts: Vec<(Vec<GeometricTrajectory>, Vec<u64>)> = Vec::new();
    for split in Split::ALL {
        let size = config.size(split);
        if size == 0 {
            return Err(Error::Invalid(format!("{} split is empty", split.as_str())));
        }
        let made = map_range(size, |k| {
            simulate_with_retries(config.particles, config.frames, &config.sim, |a| {
                record_seed(config.seed, split, k, a)
            })
        });
        let mut recs = Vec::with_capacity(size);
        let mut seeds = Vec::with_capacity(size);
        for m in made {
            let (r, s) = m?;
            recs.push(r);
            seeds.push(s);
        }
        parts.push((recs, seeds));
    }
    let (test, s3) = parts.pop().expect("three splits");
    let (val, s2) = parts.pop().expect("three splits");
    let (train, s1) = parts.pop().expect("three splits");
    Ok(Dataset {
        train,
        val,
        test,
        seeds: [s1, s2, s3],
    })
}

pub const MAGIC: &[u8; 4] = b"GADA";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_records(records: &[GeometricTrajectory]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(records.len())?.to_le_bytes());
    for r in records {
        for d in [r.n_nodes(), r.n_frames(), r.feature_dim()] {
            out.extend_from_slice(&u32_of(d)?.to_le_bytes());
        }
        for v in r.features.data().iter().chain(r.coords.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&u32_of(r.edges.len())?.to_le_bytes());
        for &(i, j) in &r.edges {
            out.extend_from_slice(&u32_of(i)?.to_le_bytes());
            out.extend_from_slice(&u32_of(j)?.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, k: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(k)
            .ok_or_else(|| Error::Format("size overflow".into()))?;
        if end > self.buf.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, k: usize) -> Result<Vec<f64>> {
        let bytes = k.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_records(buf: &[u8]) -> Result<Vec<GeometricTrajectory>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a dataset file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (n, t, h) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let features = Tensor::new(&[n, h], r.f64s(n * h)?)?;
        let coords = Tensor::new(&[n, t, 3], r.f64s(n * t * 3)?)?;
        let m = r.u32()? as usize;
        let mut edges = Vec::with_capacity(m.min(1 << 16));
        for _ in 0..m {
            edges.push((r.u32()? as usize, r.u32()? as usize));
        }
        out.push(GeometricTrajectory::new(features, coords, edges)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[GeometricTrajectory]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_records(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<GeometricTrajectory>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&buf)
}

/// Path of one split inside a dataset directory.
pub fn split_path(dir: impl AsRef<Path>, split: Split) -> std::path::PathBuf {
    dir.as_ref().join(format!("{}.gada", split.as_str()))
}

/// Writes `train.gada`, `val.gada` and `test.gada` into `dir`.
pub fn write_dataset_dir(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in Split::ALL {
        write_dataset(split_path(dir, s), data.split(s))?;
    }
    Ok(())
}

/// Reads one split of a dataset directory.
pub fn read_split(dir: impl AsRef<Path>, split: Split) -> Result<Vec<GeometricTrajectory>> {
    read_dataset(split_path(dir, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, rotate_vectors};

    fn dist(s: &ParticleSystem) -> f64 {
        let (a, b) = (s.positions()[0], s.positions()[1]);
        (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
    }

    fn pair(q: f64) -> ParticleSystem {
        ParticleSystem::new(
            vec![1.0, q],
            vec![[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]],
            vec![[0.0; 3]; 2],
            1.0,
            0.1,
            0.001,
        )
        .unwrap()
    }

    #[test]
    fn force_sign() {
        for (q, closer) in [(-1.0, true), (1.0, false)] {
            let mut s = pair(q);
            let mut last = dist(&s);
            for _ in 0..20 {
                s.step();
                let d = dist(&s);
                assert_eq!(d < last, closer);
                last = d;
            }
        }
    }

    #[test]
    fn momentum_and_energy() {
        let p = SimParams::default();
        for seed in 0..10 {
            let mut s = ParticleSystem::random(5, &p, seed).unwrap();
            let p0 = s.momentum();
            let e0 = s.energy();
            for _ in 0..11 * p.substeps {
                s.step();
            }
            let p1 = s.momentum();
            assert!((0..3).all(|k| (p1[k] - p0[k]).abs() <= 1e-10));
            assert!((s.energy() - e0).abs() <= 0.01 * e0.abs(), "seed {seed}");
        }
    }

    #[test]
    fn rotated_initial_conditions_rotate_the_trajectory() {
        let p = SimParams::default();
        let mut s = ParticleSystem::random(5, &p, 3).unwrap();
        let r = random_rotation(4);
        let rot = |v: &[Vec3]| -> Vec<Vec3> { v.iter().map(|x| crate::geometry::mat_vec(&r, x)).collect() };
        let mut s2 = ParticleSystem::new(
            s.charges().to_vec(),
            rot(s.positions()),
            rot(s.velocities()),
            1.0,
            0.1,
            0.001,
        )
        .unwrap();
        let a = s.run(6, p.substeps);
        let b = s2.run(6, p.substeps);
        assert!(b.max_abs_diff(&rotate_vectors(&a, &r)).unwrap() <= 1e-9);
    }

    #[test]
    fn invalid_systems() {
        assert!(ParticleSystem::new(vec![0.5, 1.0], vec![[0.0; 3]; 2], vec![[0.0; 3]; 2], 1.0, 0.1, 0.001).is_err());
        assert!(ParticleSystem::new(vec![1.0, 1.0], vec![[0.0; 3]; 2], vec![[0.0; 3]; 2], 1.0, 0.1, 0.0).is_err());
        assert!(simulate_charged(1, 4, &SimParams::default(), 0).is_err());
        let hopeless = SimParams {
            escape_radius: 1e-3,
            max_retries: 2,
            ..SimParams::default()
        };
        assert!(matches!(
            simulate_charged(3, 4, &hopeless, 0),
            Err(Error::Simulation(_))
        ));
    }

    #[test]
    fn dataset_sizes_and_seeds() {
        assert_eq!(
            (
                DatasetConfig::full().train,
                DatasetConfig::full().val,
                DatasetConfig::full().test
            ),
            (3000, 2000, 2000)
        );
        let cfg = DatasetConfig {
            train: 1,
            val: 1,
            test: 1,
            frames: 3,
            ..DatasetConfig::desk()
        };
        let d = make_dataset(&cfg).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (1, 1, 1));
        let all: std::collections::HashSet<u64> = d.seeds.iter().flatten().copied().collect();
        assert_eq!(all.len(), 3);
        assert_eq!(d.train[0].coords.shape(), &[5, 3, 3]);
        assert_eq!(make_dataset(&cfg).unwrap(), d);
    }

    #[test]
    fn encode_round_trip_and_errors() {
        let t = simulate_charged(3, 4, &SimParams::default(), 1).unwrap();
        let bytes = encode_records(&[t.clone(), t.clone()]).unwrap();
        assert_eq!(decode_records(&bytes).unwrap(), vec![t.clone(), t]);
        let cut = &bytes[..bytes.len() - 5];
        match decode_records(cut) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(actual, bytes.len() - 5);
                assert!(expected > actual);
            }
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_records(&bad), Err(Error::Format(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(
            decode_records(&v2),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }
}
