//! Synthetic regression tasks and prompt datasets.
//!
//! Randomness comes from [`SeededRng`]: xoshiro256++ whose 256-bit state is
//! filled from the 64-bit seed by SplitMix64. Uniform reals take the top 53
//! bits of each output; normals use Box–Muller. Independent streams are made
//! by hashing `(master, index)` through the SplitMix64 finalizer, so prompt
//! `i` of a dataset never depends on how prompts `0..i` were drawn.

use std::io::{Read, Write};
use std::path::Path;

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::constructions::KnotGrid;
use crate::regression::{bspline_basis, legendre_eval, Uniform};
use crate::transformer::codec::{CodecError, Reader, Writer};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    inner: Xoshiro256PlusPlus,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Stream `stream` of `master`.
    pub fn derive(master: u64, stream: u64) -> Self {
        Self::new(splitmix64(master ^ splitmix64(stream)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal (Box–Muller, one draw per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Distribution over target functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskSampler {
    /// Legendre series of degree `d` with coefficients uniform on `[-1, 1]`.
    Poly { d: usize },
    /// Linear spline on `grid` with coefficients uniform on `coeff_range`.
    LinearSpline {
        grid: KnotGrid,
        coeff_range: (f64, f64),
    },
}

impl TaskSampler {
    pub fn linear_spline(grid: KnotGrid) -> Self {
        TaskSampler::LinearSpline {
            grid,
            coeff_range: (-1.0, 1.0),
        }
    }

    pub fn sample(&self, rng: &mut SeededRng) -> RegressionTask {
        match *self {
            TaskSampler::Poly { d } => sample_poly_task(d, rng),
            TaskSampler::LinearSpline { grid, coeff_range } => {
                sample_spline_task(&grid, coeff_range, rng)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSampler::Poly { .. } => "poly",
            TaskSampler::LinearSpline { .. } => "linear_spline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegressionTask {
    LegendrePoly { coeffs: Vec<f64> },
    LinearSpline { coeffs: Vec<f64>, grid: KnotGrid },
}

impl RegressionTask {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            RegressionTask::LegendrePoly { coeffs } => legendre_eval(coeffs, x),
            RegressionTask::LinearSpline { coeffs, grid } => bspline_basis(x, grid)
                .iter()
                .zip(coeffs)
                .map(|(b, c)| b * c)
                .sum(),
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        match self {
            RegressionTask::LegendrePoly { coeffs } => coeffs,
            RegressionTask::LinearSpline { coeffs, .. } => coeffs,
        }
    }
}

pub fn sample_poly_task(d: usize, rng: &mut SeededRng) -> RegressionTask {
    RegressionTask::LegendrePoly {
        coeffs: (0..=d).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
    }
}

pub fn sample_spline_task(
    grid: &KnotGrid,
    coeff_range: (f64, f64),
    rng: &mut SeededRng,
) -> RegressionTask {
    let (lo, hi) = coeff_range;
    RegressionTask::LinearSpline {
        coeffs: (0..grid.dim()).map(|_| rng.uniform_in(lo, hi)).collect(),
        grid: *grid,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub query: f64,
    pub target: f64,
}

impl Prompt {
    pub fn n(&self) -> usize {
        self.xs.len()
    }

    pub fn context(&self) -> Vec<(f64, f64)> {
        self.xs.iter().copied().zip(self.ys.iter().copied()).collect()
    }
}

pub fn generate_prompt(
    task: &RegressionTask,
    n: usize,
    dist: &Uniform,
    rng: &mut SeededRng,
) -> Prompt {
    assert!(n >= 1, "a prompt needs at least one context pair");
    let xs: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    let ys = xs.iter().map(|&x| task.eval(x)).collect();
    let query = dist.sample(rng);
    Prompt {
        xs,
        ys,
        query,
        target: task.eval(query),
    }
}

/// `L` prompts of context length `n`, each from a freshly drawn task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sampler: TaskSampler,
    pub n: usize,
    pub seed: u64,
    pub prompts: Vec<Prompt>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Prompt `i` uses stream `i` of `seed`.
pub fn generate_dataset(sampler: &TaskSampler, n: usize, l: usize, seed: u64) -> Dataset {
    assert!(l >= 1, "a dataset needs at least one prompt");
    let dist = Uniform::symmetric();
    let prompts = (0..l)
        .map(|i| {
            let mut rng = SeededRng::derive(seed, i as u64);
            let task = sampler.sample(&mut rng);
            generate_prompt(&task, n, &dist, &mut rng)
        })
        .collect();
    Dataset {
        sampler: *sampler,
        n,
        seed,
        prompts,
    }
}

pub const DATASET_MAGIC: &[u8; 8] = b"ICRDATA\0";
pub const DATASET_VERSION: u32 = 1;

/// Little-endian: magic, version, kind tag (0 poly, 1 linear spline), kind parameters
/// (`d`, or `a, b, m, degree, lo, hi`), `n`, `L`, seed, then `L` records of
/// `xs[n], ys[n], query, target` as f64.
pub fn write_dataset<W: Write>(ds: &Dataset, out: W) -> Result<(), CodecError> {
    let mut w = Writer { inner: out };
    w.inner.write_all(DATASET_MAGIC)?;
    w.u32(DATASET_VERSION)?;
    match ds.sampler {
        TaskSampler::Poly { d } => {
            w.u8(0)?;
            w.u64(d as u64)?;
        }
        TaskSampler::LinearSpline { grid, coeff_range } => {
            w.u8(1)?;
            w.f64(grid.a)?;
            w.f64(grid.b)?;
            w.u64(grid.m as u64)?;
            w.u64(grid.degree as u64)?;
            w.f64(coeff_range.0)?;
            w.f64(coeff_range.1)?;
        }
    }
    w.u64(ds.n as u64)?;
    w.u64(ds.prompts.len() as u64)?;
    w.u64(ds.seed)?;
    for p in &ds.prompts {
        w.f64s(&p.xs)?;
        w.f64s(&p.ys)?;
        w.f64(p.query)?;
        w.f64(p.target)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset, CodecError> {
    let mut r = Reader { inner: input };
    r.magic(DATASET_MAGIC, "dataset")?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(CodecError::Version(version));
    }
    let sampler = match r.u8()? {
        0 => TaskSampler::Poly { d: r.len()? },
        1 => {
            let a = r.f64()?;
            let b = r.f64()?;
            let m = r.len()?;
            let degree = r.len()?;
            let grid = KnotGrid::new(a, b, m, degree)
                .map_err(|e| CodecError::Corrupt(e.to_string()))?;
            let lo = r.f64()?;
            let hi = r.f64()?;
            TaskSampler::LinearSpline {
                grid,
                coeff_range: (lo, hi),
            }
        }
        t => return Err(CodecError::Corrupt(format!("task kind {t}"))),
    };
    let n = r.len()?;
    let l = r.len()?;
    let seed = r.u64()?;
    let mut prompts = Vec::with_capacity(l.min(1 << 20));
    for _ in 0..l {
        let xs = r.f64s(n)?;
        let ys = r.f64s(n)?;
        let query = r.f64()?;
        let target = r.f64()?;
        prompts.push(Prompt {
            xs,
            ys,
            query,
            target,
        });
    }
    Ok(Dataset {
        sampler,
        n,
        seed,
        prompts,
    })
}

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset, CodecError> {
    let mut cursor = bytes;
    let ds = read_dataset(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(CodecError::Corrupt(format!("{} trailing bytes", cursor.len())));
    }
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), CodecError> {
    std::fs::write(path, dataset_to_bytes(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CodecError> {
    dataset_from_bytes(&std::fs::read(path)?)
}
