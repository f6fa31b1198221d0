//! Finite-sum least-squares problems.
//!
//! Component `i` is `f_i(x) = 1/2 * sum_{r in block i} (a_r^T x - b_r)^2` and the
//! objective is `f = (1/n) sum_i f_i`. With the default block size of one this is
//! `f = |Ax - b|^2 / (2n)`, which has the same minimizer as `|Ax - b|^2`.
//!
//! Gaussian draws come from `ChaCha20Rng::seed_from_u64(seed)` through
//! `rand_distr::StandardNormal`, consumed in this order: the `n x d` design
//! matrix row-major, the ground-truth `x`, then the `n` noise terms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{axpy, dot, norm_sq, quad_form, sub};

pub const MAGIC: &[u8; 4] = b"AVRP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("degenerate instance: mu = {mu:e} is below 1e-12 * L_f = {l_f:e}; reseed")]
    Degenerate { mu: f64, l_f: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed problem file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Smoothness and strong-convexity constants of a [`Problem`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// Number of components.
    pub n: usize,
    /// Per-component smoothness, `max_i lambda_max(grad^2 f_i)`.
    #[serde(rename = "L")]
    pub l: f64,
    /// Smoothness of the average objective.
    #[serde(rename = "L_f")]
    pub l_f: f64,
    /// Strong convexity of the average objective.
    pub mu: f64,
    /// `(1/n) sum_i |grad f_i(x*)|^2`.
    pub sigma_sq: f64,
}

/// JSON sidecar written next to a binary problem file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemMetadata {
    pub n: usize,
    pub d: usize,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_f")]
    pub l_f: f64,
    pub mu: f64,
    pub sigma_sq: f64,
}

#[derive(Debug, Clone)]
pub struct Problem {
    n: usize,
    d: usize,
    block: usize,
    rows: Vec<f64>,
    targets: Vec<f64>,
    x_star: Vec<f64>,
    hessian: Vec<f64>,
    f_star: f64,
    constants: Constants,
    sigma: f64,
    seed: u64,
}

impl Problem {
    /// Builds a problem from a row-major `rows.len() / d x d` design matrix.
    ///
    /// Solves the normal equations for `x*` and takes `L_f`, `mu` from the
    /// spectrum of `A^T A / n`.
    pub fn from_data(
        rows: Vec<f64>,
        targets: Vec<f64>,
        d: usize,
        sigma: f64,
        seed: u64,
    ) -> Result<Self, ProblemError> {
        if d == 0 || !rows.len().is_multiple_of(d) || rows.len() / d != targets.len() || targets.is_empty() {
            return Err(ProblemError::InvalidArgument(format!(
                "{} matrix entries and {} targets do not form an n x {d} system",
                rows.len(),
                targets.len()
            )));
        }
        let gram = gram_matrix(&rows, d);
        let atb = {
            let mut v = vec![0.0; d];
            for (row, b) in rows.chunks_exact(d).zip(&targets) {
                axpy(*b, row, &mut v);
            }
            v
        };
        let x_star = solve_spd(&gram, &atb, d)?;
        Self::assemble(rows, targets, d, 1, x_star, sigma, seed)
    }

    fn assemble(
        rows: Vec<f64>,
        targets: Vec<f64>,
        d: usize,
        block: usize,
        x_star: Vec<f64>,
        sigma: f64,
        seed: u64,
    ) -> Result<Self, ProblemError> {
        let n = targets.len() / block;
        let inv_n = 1.0 / n as f64;
        let hessian: Vec<f64> = gram_matrix(&rows, d).into_iter().map(|v| v * inv_n).collect();
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &hessian));
        let l_f = eig.eigenvalues.max();
        let mu = eig.eigenvalues.min();
        if mu.is_nan() || mu <= 1e-12 * l_f {
            return Err(ProblemError::Degenerate { mu, l_f });
        }
        let l = if block == 1 {
            rows.chunks_exact(d).map(norm_sq).fold(0.0, f64::max)
        } else {
            rows.chunks_exact(d * block)
                .map(|blk| block_lambda_max(blk, d, block))
                .fold(0.0, f64::max)
        };
        let mut problem = Problem {
            n,
            d,
            block,
            rows,
            targets,
            x_star,
            hessian,
            f_star: 0.0,
            constants: Constants { n, l, l_f, mu, sigma_sq: 0.0 },
            sigma,
            seed,
        };
        problem.f_star = problem.objective(&problem.x_star.clone());
        let mut g = vec![0.0; d];
        let mut acc = 0.0;
        for i in 0..n {
            problem.grad_component_into(i, &problem.x_star, &mut g);
            acc += norm_sq(&g);
        }
        problem.constants.sigma_sq = acc * inv_n;
        Ok(problem)
    }

    /// Convenience constructor from per-row vectors.
    pub fn from_rows(rows: &[Vec<f64>], targets: &[f64]) -> Result<Self, ProblemError> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(ProblemError::InvalidArgument("ragged rows".into()));
        }
        Self::from_data(rows.concat(), targets.to_vec(), d, 0.0, 0)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of data rows summed into each component.
    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn x_star(&self) -> &[f64] {
        &self.x_star
    }

    pub fn constants(&self) -> Constants {
        self.constants
    }

    /// `A^T A / n`, row-major.
    pub fn hessian(&self) -> &[f64] {
        &self.hessian
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    /// Row `r` of the design matrix (unblocked indexing).
    pub fn row(&self, r: usize) -> &[f64] {
        &self.rows[r * self.d..(r + 1) * self.d]
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Writes `grad f_i(x)` into `out`.
    #[inline]
    pub fn grad_component_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        if self.block == 1 {
            let a = &self.rows[i * d..(i + 1) * d];
            let r = dot(a, x) - self.targets[i];
            for (o, ai) in out.iter_mut().zip(a) {
                *o = r * ai;
            }
        } else {
            out.fill(0.0);
            for k in i * self.block..(i + 1) * self.block {
                let a = &self.rows[k * d..(k + 1) * d];
                axpy(dot(a, x) - self.targets[k], a, out);
            }
        }
    }

    pub fn grad_component(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.grad_component_into(i, x, &mut out);
        out
    }

    /// `(1/n) sum_i grad f_i(x)`.
    pub fn grad_full(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.d];
        let mut g = vec![0.0; self.d];
        for i in 0..self.n {
            self.grad_component_into(i, x, &mut g);
            axpy(1.0, &g, &mut acc);
        }
        let inv = 1.0 / self.n as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        acc
    }

    pub fn component_value(&self, i: usize, x: &[f64]) -> f64 {
        let d = self.d;
        (i * self.block..(i + 1) * self.block)
            .map(|k| {
                let r = dot(&self.rows[k * d..(k + 1) * d], x) - self.targets[k];
                0.5 * r * r
            })
            .sum()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        (0..self.n).map(|i| self.component_value(i, x)).sum::<f64>() / self.n as f64
    }

    /// `f(x) - f(x*)`, evaluated as the exact quadratic `1/2 (x-x*)^T H (x-x*)`
    /// so it stays accurate (and non-negative) near the optimum.
    pub fn objective_gap(&self, x: &[f64]) -> f64 {
        let y = sub(x, &self.x_star);
        0.5 * quad_form(&self.hessian, &y)
    }

    /// Gradients of every component at `x*`, row-major `n x d`.
    pub fn grads_at_optimum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.d];
        for (i, chunk) in out.chunks_exact_mut(self.d).enumerate() {
            self.grad_component_into(i, &self.x_star, chunk);
        }
        out
    }

    pub fn metadata(&self) -> ProblemMetadata {
        let c = self.constants;
        ProblemMetadata { n: self.n, d: self.d, l: c.l, l_f: c.l_f, mu: c.mu, sigma_sq: c.sigma_sq }
    }

    /// Writes the flat binary format: header, rows, targets, `x*`, then
    /// `L, L_f, mu, sigma_sq`, all little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), ProblemError> {
        if self.block != 1 {
            return Err(ProblemError::InvalidArgument(
                "blocked problems are not serializable; save the unblocked problem and block on load".into(),
            ));
        }
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.d as u64).to_le_bytes())?;
        w.write_all(&self.sigma.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let c = self.constants;
        for v in self
            .rows
            .iter()
            .chain(&self.targets)
            .chain(&self.x_star)
            .chain(&[c.l, c.l_f, c.mu, c.sigma_sq])
        {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, ProblemError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ProblemError::Format(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(ProblemError::Format(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let d = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let sigma = f64::from_le_bytes(read_array(&mut r)?);
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        if n == 0 || d == 0 || n.checked_mul(d).is_none_or(|nd| nd > (1 << 34)) {
            return Err(ProblemError::Format(format!("implausible shape {n} x {d}")));
        }
        let mut read_vec = |len: usize| -> Result<Vec<f64>, ProblemError> {
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)
                .map_err(|e| ProblemError::Format(format!("truncated payload: {e}")))?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let rows = read_vec(n * d)?;
        let targets = read_vec(n)?;
        let x_star = read_vec(d)?;
        let tail = read_vec(4)?;
        let mut p = Self::assemble(rows, targets, d, 1, x_star, sigma, seed)?;
        // Keep the stored constants bit-exact.
        p.constants = Constants { n, l: tail[0], l_f: tail[1], mu: tail[2], sigma_sq: tail[3] };
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProblemError> {
        self.write_binary(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProblemError> {
        Self::read_binary(BufReader::new(File::open(path)?))
    }

    pub fn save_metadata(&self, path: impl AsRef<Path>) -> Result<(), ProblemError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &self.metadata())?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], ProblemError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| ProblemError::Format(format!("truncated header: {e}")))?;
    Ok(buf)
}

fn gram_matrix(rows: &[f64], d: usize) -> Vec<f64> {
    let mut g = vec![0.0; d * d];
    for row in rows.chunks_exact(d) {
        for (a, ga) in row.iter().zip(g.chunks_exact_mut(d)) {
            if *a != 0.0 {
                axpy(*a, row, ga);
            }
        }
    }
    g
}

fn solve_spd(gram: &[f64], rhs: &[f64], d: usize) -> Result<Vec<f64>, ProblemError> {
    let m = DMatrix::from_row_slice(d, d, gram);
    let b = DVector::from_column_slice(rhs);
    let sol = match m.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => m.lu().solve(&b).ok_or(ProblemError::Degenerate { mu: 0.0, l_f: 0.0 })?,
    };
    Ok(sol.iter().copied().collect())
}

/// Largest eigenvalue of `B^T B` for a `block x d` row-major `B`.
fn block_lambda_max(blk: &[f64], d: usize, block: usize) -> f64 {
    let b = DMatrix::from_row_slice(block, d, blk);
    let small = if block <= d { &b * b.transpose() } else { b.transpose() * &b };
    SymmetricEigen::new(small).eigenvalues.max()
}

/// Draws a least-squares instance: rows `~ N(0, I_d / d)`, ground truth
/// `x ~ N(0, I_d)`, and `b = Ax + z` with `z ~ N(0, sigma^2)`.
pub fn generate_least_squares(n: usize, d: usize, sigma: f64, seed: u64) -> Result<Problem, ProblemError> {
    if d == 0 || n < d {
        return Err(ProblemError::InvalidArgument(format!("need n >= d >= 1, got n={n}, d={d}")));
    }
    if sigma.is_nan() || sigma < 0.0 || !sigma.is_finite() {
        return Err(ProblemError::InvalidArgument(format!("noise scale must be >= 0, got {sigma}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let rows: Vec<f64> = (0..n * d)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let x_true: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let targets: Vec<f64> = rows
        .chunks_exact(d)
        .map(|a| {
            let z: f64 = StandardNormal.sample(&mut rng);
            dot(a, &x_true) + sigma * z
        })
        .collect();
    if sigma == 0.0 {
        // The system is consistent; the ground truth interpolates it exactly.
        return Problem::assemble(rows, targets, d, 1, x_true, sigma, seed);
    }
    Problem::from_data(rows, targets, d, sigma, seed)
}

/// Groups `b` consecutive components into one, so component `l` becomes
/// `sum_{i in B_l} f_i`. Constants are recomputed for the blocked components.
pub fn block(problem: &Problem, b: usize) -> Result<Problem, ProblemError> {
    if b == 0 || !problem.n.is_multiple_of(b) {
        return Err(ProblemError::InvalidArgument(format!(
            "block size {b} does not divide n = {}",
            problem.n
        )));
    }
    if b == 1 {
        return Ok(problem.clone());
    }
    Problem::assemble(
        problem.rows.clone(),
        problem.targets.clone(),
        problem.d,
        problem.block * b,
        problem.x_star.clone(),
        problem.sigma,
        problem.seed,
    )
}

/// An equal-size assignment of the `n` components to `m` machines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    sets: Vec<Vec<usize>>,
    owner: Vec<usize>,
    slot: Vec<usize>,
}

impl Partition {
    fn from_sets(sets: Vec<Vec<usize>>, n: usize) -> Self {
        let mut owner = vec![0; n];
        let mut slot = vec![0; n];
        for (j, set) in sets.iter().enumerate() {
            for (s, &i) in set.iter().enumerate() {
                owner[i] = j;
                slot[i] = s;
            }
        }
        Partition { sets, owner, slot }
    }

    /// Machine `j` holds components `j*n/m .. (j+1)*n/m`.
    pub fn contiguous(n: usize, m: usize) -> Result<Self, ProblemError> {
        check_divides(n, m)?;
        let size = n / m;
        Ok(Self::from_sets((0..m).map(|j| (j * size..(j + 1) * size).collect()).collect(), n))
    }

    pub fn m(&self) -> usize {
        self.sets.len()
    }

    pub fn n(&self) -> usize {
        self.owner.len()
    }

    pub fn set(&self, j: usize) -> &[usize] {
        &self.sets[j]
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    /// Machine holding component `i`.
    pub fn owner(&self, i: usize) -> usize {
        self.owner[i]
    }

    /// Position of component `i` inside its machine's set.
    pub fn slot(&self, i: usize) -> usize {
        self.slot[i]
    }
}

fn check_divides(n: usize, m: usize) -> Result<(), ProblemError> {
    if m == 0 || !n.is_multiple_of(m) {
        return Err(ProblemError::InvalidArgument(format!(
            "m = {m} machines does not divide n = {n}; block the data first"
        )));
    }
    Ok(())
}

/// Random equal-size partition, deterministic per seed. Each set is sorted.
pub fn partition(n: usize, m: usize, seed: u64) -> Result<Partition, ProblemError> {
    check_divides(n, m)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let size = n / m;
    let sets = idx
        .chunks_exact(size)
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_unstable();
            v
        })
        .collect();
    Ok(Partition::from_sets(sets, n))
}
