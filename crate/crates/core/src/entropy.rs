//! Matrix-based Rényi α-entropy.
//!
//! Entropies are computed from the eigenvalue spectrum of a trace-normalized
//! kernel Gram matrix instead of from an estimated density. Joint entropies
//! take the Hadamard product of the per-variable Gram matrices, and the
//! conditional mutual information is the four-term combination
//!
//! ```text
//! I(C; B | A) = S(A ⊙ C) + S(A ⊙ B) − S(A) − S(A ⊙ B ⊙ C)
//! ```
//!
//! where every product is renormalized to unit trace before `S` is applied.
//!
//! Internally a [`GramMatrix`] keeps the unit-diagonal kernel `K̃` with
//! `K̃_ij = K_ij / sqrt(K_ii K_jj)`; the normalized matrix is `A = K̃ / n`.
//! A Hadamard product of such matrices again has a unit diagonal, so its
//! trace normalization is an exact division by `n`. For 0/1 partition
//! kernels this makes products of repeated factors bit-identical to the
//! factor itself.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default Rényi order, close to 1 so the estimate tracks Shannon entropy.
pub const DEFAULT_ALPHA: f64 = 1.01;

/// Eigenvalues below this are treated as invalid input rather than round-off.
pub const EIGEN_FLOOR: f64 = -1e-9;

/// CMI values in `[-CMI_FLOOR, 0)` are reported as exactly zero.
pub const CMI_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// `exp(-‖x − y‖² / (2σ²))`
    Gaussian { bandwidth: f64 },
    /// 1 when the two samples are exactly equal, else 0.
    Partition,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::input(format!(
                "gaussian bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(KernelSpec::Gaussian { bandwidth })
    }

    /// Gaussian kernel whose bandwidth is the median pairwise Euclidean
    /// distance of `samples`. Falls back to the mean of the nonzero distances
    /// when more than half the pairs coincide, and to 1 when all samples are
    /// equal (any bandwidth then gives the same all-ones kernel).
    pub fn median_heuristic<R: AsRef<[f64]>>(samples: &[R]) -> Self {
        let n = samples.len();
        let mut dists = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                dists.push(sq_dist(samples[i].as_ref(), samples[j].as_ref()).sqrt());
            }
        }
        KernelSpec::Gaussian {
            bandwidth: median_bandwidth(&mut dists),
        }
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { bandwidth } => {
                (-sq_dist(x, y) / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelSpec::Partition => {
                if x.iter().zip(y).all(|(a, b)| a == b) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn median_bandwidth(dists: &mut [f64]) -> f64 {
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    if *median > 0.0 {
        return *median;
    }
    let nonzero: Vec<f64> = dists.iter().copied().filter(|d| *d > 0.0).collect();
    if nonzero.is_empty() {
        1.0
    } else {
        nonzero.iter().sum::<f64>() / nonzero.len() as f64
    }
}

/// Trace-normalized kernel Gram matrix `A` with `A_ii = 1/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    unit: DMatrix<f64>,
}

impl GramMatrix {
    /// Wraps an already-normalized matrix. It must be square, symmetric,
    /// have every diagonal entry equal to `1/n` and therefore unit trace.
    pub fn from_normalized(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n < 2 || a.ncols() != n {
            return Err(Error::size(format!(
                "gram matrix must be square with n >= 2, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("gram matrix has non-finite entries"));
        }
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            if (a[(i, i)] - inv_n).abs() > 1e-12 {
                return Err(Error::input(format!(
                    "diagonal entry {i} is {}, expected 1/n",
                    a[(i, i)]
                )));
            }
            for j in (i + 1)..n {
                if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 {
                    return Err(Error::input(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
        let unit = DMatrix::from_fn(n, n, |i, j| {
            let s = 0.5 * (a[(i, j)] + a[(j, i)]);
            s / (a[(i, i)] * a[(j, j)]).sqrt()
        });
        Ok(GramMatrix { unit })
    }

    pub fn n(&self) -> usize {
        self.unit.nrows()
    }

    /// The normalized matrix `A`.
    pub fn normalized(&self) -> DMatrix<f64> {
        let n = self.n() as f64;
        self.unit.map(|v| v / n)
    }

    pub fn trace(&self) -> f64 {
        let n = self.n() as f64;
        self.unit.diagonal().iter().map(|v| v / n).sum()
    }

    /// Eigenvalues of `A`, ascending. Round-off negatives above
    /// [`EIGEN_FLOOR`] are clamped to 0 and everything is capped at 1.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let n = self.n() as f64;
        let raw = self.unit.clone().symmetric_eigenvalues();
        let mut vals = Vec::with_capacity(raw.len());
        for v in raw.iter() {
            let lambda = v / n;
            if !lambda.is_finite() {
                return Err(Error::Numeric("eigendecomposition produced NaN".into()));
            }
            if lambda < EIGEN_FLOOR {
                return Err(Error::Numeric(format!(
                    "gram matrix is not positive semidefinite (eigenvalue {lambda:e})"
                )));
            }
            vals.push(lambda.clamp(0.0, 1.0));
        }
        vals.sort_by(f64::total_cmp);
        Ok(vals)
    }

    fn hadamard_in_place(&mut self, other: &GramMatrix) {
        self.unit.component_mul_assign(&other.unit);
    }
}

/// Builds the normalized Gram matrix `A_ij = K_ij / (n sqrt(K_ii K_jj))`.
pub fn gram_matrix<R: AsRef<[f64]>>(samples: &[R], kernel: &KernelSpec) -> Result<GramMatrix> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::size(format!("need at least 2 samples, got {n}")));
    }
    let d = samples[0].as_ref().len();
    for (i, s) in samples.iter().enumerate() {
        let s = s.as_ref();
        if s.len() != d {
            return Err(Error::size(format!(
                "sample {i} has dimension {}, expected {d}",
                s.len()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("sample {i} has non-finite entries")));
        }
    }
    if let KernelSpec::Gaussian { bandwidth } = kernel {
        KernelSpec::gaussian(*bandwidth)?;
    }

    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = kernel.eval(samples[i].as_ref(), samples[i].as_ref());
        for j in (i + 1)..n {
            let v = kernel.eval(samples[i].as_ref(), samples[j].as_ref());
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let diag: Vec<f64> = (0..n).map(|i| k[(i, i)]).collect();
    let unit = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            k[(i, j)] / (diag[i] * diag[j]).sqrt()
        }
    });
    Ok(GramMatrix { unit })
}

/// Gram matrix of a single scalar variable.
pub fn gram_matrix_1d(values: &[f64], kernel: &KernelSpec) -> Result<GramMatrix> {
    let rows: Vec<[f64; 1]> = values.iter().map(|v| [*v]).collect();
    gram_matrix(&rows, kernel)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) || alpha == 1.0 {
        return Err(Error::input(format!(
            "renyi order must be positive and != 1, got {alpha}"
        )));
    }
    Ok(())
}

fn renyi_from_eigenvalues(vals: &[f64], alpha: f64) -> f64 {
    let power_sum: f64 = vals.iter().filter(|v| **v > 0.0).map(|v| v.powf(alpha)).sum();
    let bits = power_sum.log2() / (1.0 - alpha);
    // The eigenvalues of a trace-1 matrix give a value in [0, log2 n]; anything
    // slightly outside is round-off.
    let max_bits = (vals.len() as f64).log2();
    bits.clamp(0.0, max_bits)
}

/// `S_α(A) = 1/(1−α) · log2 Σ λ_i(A)^α`, in bits.
pub fn renyi_entropy(a: &GramMatrix, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let vals = a.eigenvalues()?;
    Ok(renyi_from_eigenvalues(&vals, alpha))
}

/// Trace-normalized Hadamard product of all factors.
pub fn hadamard_product(mats: &[&GramMatrix]) -> Result<GramMatrix> {
    let (first, rest) = mats
        .split_first()
        .ok_or_else(|| Error::input("hadamard product of an empty list"))?;
    let n = first.n();
    let mut acc = (*first).clone();
    for m in rest {
        if m.n() != n {
            return Err(Error::size(format!(
                "gram matrices of size {n} and {} cannot be combined",
                m.n()
            )));
        }
        acc.hadamard_in_place(m);
    }
    Ok(acc)
}

/// Joint entropy of the variables behind `mats`.
pub fn joint_entropy(mats: &[&GramMatrix], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let product = hadamard_product(mats)?;
    renyi_entropy(&product, alpha)
}

/// Conditional mutual information `I(C; B | A)` in bits.
///
/// Tiny negative results within [`CMI_FLOOR`] are reported as 0.
pub fn cmi(c_set: &[&GramMatrix], b: &GramMatrix, a_set: &[&GramMatrix], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if c_set.is_empty() || a_set.is_empty() {
        return Err(Error::input("cmi needs nonempty conditioning and target sets"));
    }
    let n = b.n();
    if c_set.iter().chain(a_set.iter()).any(|m| m.n() != n) {
        return Err(Error::size("all gram matrices in a cmi call must share n"));
    }

    let a = hadamard_product(a_set)?;
    let c = hadamard_product(c_set)?;
    let mut ac = a.clone();
    ac.hadamard_in_place(&c);
    let mut ab = a.clone();
    ab.hadamard_in_place(b);
    let mut abc = ab.clone();
    abc.hadamard_in_place(&c);

    let s_ac = renyi_entropy(&ac, alpha)?;
    let s_ab = renyi_entropy(&ab, alpha)?;
    let s_a = renyi_entropy(&a, alpha)?;
    let s_abc = renyi_entropy(&abc, alpha)?;

    // Grouped so that identical pairs cancel exactly.
    let value = (s_ac - s_a) + (s_ab - s_abc);
    Ok(if value < 0.0 && value >= -CMI_FLOOR { 0.0 } else { value })
}

/// One Gram matrix per unit (column) of a layer's activation matrix.
///
/// `columns[u]` holds the activations of unit `u` over the `n` samples. With
/// [`ActivationKernel::MedianGaussian`] each unit gets its own bandwidth.
pub fn activation_gram(columns: &[Vec<f64>], kernel: ActivationKernel) -> Result<Vec<GramMatrix>> {
    if columns.is_empty() {
        return Err(Error::input("activation_gram needs at least one unit"));
    }
    columns
        .iter()
        .map(|col| {
            let spec = match kernel {
                ActivationKernel::MedianGaussian => {
                    let rows: Vec<[f64; 1]> = col.iter().map(|v| [*v]).collect();
                    KernelSpec::median_heuristic(&rows)
                }
                ActivationKernel::Fixed(spec) => spec,
            };
            gram_matrix_1d(col, &spec)
        })
        .collect()
}

/// Kernel choice for continuous activations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKernel {
    /// Gaussian with a per-unit median-distance bandwidth.
    MedianGaussian,
    Fixed(KernelSpec),
}

/// Gram matrix of class labels: the partition kernel of their one-hot codes,
/// which is exact label equality.
pub fn label_gram(labels: &[usize]) -> Result<GramMatrix> {
    let values: Vec<f64> = labels.iter().map(|l| *l as f64).collect();
    gram_matrix_1d(&values, &KernelSpec::Partition)
}
