//! Quantum-state utilities shared by the simulators, the tokenizer and the
//! metric suite: Hermitian encoding/decoding, fidelity, trace diagnostics,
//! positivity projection, Bloch coordinates and Haar sampling.

pub mod cmat;

pub use cmat::{C64, CMat};

use crate::error::{Error, Result};
use rand::Rng;

/// Numerical tolerances used across the crate, collected in one place so the
/// simulators, tokenizer and metrics agree on what "equal" means.
#[derive(Clone, Copy, Debug)]
pub struct Tolerances {
    /// Hermiticity deviation accepted before symmetrizing an input state.
    pub hermiticity: f64,
    /// Trace deviation accepted for a physical state.
    pub trace: f64,
    /// Most negative eigenvalue accepted for a physical state.
    pub eigenvalue_floor: f64,
    /// Exact round trips (encode/decode, recomposition) must hold to this.
    pub roundtrip: f64,
}

pub const TOL: Tolerances = Tolerances {
    hermiticity: 1e-9,
    trace: 1e-9,
    eigenvalue_floor: 1e-9,
    roundtrip: 1e-14,
};

/// A dissipation channel: jump operator with its rate.
#[derive(Clone, Debug)]
pub struct Channel {
    /// Rate gamma_j, in the time units of the enclosing simulation.
    pub rate: f64,
    /// Jump operator L_j.
    pub op: CMat,
}

/// Complex d x d Hermitian state at one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    mat: CMat,
}

impl DensityMatrix {
    /// Wrap a matrix that is Hermitian to within `TOL.hermiticity`;
    /// symmetrizes the small remainder.
    pub fn new(mat: CMat) -> Result<Self> {
        if mat.dim() == 0 {
            return Err(Error::invalid("density matrix dimension must be positive"));
        }
        let herm_dev = mat.sub(&mat.dagger()).max_abs();
        if herm_dev > TOL.hermiticity {
            return Err(Error::invalid(format!(
                "matrix is not Hermitian (deviation {herm_dev:.3e})"
            )));
        }
        Ok(DensityMatrix { mat: mat.symmetrize() })
    }

    /// Wrap without the Hermiticity gate; still symmetrizes.
    pub fn from_symmetrized(mat: CMat) -> Self {
        DensityMatrix { mat: mat.symmetrize() }
    }

    /// Pure state |psi><psi| from an (unnormalized) state vector.
    pub fn pure_state(amplitudes: &[C64]) -> Result<Self> {
        let norm_sq: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if norm_sq == 0.0 {
            return Err(Error::invalid("zero state vector"));
        }
        let d = amplitudes.len();
        let mut m = CMat::zeros(d);
        for i in 0..d {
            for j in 0..d {
                m.set(i, j, amplitudes[i] * amplitudes[j].conj() / norm_sq);
            }
        }
        Ok(DensityMatrix { mat: m })
    }

    /// Computational basis state |k><k|.
    pub fn basis_state(dim: usize, k: usize) -> Self {
        DensityMatrix { mat: CMat::ket_bra(dim, k, k) }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        DensityMatrix {
            mat: CMat::identity(dim).scale(C64::new(1.0 / dim as f64, 0.0)),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.dim()
    }

    pub fn mat(&self) -> &CMat {
        &self.mat
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.mat.get(i, j)
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace().re
    }

    pub fn purity(&self) -> f64 {
        self.mat.matmul(&self.mat).trace().re
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.mat.eigh().0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Physical = unit trace and no eigenvalue below the floor.
    pub fn is_physical(&self, tol: &Tolerances) -> bool {
        (self.trace() - 1.0).abs() <= tol.trace
            && self.min_eigenvalue() >= -tol.eigenvalue_floor
    }
}

/// Real d x d image of a Hermitian matrix: diagonal = populations, upper
/// triangle = real parts, lower triangle = imaginary parts of the upper
/// triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianRealImage {
    dim: usize,
    /// Row-major entries.
    entries: Vec<f64>,
}

impl HermitianRealImage {
    pub fn from_entries(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if entries.len() != dim * dim {
            return Err(Error::invalid(format!(
                "expected {} entries for a {dim}x{dim} image, got {}",
                dim * dim,
                entries.len()
            )));
        }
        Ok(HermitianRealImage { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    /// Row-major vectorization; this fixed order is the token channel order
    /// used everywhere else in the crate.
    pub fn to_vec(&self) -> &[f64] {
        &self.entries
    }
}

/// Bloch-sphere coordinates of a qubit state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlochVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BlochVector {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Map a Hermitian density matrix to its real image: diagonal copied,
/// (i<j) entries carry Re(rho_ij), (i>j) entries carry Im(rho_ji).
pub fn hermitian_encode(rho: &DensityMatrix) -> HermitianRealImage {
    let d = rho.dim();
    let mut entries = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            entries[i * d + j] = if i == j {
                rho.get(i, i).re
            } else if i < j {
                rho.get(i, j).re
            } else {
                rho.get(j, i).im
            };
        }
    }
    HermitianRealImage { dim: d, entries }
}

/// Inverse of [`hermitian_encode`]; the output is exactly Hermitian by
/// construction for arbitrary real input.
pub fn hermitian_decode(image: &HermitianRealImage) -> DensityMatrix {
    let d = image.dim;
    let mut m = CMat::zeros(d);
    for i in 0..d {
        m.set(i, i, C64::new(image.get(i, i), 0.0));
        for j in (i + 1)..d {
            let v = C64::new(image.get(i, j), image.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v.conj());
        }
    }
    DensityMatrix { mat: m }
}

/// Clip negative eigenvalues to zero and renormalize to unit trace.
/// Physical states are fixed points.
pub fn psd_project(rho: &DensityMatrix) -> Result<DensityMatrix> {
    let (vals, vecs) = rho.mat.eigh();
    let clipped_trace: f64 = vals.iter().map(|&v| v.max(0.0)).sum();
    if clipped_trace <= 0.0 {
        return Err(Error::numerical(
            "psd projection degenerate: no positive eigenvalue mass",
        ));
    }
    let mat = CMat::from_eigh(&vals, &vecs, |v| v.max(0.0) / clipped_trace);
    Ok(DensityMatrix { mat })
}

/// Uhlmann fidelity (Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2 via
/// eigendecomposition-based square roots. Inputs are expected PSD and
/// trace-normalized; eigenvalues below -1e-7 are a domain error, small
/// negative dust is clipped.
pub fn fidelity(rho_true: &DensityMatrix, rho_pred: &DensityMatrix) -> Result<f64> {
    if rho_true.dim() != rho_pred.dim() {
        return Err(Error::invalid("fidelity: dimension mismatch"));
    }
    let sqrt_true = {
        let (vals, vecs) = rho_true.mat.eigh();
        check_psd(&vals)?;
        CMat::from_eigh(&vals, &vecs, |v| v.max(0.0).sqrt())
    };
    let inner = sqrt_true.matmul(&rho_pred.mat).matmul(&sqrt_true);
    let (vals, _) = inner.symmetrize().eigh();
    check_psd(&vals)?;
    let sum_sqrt: f64 = vals.iter().map(|&v| v.max(0.0).sqrt()).sum();
    Ok((sum_sqrt * sum_sqrt).min(1.0))
}

fn check_psd(vals: &[f64]) -> Result<()> {
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-7 {
        return Err(Error::numerical(format!(
            "state has eigenvalue {min:.3e} below the PSD tolerance; project first"
        )));
    }
    Ok(())
}

/// |Tr rho - 1|.
pub fn trace_deviation(rho: &DensityMatrix) -> f64 {
    (rho.trace() - 1.0).abs()
}

/// Pure qubit state drawn uniformly (Haar) on the Bloch sphere.
pub fn haar_pure_state<R: Rng>(rng: &mut R) -> DensityMatrix {
    let z: f64 = 1.0 - 2.0 * rng.gen::<f64>();
    let phi: f64 = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    let theta = z.acos();
    let a = C64::new((theta / 2.0).cos(), 0.0);
    let b = C64::from_polar((theta / 2.0).sin(), phi);
    DensityMatrix::pure_state(&[a, b]).expect("haar state is normalized")
}

/// Bloch coordinates (x, y, z) = (2 Re rho01, -2 Im rho01, rho00 - rho11).
pub fn bloch_vector(rho: &DensityMatrix) -> Result<BlochVector> {
    if rho.dim() != 2 {
        return Err(Error::invalid("bloch_vector requires a 2x2 state"));
    }
    let r01 = rho.get(0, 1);
    Ok(BlochVector {
        x: 2.0 * r01.re,
        y: -2.0 * r01.im,
        z: rho.get(0, 0).re - rho.get(1, 1).re,
    })
}
