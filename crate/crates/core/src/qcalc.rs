//! Quantum-state arithmetic for Werner-parameterised Bell pairs.
//!
//! Every link in the simulator is a Werner state and therefore fully described
//! by a single fidelity. The hot path uses [`swap_fidelity_closed`]; the
//! density-matrix route in [`swap_fidelity_oracle`] runs the actual four-qubit
//! swap circuit and exists to pin the closed form down.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

/// Tolerance used when comparing the closed-form swap against the circuit.
pub const ORACLE_TOL: f64 = 1e-9;
/// Tolerance for exact algebraic identities and density-matrix invariants.
pub const ALGEBRA_TOL: f64 = 1e-12;
/// Smallest eigenvalue still accepted as positive semidefinite.
pub const PSD_TOL: f64 = 1e-10;

/// Baseline fidelity below which a pair is useless.
pub const BASELINE_FIDELITY: f64 = 0.5;
/// Stretch exponent of the memory decay curve.
pub const DEFAULT_STRETCH: f64 = 2.2;
/// Coherence time with a single decoupling pulse, in seconds.
pub const T2_BASE_SECONDS: f64 = 0.042;
/// Default scaling exponent of the coherence time with the pulse count.
pub const DEFAULT_T2_EXPONENT: f64 = 2.0 / 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QcalcError {
    #[error("{name} = {value} outside [{lo}, {hi}]")]
    Domain {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("density matrix invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, QcalcError>;

fn check_range(name: &'static str, value: f64, lo: f64, hi: f64) -> Result<f64> {
    if value.is_finite() && value >= lo && value <= hi {
        Ok(value)
    } else {
        Err(QcalcError::Domain {
            name,
            value,
            lo,
            hi,
        })
    }
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// The four Bell states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bell {
    PhiPlus,
    PhiMinus,
    PsiPlus,
    PsiMinus,
}

impl Bell {
    pub const ALL: [Bell; 4] = [Bell::PhiPlus, Bell::PhiMinus, Bell::PsiPlus, Bell::PsiMinus];

    /// State vector in the computational basis `|00>, |01>, |10>, |11>`.
    pub fn vector(self) -> DVector<Complex64> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let amps = match self {
            Bell::PhiPlus => [s, 0.0, 0.0, s],
            Bell::PhiMinus => [s, 0.0, 0.0, -s],
            Bell::PsiPlus => [0.0, s, s, 0.0],
            Bell::PsiMinus => [0.0, s, -s, 0.0],
        };
        DVector::from_iterator(4, amps.into_iter().map(c))
    }
}

/// A density operator on `m` qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: DMatrix<Complex64>,
}

impl DensityMatrix {
    /// Wraps a matrix after checking the density-operator invariants.
    pub fn new(m: DMatrix<Complex64>) -> Result<Self> {
        let rho = Self { m };
        rho.check()?;
        Ok(rho)
    }

    /// `|psi><psi|` for a normalised state vector.
    pub fn pure(psi: &DVector<Complex64>) -> Result<Self> {
        let norm = psi.norm();
        if (norm - 1.0).abs() > ALGEBRA_TOL {
            return Err(QcalcError::Invariant(format!("state norm {norm} != 1")));
        }
        Self::new(psi * psi.adjoint())
    }

    /// `I / dim`.
    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            m: DMatrix::identity(dim, dim) * c(1.0 / dim as f64),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn qubits(&self) -> u32 {
        self.dim().trailing_zeros()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.m
    }

    pub fn trace(&self) -> Complex64 {
        self.m.trace()
    }

    /// Hermitian, unit trace and positive semidefinite.
    pub fn check(&self) -> Result<()> {
        let n = self.m.nrows();
        if n != self.m.ncols() || !n.is_power_of_two() || n < 2 {
            return Err(QcalcError::Invariant(format!(
                "dimension {}x{} is not 2^m square",
                n,
                self.m.ncols()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                if (self.m[(i, j)] - self.m[(j, i)].conj()).norm() > ALGEBRA_TOL {
                    return Err(QcalcError::Invariant(format!("not Hermitian at ({i},{j})")));
                }
            }
        }
        let tr = self.trace();
        if (tr - c(1.0)).norm() > ALGEBRA_TOL {
            return Err(QcalcError::Invariant(format!("trace {tr} != 1")));
        }
        let eig = self.m.clone().symmetric_eigen();
        if let Some(min) = eig.eigenvalues.iter().cloned().reduce(f64::min) {
            if min < -PSD_TOL {
                return Err(QcalcError::Invariant(format!("eigenvalue {min} < 0")));
            }
        }
        Ok(())
    }

    /// Matrix square root of the (PSD) operator, via its eigendecomposition.
    fn sqrt_psd(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let eig = m.clone().symmetric_eigen();
        let roots = eig.eigenvalues.map(|l| c(l.max(0.0).sqrt()));
        let v = &eig.eigenvectors;
        v * DMatrix::from_diagonal(&roots) * v.adjoint()
    }
}

/// Werner state `F |Phi+><Phi+| + (1-F)/3 (rest of the Bell basis)`.
pub fn werner_density(fidelity: f64) -> Result<DensityMatrix> {
    let f = check_range("fidelity", fidelity, 0.25, 1.0)?;
    let rest = (1.0 - f) / 3.0;
    let mut m = DMatrix::zeros(4, 4);
    for bell in Bell::ALL {
        let w = if bell == Bell::PhiPlus { f } else { rest };
        let v = bell.vector();
        m += &v * v.adjoint() * c(w);
    }
    Ok(DensityMatrix { m })
}

/// `<psi| rho |psi>`.
pub fn fidelity_to_pure(rho: &DensityMatrix, psi: &DVector<Complex64>) -> Result<f64> {
    if psi.len() != rho.dim() {
        return Err(QcalcError::Shape {
            expected: rho.dim(),
            got: psi.len(),
        });
    }
    let v = psi.adjoint() * rho.matrix() * psi;
    Ok(v[(0, 0)].re.clamp(0.0, 1.0))
}

/// Uhlmann fidelity `(Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2`.
pub fn uhlmann_fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(QcalcError::Shape {
            expected: rho.dim(),
            got: sigma.dim(),
        });
    }
    let sr = DensityMatrix::sqrt_psd(rho.matrix());
    let inner = &sr * sigma.matrix() * &sr;
    let root = DensityMatrix::sqrt_psd(&inner);
    Ok(root.trace().re.powi(2).clamp(0.0, 1.0))
}

/// Depolarisation strength that turns a pure `m`-qubit state into one with
/// fidelity `f`: `lambda = (1 - f) 2^m / (2^m - 1)`.
pub fn lambda_from_fidelity(f: f64, qubits: u32) -> Result<f64> {
    let dim = (1u64 << qubits) as f64;
    let f = check_range("fidelity", f, 1.0 / dim, 1.0)?;
    let lambda = (1.0 - f) * dim / (dim - 1.0);
    check_range("lambda", lambda, 0.0, 1.0)
}

/// `(1 - lambda) rho + lambda Tr[rho] I / 2^m`.
pub fn apply_depolarization(rho: &DensityMatrix, lambda: f64) -> Result<DensityMatrix> {
    let lambda = check_range("lambda", lambda, 0.0, 1.0)?;
    let n = rho.dim();
    let mixed = DMatrix::<Complex64>::identity(n, n) * (rho.trace() / c(n as f64));
    Ok(DensityMatrix {
        m: rho.matrix() * c(1.0 - lambda) + mixed * c(lambda),
    })
}

/// Mixes a two-qubit state with white noise according to the repeater's gate
/// fidelity: `f_gate rho + (1 - f_gate) I / 4`.
pub fn apply_gate_noise(rho: &DensityMatrix, f_gate: f64) -> Result<DensityMatrix> {
    let g = check_range("f_gate", f_gate, 0.0, 1.0)?;
    apply_depolarization(rho, 1.0 - g)
}

// Four-qubit register helpers for the swap circuit. Qubit 0 is the most
// significant bit of the basis index; the register order is A, C0, C1, B.
const A: usize = 0;
const C0: usize = 1;
const C1: usize = 2;
const B: usize = 3;
const NQ: usize = 4;

fn bit(index: usize, qubit: usize) -> usize {
    (index >> (NQ - 1 - qubit)) & 1
}

fn single_qubit_op(gate: [[f64; 2]; 2], target: usize) -> DMatrix<Complex64> {
    let n = 1 << NQ;
    DMatrix::from_fn(n, n, |row, col| {
        let mask = 1 << (NQ - 1 - target);
        if (row & !mask) != (col & !mask) {
            return c(0.0);
        }
        c(gate[bit(row, target)][bit(col, target)])
    })
}

fn cnot(control: usize, target: usize) -> DMatrix<Complex64> {
    let n = 1 << NQ;
    DMatrix::from_fn(n, n, |row, col| {
        let flipped = if bit(col, control) == 1 {
            col ^ (1 << (NQ - 1 - target))
        } else {
            col
        };
        c(if row == flipped { 1.0 } else { 0.0 })
    })
}

fn projector(qubit: usize, value: usize) -> DMatrix<Complex64> {
    let n = 1 << NQ;
    DMatrix::from_fn(n, n, |row, col| {
        c(if row == col && bit(row, qubit) == value {
            1.0
        } else {
            0.0
        })
    })
}

/// Traces out C0 and C1, leaving the 4x4 state of (A, B).
fn trace_out_repeater(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let mut out = DMatrix::zeros(4, 4);
    for row in 0..16 {
        for col in 0..16 {
            if bit(row, C0) != bit(col, C0) || bit(row, C1) != bit(col, C1) {
                continue;
            }
            let r = (bit(row, A) << 1) | bit(row, B);
            let cc = (bit(col, A) << 1) | bit(col, B);
            out[(r, cc)] += m[(row, col)];
        }
    }
    out
}

/// Runs the noisy swap circuit on density matrices and returns the output
/// fidelity with `|Phi+>`.
///
/// Two ideal Bell pairs (A, C0) and (C1, B) pass through two-qubit
/// depolarising channels matching `f1` and `f2`. The repeater applies
/// CNOT(C0 -> C1) and H(C0), measures both qubits, and B receives
/// `Z^c0 X^c1`. The outcome-averaged state of (A, B) is mixed with white
/// noise by `f_gate`.
pub fn swap_fidelity_oracle(f1: f64, f2: f64, f_gate: f64) -> Result<f64> {
    let rho_ab = swap_circuit_state(f1, f2, f_gate)?;
    fidelity_to_pure(&rho_ab, &Bell::PhiPlus.vector())
}

/// Output state of the swap circuit; see [`swap_fidelity_oracle`].
pub fn swap_circuit_state(f1: f64, f2: f64, f_gate: f64) -> Result<DensityMatrix> {
    check_range("f1", f1, 0.25, 1.0)?;
    check_range("f2", f2, 0.25, 1.0)?;
    check_range("f_gate", f_gate, 0.0, 1.0)?;
    let bell = DensityMatrix::pure(&Bell::PhiPlus.vector())?;
    let pair1 = apply_depolarization(&bell, lambda_from_fidelity(f1, 2)?)?;
    let pair2 = apply_depolarization(&bell, lambda_from_fidelity(f2, 2)?)?;
    let joint = pair1.matrix().kronecker(pair2.matrix());

    let s = std::f64::consts::FRAC_1_SQRT_2;
    let hadamard = single_qubit_op([[s, s], [s, -s]], C0);
    let pauli_x = single_qubit_op([[0.0, 1.0], [1.0, 0.0]], B);
    let pauli_z = single_qubit_op([[1.0, 0.0], [0.0, -1.0]], B);
    let id = DMatrix::<Complex64>::identity(16, 16);

    let u = &hadamard * cnot(C0, C1);
    let rotated = &u * joint * u.adjoint();

    let mut averaged = DMatrix::zeros(16, 16);
    for c0 in 0..2 {
        for c1 in 0..2 {
            let p = projector(C0, c0) * projector(C1, c1);
            let x = if c1 == 1 { pauli_x.clone() } else { id.clone() };
            let z = if c0 == 1 { pauli_z.clone() } else { id.clone() };
            let correction = z * x;
            let branch = &correction * &p * &rotated * &p * correction.adjoint();
            averaged += branch;
        }
    }
    let rho_ab = DensityMatrix::new(trace_out_repeater(&averaged))?;
    apply_gate_noise(&rho_ab, f_gate)
}

/// Closed form of the swap circuit on Werner inputs:
/// `f_gate (1/4 + (4 f1 - 1)(4 f2 - 1) / 12) + (1 - f_gate) / 4`.
pub fn swap_fidelity_closed(f1: f64, f2: f64, f_gate: f64) -> Result<f64> {
    check_range("f1", f1, 0.25, 1.0)?;
    check_range("f2", f2, 0.25, 1.0)?;
    check_range("f_gate", f_gate, 0.0, 1.0)?;
    Ok(swap_unchecked(f1, f2, f_gate))
}

#[inline]
pub(crate) fn swap_unchecked(f1: f64, f2: f64, f_gate: f64) -> f64 {
    f_gate * (0.25 + (4.0 * f1 - 1.0) * (4.0 * f2 - 1.0) / 12.0) + (1.0 - f_gate) / 4.0
}

/// Parameters of the stretched-exponential memory decay.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecayParams {
    pub initial_fidelity: f64,
    pub baseline: f64,
    pub stretch: f64,
    pub pulses: u32,
    pub t2_exponent: f64,
    pub t2_base: f64,
}

impl DecayParams {
    pub fn new(initial_fidelity: f64, pulses: u32) -> Self {
        Self {
            initial_fidelity,
            baseline: BASELINE_FIDELITY,
            stretch: DEFAULT_STRETCH,
            pulses,
            t2_exponent: DEFAULT_T2_EXPONENT,
            t2_base: T2_BASE_SECONDS,
        }
    }

    pub fn t2(&self) -> Result<f64> {
        t2_from_pulses(self.pulses, self.t2_exponent, self.t2_base)
    }
}

/// `T2 = t2_base * n_dec^beta`.
pub fn t2_from_pulses(pulses: u32, exponent: f64, t2_base: f64) -> Result<f64> {
    if pulses < 1 {
        return Err(QcalcError::Domain {
            name: "n_dec",
            value: pulses as f64,
            lo: 1.0,
            hi: f64::INFINITY,
        });
    }
    Ok(t2_base * (pulses as f64).powf(exponent))
}

/// `F(t) = (F0 - F_B) exp(-(t / T2)^k) + F_B`.
pub fn decay_fidelity(params: &DecayParams, t: f64) -> Result<f64> {
    let t = check_range("t", t, 0.0, f64::INFINITY)?;
    let t2 = params.t2()?;
    Ok(stretched_decay(
        params.initial_fidelity,
        params.baseline,
        t / t2,
        params.stretch,
    ))
}

#[inline]
pub(crate) fn stretched_decay(f0: f64, baseline: f64, ratio: f64, stretch: f64) -> f64 {
    (f0 - baseline) * (-ratio.powf(stretch)).exp() + baseline
}

/// Result of [`max_sequential_swaps`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwapLimit {
    Bounded(u32),
    Unbounded,
}

/// Number of sequential swaps along a homogeneous path before the running
/// fidelity drops to `threshold`.
///
/// The running fidelity follows `F <- swap(F, f_init, f_gate)` starting from
/// `F = f_init`. That map is affine with slope `f_gate (4 f_init - 1) / 3`
/// and fixed point `1/4` unless the slope is one, so the iteration always
/// terminates when the fixed point lies below the threshold.
pub fn max_sequential_swaps(f_init: f64, f_gate: f64, threshold: f64) -> Result<SwapLimit> {
    check_range("f_init", f_init, 0.25, 1.0)?;
    check_range("f_gate", f_gate, 0.0, 1.0)?;
    check_range("threshold", threshold, 0.0, 1.0)?;
    if f_init <= threshold {
        return Ok(SwapLimit::Bounded(0));
    }
    let slope = f_gate * (4.0 * f_init - 1.0) / 3.0;
    if slope >= 1.0 {
        // f_init == 1 and f_gate == 1: the map is the identity.
        return Ok(SwapLimit::Unbounded);
    }
    let fixed_point = 0.25;
    if fixed_point > threshold {
        return Ok(SwapLimit::Unbounded);
    }
    let mut f = f_init;
    let mut n = 0u32;
    loop {
        f = swap_unchecked(f, f_init, f_gate);
        if f <= threshold {
            return Ok(SwapLimit::Bounded(n));
        }
        n += 1;
    }
}

/// One round of the Werner recurrence distillation protocol on two pairs.
///
/// Returns `(output fidelity, success probability)`.
pub fn distill_pair(f1: f64, f2: f64) -> Result<(f64, f64)> {
    for (name, f) in [("f1", f1), ("f2", f2)] {
        if !(f.is_finite() && f > BASELINE_FIDELITY && f <= 1.0) {
            return Err(QcalcError::Domain {
                name,
                value: f,
                lo: BASELINE_FIDELITY,
                hi: 1.0,
            });
        }
    }
    let (g1, g2) = (1.0 - f1, 1.0 - f2);
    let p = f1 * f2 + f1 * g2 / 3.0 + f2 * g1 / 3.0 + 5.0 * g1 * g2 / 9.0;
    let f_out = (f1 * f2 + g1 * g2 / 9.0) / p;
    Ok((f_out, p))
}
