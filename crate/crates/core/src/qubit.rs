//! Driven dissipative single-qubit simulator and dataset generator.
//!
//! The qubit evolves under a resonant rotating-frame drive
//! `H(t) = (Omega phi(t) / 2) sigma_x` with a sigmoidal turn-off profile
//! `phi(t)` and a single amplitude-damping channel. Times are in trajectory
//! units: the full evolution window is `[0, 1]`.

use crate::error::{Error, Result};
use crate::qstate::{haar_pure_state, CMat, Channel, DensityMatrix, C64, TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Drive amplitude giving three full Rabi oscillations on the unit window:
/// population follows sin^2(Omega t / 2) = sin^2(3 pi t).
pub const RABI_AMPLITUDE: f64 = 6.0 * std::f64::consts::PI;

/// Damping rate such that the excited population decays to 10% of its
/// initial value over the unit window: exp(-gamma) = 0.1.
pub const DAMPING_RATE: f64 = std::f64::consts::LN_10;

/// Default logistic steepness of the control edge, per unit time.
pub const CONTROL_STEEPNESS: f64 = 60.0;

pub const N_STEPS: usize = 240;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QubitSimConfig {
    pub n_steps: usize,
    /// Stored-grid spacing; n_steps * dt must equal the unit window.
    pub dt: f64,
    pub rabi_amplitude: f64,
    pub damping_rate: f64,
    pub control_steepness: f64,
    pub t_off: f64,
    /// Internal 4th-order substeps per stored step.
    pub substeps: usize,
}

impl Default for QubitSimConfig {
    fn default() -> Self {
        QubitSimConfig {
            n_steps: N_STEPS,
            dt: 1.0 / N_STEPS as f64,
            rabi_amplitude: RABI_AMPLITUDE,
            damping_rate: DAMPING_RATE,
            control_steepness: CONTROL_STEEPNESS,
            t_off: 0.5,
            substeps: 8,
        }
    }
}

impl QubitSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.substeps == 0 {
            return Err(Error::invalid("step counts must be positive"));
        }
        if ((self.n_steps as f64 * self.dt) - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("n_steps * dt must equal the unit window"));
        }
        if self.rabi_amplitude < 0.0 || self.damping_rate < 0.0 {
            return Err(Error::invalid("rates must be non-negative"));
        }
        if self.control_steepness <= 0.0 {
            return Err(Error::invalid("control steepness must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct QubitTrajectory {
    /// State at the end of each stored step, t_k = (k+1) dt, k = 0..n_steps-1.
    /// The last entry is exactly the end of the unit window.
    pub states: Vec<DensityMatrix>,
    /// Control value phi(t_k) on the same grid.
    pub control: Vec<f64>,
    pub t_off: f64,
    pub initial_state: DensityMatrix,
}

/// Logistic edge profile in [0, 1]; value 1/2 exactly at `t_edge`.
/// The falling variant goes 1 -> 0 around the edge, the rising one 0 -> 1.
pub fn sigmoid_control(t: f64, t_edge: f64, steepness: f64, rising: bool) -> f64 {
    let x = steepness * (t - t_edge);
    if rising {
        1.0 / (1.0 + (-x).exp())
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// Right-hand side of the master equation:
/// -i[H, rho] + sum_j gamma_j (L_j rho L_j^dag - 1/2 {L_j^dag L_j, rho}).
/// The output is traceless and Hermitian.
pub fn lindblad_rhs(rho: &CMat, h: &CMat, channels: &[Channel]) -> Result<CMat> {
    if h.dim() != rho.dim() {
        return Err(Error::invalid("lindblad_rhs: dimension mismatch"));
    }
    let mut out = h.commutator(rho).scale(C64::new(0.0, -1.0));
    for ch in channels {
        if ch.op.dim() != rho.dim() {
            return Err(Error::invalid("lindblad_rhs: channel dimension mismatch"));
        }
        let l_rho_ldag = ch.op.matmul(rho).matmul(&ch.op.dagger());
        let ldag_l = ch.op.dagger().matmul(&ch.op);
        let anti = ldag_l.anticommutator(rho).scale(C64::new(0.5, 0.0));
        out = out.add(&l_rho_ldag.sub(&anti).scale(C64::new(ch.rate, 0.0)));
    }
    Ok(out)
}

fn qubit_hamiltonian(cfg: &QubitSimConfig, t: f64) -> CMat {
    let phi = sigmoid_control(t, cfg.t_off, cfg.control_steepness, false);
    let coupling = C64::new(cfg.rabi_amplitude * phi / 2.0, 0.0);
    let mut h = CMat::zeros(2);
    h.set(0, 1, coupling);
    h.set(1, 0, coupling);
    h
}

fn amplitude_damping(rate: f64) -> Channel {
    Channel { rate, op: CMat::ket_bra(2, 0, 1) }
}

/// One classical 4th-order step of d rho/dt = f(t, rho).
fn rk4_step<F: Fn(f64, &CMat) -> CMat>(f: &F, t: f64, rho: &CMat, h: f64) -> CMat {
    let half = C64::new(h / 2.0, 0.0);
    let full = C64::new(h, 0.0);
    let k1 = f(t, rho);
    let k2 = f(t + h / 2.0, &rho.add(&k1.scale(half)));
    let k3 = f(t + h / 2.0, &rho.add(&k2.scale(half)));
    let k4 = f(t + h, &rho.add(&k3.scale(full)));
    let sum = k1
        .add(&k2.scale(C64::new(2.0, 0.0)))
        .add(&k3.scale(C64::new(2.0, 0.0)))
        .add(&k4);
    rho.add(&sum.scale(C64::new(h / 6.0, 0.0)))
}

/// Integrate the driven dissipative qubit over the unit window, storing the
/// state at the end of each of the `n_steps` uniform steps.
pub fn evolve_qubit(init: &DensityMatrix, cfg: &QubitSimConfig) -> Result<QubitTrajectory> {
    cfg.validate()?;
    if init.dim() != 2 {
        return Err(Error::invalid("qubit initial state must be 2x2"));
    }
    if !init.is_physical(&TOL) {
        return Err(Error::invalid("initial state is not physical"));
    }
    let channels = [amplitude_damping(cfg.damping_rate)];
    let f = |t: f64, rho: &CMat| {
        lindblad_rhs(rho, &qubit_hamiltonian(cfg, t), &channels)
            .expect("dimensions are fixed")
    };
    let h = cfg.dt / cfg.substeps as f64;
    let mut rho = init.mat().clone();
    let mut states = Vec::with_capacity(cfg.n_steps);
    let mut control = Vec::with_capacity(cfg.n_steps);
    for step in 0..cfg.n_steps {
        for sub in 0..cfg.substeps {
            let t = step as f64 * cfg.dt + sub as f64 * h;
            rho = rk4_step(&f, t, &rho, h);
        }
        rho = rho.symmetrize();
        let t_k = (step + 1) as f64 * cfg.dt;
        states.push(DensityMatrix::from_symmetrized(rho.clone()));
        control.push(sigmoid_control(t_k, cfg.t_off, cfg.control_steepness, false));
    }
    Ok(QubitTrajectory {
        states,
        control,
        t_off: cfg.t_off,
        initial_state: init.clone(),
    })
}

/// One split of the qubit data-generating process.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QubitSplitSpec {
    pub label: String,
    pub count: usize,
    pub t_off_mean: f64,
    pub t_off_std: f64,
}

/// Full-scale split layout: ID train/val/test plus shifted test sets with
/// the t_off mean moved by k standard deviations.
pub fn qubit_default_splits(ood_level: Option<usize>) -> Vec<QubitSplitSpec> {
    match ood_level {
        None => vec![
            QubitSplitSpec { label: "train".into(), count: 700, t_off_mean: 0.5, t_off_std: 0.05 },
            QubitSplitSpec { label: "val".into(), count: 150, t_off_mean: 0.5, t_off_std: 0.05 },
            QubitSplitSpec { label: "test".into(), count: 100, t_off_mean: 0.5, t_off_std: 0.05 },
        ],
        Some(k) => {
            assert!((1..=3).contains(&k), "qubit shifts go up to 3 sigma");
            let mean = 0.5 + 0.05 * k as f64;
            vec![QubitSplitSpec {
                label: format!("ood{k}"),
                count: 100,
                t_off_mean: mean,
                t_off_std: 0.05,
            }]
        }
    }
}

/// Sampled per-trajectory parameters, reproducible from the recorded seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QubitSampleParams {
    pub t_off: f64,
    pub sample_seed: u64,
}

/// Derive an independent seed stream from the dataset seed; splitmix64
/// mixing keeps streams independent of generation order.
pub fn derive_seed(base: u64, lane: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(lane.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Draw t_off from the split Gaussian, resampling until it falls inside the
/// simulated window [0, 1].
pub fn sample_t_off<R: Rng>(rng: &mut R, mean: f64, std: f64) -> f64 {
    let normal = Normal::new(mean, std).expect("valid gaussian");
    loop {
        let v = normal.sample(rng);
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
}

/// Sample parameters and the Haar initial state for one trajectory.
pub fn sample_qubit_trajectory_inputs(
    split: &QubitSplitSpec,
    sample_seed: u64,
) -> (QubitSampleParams, DensityMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let t_off = sample_t_off(&mut rng, split.t_off_mean, split.t_off_std);
    let init = haar_pure_state(&mut rng);
    (QubitSampleParams { t_off, sample_seed }, init)
}
