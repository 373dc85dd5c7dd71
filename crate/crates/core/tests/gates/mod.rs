//! Gate implementations shared by the acceptance test binary.

use oqs_core::eit::{
    self, DecoherenceConfig, EitGrid, EitPhysicalParams, EitSolverConfig, EitTiming,
    InitialPopulation, RawEitConfig,
};
use oqs_core::qstate::{CMat, DensityMatrix, C64};
use oqs_core::qubit::{self, QubitSimConfig};
use std::sync::Mutex;

/// Serializes the compute-heavy gates.
pub static HEAVY: Mutex<()> = Mutex::new(());

pub fn pass(gate: &str, detail: String) {
    println!("PASS {gate}: {detail}");
}

pub fn gate01_qubit_analytic_limits() {
    // pure decay: rho11(1) = 0.100 +- 1e-4 with gamma = ln 10
    let decay_cfg = QubitSimConfig { rabi_amplitude: 0.0, ..QubitSimConfig::default() };
    let traj = qubit::evolve_qubit(&DensityMatrix::basis_state(2, 1), &decay_cfg).unwrap();
    let p11_final = traj.states.last().unwrap().get(1, 1).re;
    assert!(
        (p11_final - 0.1).abs() < 1e-4,
        "gate 1: rho11(1) = {p11_final}, expected 0.100 +- 1e-4"
    );

    // pure Rabi: population matches sin^2(3 pi t) to 1e-6
    let rabi_cfg = QubitSimConfig {
        damping_rate: 0.0,
        t_off: 10.0,
        ..QubitSimConfig::default()
    };
    let traj = qubit::evolve_qubit(&DensityMatrix::basis_state(2, 0), &rabi_cfg).unwrap();
    let mut max_err: f64 = 0.0;
    for (k, state) in traj.states.iter().enumerate() {
        let t = (k + 1) as f64 * rabi_cfg.dt;
        let analytic = (3.0 * std::f64::consts::PI * t).sin().powi(2);
        max_err = max_err.max((state.get(1, 1).re - analytic).abs());
    }
    assert!(max_err < 1e-6, "gate 1: max Rabi deviation {max_err:.3e}");

    pass(
        "gate 1 (qubit analytic limits)",
        format!("decay endpoint {p11_final:.6}, max Rabi deviation {max_err:.2e}"),
    );
}

pub fn eit_params() -> EitPhysicalParams {
    eit::derive_physical_params(&RawEitConfig::default()).unwrap()
}

/// Default-resolution storage-protocol run.
pub fn storage_run(
    t0: f64,
    t_on: f64,
    decoherence: bool,
    n_t_uniform: usize,
) -> eit::EitSolution {
    let params = eit_params();
    let grid = EitGrid { n_t_uniform, crop_t: n_t_uniform.min(120), ..EitGrid::default() };
    let timing = EitTiming::storage(t0, t_on);
    let deco = if decoherence { DecoherenceConfig::on() } else { DecoherenceConfig::off() };
    eit::simulate_eit(
        &params,
        &grid,
        &timing,
        &deco,
        &EitSolverConfig::default(),
        InitialPopulation::Ground,
    )
    .unwrap()
}

pub fn gate02_trace_positivity() {
    let _lock = HEAVY.lock().unwrap();
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4242);

    // 50 random qubit trajectories
    let mut worst_trace: f64 = 0.0;
    let mut worst_eig: f64 = 0.0;
    for _ in 0..50 {
        let init = oqs_core::qstate::haar_pure_state(&mut rng);
        let cfg = QubitSimConfig { t_off: rng.gen_range(0.2..0.8), ..QubitSimConfig::default() };
        let traj = qubit::evolve_qubit(&init, &cfg).unwrap();
        for s in &traj.states {
            worst_trace = worst_trace.max((s.trace() - 1.0).abs());
            worst_eig = worst_eig.min(s.min_eigenvalue());
        }
    }
    assert!(worst_trace < 1e-8, "gate 2: qubit trace deviation {worst_trace:.3e}");
    assert!(worst_eig >= -1e-9, "gate 2: qubit eigenvalue floor {worst_eig:.3e}");

    // 5 EIT trajectories across the sampling range (decoherence-free)
    let timings = [
        (2.00e-6, 4.0e-6),
        (1.95e-6, 3.7e-6),
        (2.05e-6, 4.3e-6),
        (2.00e-6, 4.6e-6),
        (1.90e-6, 5.5e-6),
    ];
    let mut worst_trace_eit: f64 = 0.0;
    let mut worst_eig_eit: f64 = 0.0;
    for (t0, t_on) in timings {
        let sol = storage_run(t0, t_on, false, 128);
        for rho in &sol.rho {
            worst_trace_eit = worst_trace_eit.max((rho.trace() - 1.0).abs());
            worst_eig_eit = worst_eig_eit.min(rho.min_eigenvalue());
        }
    }
    assert!(
        worst_trace_eit < 1e-8,
        "gate 2: EIT trace deviation {worst_trace_eit:.3e}"
    );
    assert!(
        worst_eig_eit >= -1e-7,
        "gate 2: EIT eigenvalue floor {worst_eig_eit:.3e}"
    );

    pass(
        "gate 2 (trace/positivity)",
        format!(
            "qubit: |dTr| {worst_trace:.1e}, min eig {worst_eig:.1e}; \
             EIT: |dTr| {worst_trace_eit:.1e}, min eig {worst_eig_eit:.1e}"
        ),
    );
}

pub fn gate03_numerical_orders() {
    // ABM4 manufactured-solution convergence ratio in (12, 20)
    let g = 2.0e9;
    let a = 300.0;
    let run = |n: usize| -> f64 {
        let dz = 0.01 / (n - 1) as f64;
        let src: Vec<C64> = (0..n).map(|k| C64::new((a * k as f64 * dz).cos(), 0.0)).collect();
        let f = eit::propagate_field_abm4(&src, C64::new(1.0, 0.0), g, dz).unwrap();
        let mut max_err: f64 = 0.0;
        for (k, &fk) in f.iter().enumerate() {
            let z = k as f64 * dz;
            let exact = C64::new(1.0, 0.0) + C64::new(0.0, g) * ((a * z).sin() / a);
            max_err = max_err.max((fk - exact).norm() / exact.norm());
        }
        max_err
    };
    let ratio = run(51) / run(101);
    assert!((12.0..20.0).contains(&ratio), "gate 3: ABM4 ratio {ratio}");

    // ETD is exact on constant generators to 1e-12
    let p = eit_params();
    let channels = eit::eit_channels(&p, false);
    let l = eit::liouvillian(&CMat::zeros(3), &channels).unwrap();
    let rho = DensityMatrix::basis_state(3, 2);
    let mut max_etd_err: f64 = 0.0;
    for dt in [1e-10, 1e-9, 5e-9, 2.77e-8] {
        let out = eit::etd_step(&rho, &l, dt).unwrap();
        max_etd_err = max_etd_err.max((out.get(2, 2).re - (-p.gamma_spont * dt).exp()).abs());
    }
    assert!(max_etd_err < 1e-12, "gate 3: ETD decay error {max_etd_err:.3e}");

    // ETD vs fine 4th-order oracle under drive, 1 ns step
    let h = eit::lambda_hamiltonian(p.omega_c0, C64::new(0.8, 0.3) * p.omega_p0, 0.0, 0.0);
    let l = eit::liouvillian(&h, &channels).unwrap();
    let mut m = CMat::zeros(3);
    m.set(0, 0, C64::new(0.7, 0.0));
    m.set(1, 1, C64::new(0.2, 0.0));
    m.set(2, 2, C64::new(0.1, 0.0));
    m.set(0, 1, C64::new(0.1, 0.05));
    m.set(1, 0, C64::new(0.1, -0.05));
    let rho = DensityMatrix::from_symmetrized(m);
    let dt = 1e-9;
    let etd = eit::etd_step(&rho, &l, dt).unwrap();
    let mut v: Vec<C64> = rho.mat().data().to_vec();
    let n_sub = 100;
    let hstep = dt / n_sub as f64;
    for _ in 0..n_sub {
        let add = |base: &Vec<C64>, k: &Vec<C64>, s: f64| -> Vec<C64> {
            base.iter().zip(k).map(|(&b, &kk)| b + kk * s).collect()
        };
        let k1 = l.matvec(&v);
        let k2 = l.matvec(&add(&v, &k1, hstep / 2.0));
        let k3 = l.matvec(&add(&v, &k2, hstep / 2.0));
        let k4 = l.matvec(&add(&v, &k3, hstep));
        for i in 0..v.len() {
            v[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (hstep / 6.0);
        }
    }
    let oracle = CMat::from_slice(3, &v);
    let drive_err = etd.mat().sub(&oracle).max_abs();
    assert!(drive_err < 1e-8, "gate 3: ETD vs oracle {drive_err:.3e}");

    pass(
        "gate 3 (numerical orders)",
        format!(
            "ABM4 ratio {ratio:.1}, ETD decay err {max_etd_err:.1e}, \
             ETD drive err {drive_err:.1e}"
        ),
    );
}

/// Time of the global maximum of a series, restricted to indices >= from.
pub fn peak_time(series: &[f64], times: &[f64], from: usize) -> (usize, f64) {
    let mut best = from;
    for i in from..series.len() {
        if series[i] > series[best] {
            best = i;
        }
    }
    (best, times[best])
}

pub fn trapezoid_energy(series: &[f64], dt: f64) -> f64 {
    if series.len() < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..series.len() - 1 {
        let a = series[i] * series[i];
        let b = series[i + 1] * series[i + 1];
        acc += 0.5 * (a + b) * dt;
    }
    acc
}

pub fn gate04_eit_qualitative_physics() {
    let _lock = HEAVY.lock().unwrap();
    let fine = 512; // 14.6 ns output resolution for peak localization

    // (a) storage and retrieval emits an output peak after t_on. The readout
    // plane is z index 64: at ~2 km/s group velocity the retrieved pulse
    // reaches it inside the window for the sampled timings, while the cell
    // exit would be truncated.
    let z_read = 64;
    let base = storage_run(2.0e-6, 4.0e-6, false, fine);
    let series = base.field_abs_series(z_read);
    let (peak_idx, peak_t) = peak_time(&series, &base.times, 0);
    assert!(series[peak_idx] > 0.0, "gate 4a: no output field at all");
    assert!(
        peak_t > 4.0e-6,
        "gate 4a: output peak at {peak_t:.3e}, before t_on = 4.0e-6"
    );

    // (b) shifting t_on by +0.3 us shifts the retrieved peak by 0.3 +- 0.05 us
    let shifted = storage_run(2.0e-6, 4.3e-6, false, fine);
    let series_s = shifted.field_abs_series(z_read);
    let (_, peak_t_s) = peak_time(&series_s, &shifted.times, 0);
    let shift = peak_t_s - peak_t;
    assert!(
        (shift - 0.3e-6).abs() < 0.05e-6,
        "gate 4b: peak shift {shift:.3e} s, expected 0.3e-6 +- 0.05e-6"
    );

    // (c) decoherence reduces the retrieved energy on matched timing
    let deco = storage_run(2.0e-6, 4.0e-6, true, fine);
    let dt_grid = base.times[1] - base.times[0];
    let from = base.times.iter().position(|&t| t > 4.0e-6).unwrap();
    let energy_free = trapezoid_energy(&series[from..], dt_grid);
    let energy_deco = trapezoid_energy(&deco.field_abs_series(z_read)[from..], dt_grid);
    assert!(energy_free > 0.0, "gate 4c: no retrieved energy");
    assert!(
        energy_deco < energy_free,
        "gate 4c: decoherence-on energy {energy_deco:.3e} not below \
         decoherence-free {energy_free:.3e}"
    );

    // transmission sanity: control held on passes a delayed pulse with
    // bounded energy
    let through = {
        let params = eit_params();
        let grid = EitGrid { n_t_uniform: fine, crop_t: 120, ..EitGrid::default() };
        eit::simulate_eit(
            &params,
            &grid,
            &EitTiming::control_always_on(2.0e-6),
            &DecoherenceConfig::off(),
            &EitSolverConfig::default(),
            InitialPopulation::Ground,
        )
        .unwrap()
    };
    let z_end = through.grid.n_z - 1;
    let e_in = trapezoid_energy(&through.field_abs_series(0), dt_grid);
    let e_out = trapezoid_energy(&through.field_abs_series(z_end), dt_grid);
    let transmission = e_out / e_in;
    assert!(
        transmission > 0.0 && transmission <= 1.0,
        "gate 4: transmission {transmission}"
    );
    let (_, t_in) = peak_time(&through.field_abs_series(0), &through.times, 0);
    let (_, t_out) = peak_time(&through.field_abs_series(z_end), &through.times, 0);
    assert!(t_out > t_in, "gate 4: no positive group delay");

    pass(
        "gate 4 (EIT qualitative physics)",
        format!(
            "peak at {:.2} us (> t_on), shift {:.3} us, deco/free energy {:.3}, \
             transmission {:.3} with delay {:.2} us",
            peak_t * 1e6,
            shift * 1e6,
            energy_deco / energy_free,
            transmission,
            (t_out - t_in) * 1e6
        ),
    );
}
