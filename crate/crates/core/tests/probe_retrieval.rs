//! Temporary diagnostic: dump retrieval series shapes.

mod gates;
use gates::*;

#[test]
#[ignore]
fn dump_slow_light() {
    use oqs_core::eit::{self, DecoherenceConfig, EitGrid, EitSolverConfig, EitTiming, InitialPopulation};
    let params = eit_params();
    let grid = EitGrid { n_t_uniform: 512, crop_t: 120, ..EitGrid::default() };
    for width in [1.2e-6, 0.8e-6] {
        let solver = EitSolverConfig { probe_width: width, ..EitSolverConfig::default() };
        let sol = eit::simulate_eit(
            &params,
            &grid,
            &EitTiming::control_always_on(2.0e-6),
            &DecoherenceConfig::off(),
            &solver,
            InitialPopulation::Ground,
        )
        .unwrap();
        println!("width {:.1} us:", width * 1e6);
        for z in [0usize, 10, 20, 40, 64, 99] {
            let series = sol.field_abs_series(z);
            let (idx, t) = peak_time(&series, &sol.times, 0);
            println!("  z {}: peak at {:.3} us (value {:.3e})", z, t * 1e6, series[idx]);
        }
        let series = sol.field_abs_series(64);
        let m: f64 = series.iter().cloned().fold(0.0, f64::max);
        let line: String = series
            .iter()
            .step_by(8)
            .map(|&v| {
                let level = (v / m * 9.0) as usize;
                char::from_digit(level as u32, 10).unwrap_or('9')
            })
            .collect();
        println!("  |E|(z=64): {line}");
    }
}

#[test]
#[ignore]
fn dump_spatial_profiles() {
    use oqs_core::eit::{self, DecoherenceConfig, EitGrid, EitSolverConfig, EitTiming, InitialPopulation};
    let params = eit_params();
    let grid = EitGrid { n_t_uniform: 512, crop_t: 120, ..EitGrid::default() };
    let sol = eit::simulate_eit(
        &params,
        &grid,
        &EitTiming::control_always_on(2.0e-6),
        &DecoherenceConfig::off(),
        &EitSolverConfig::default(),
        InitialPopulation::Ground,
    )
    .unwrap();
    for target in [2.0e-6, 2.5e-6, 3.0e-6, 3.5e-6] {
        let ti = sol.times.iter().position(|&t| t >= target).unwrap();
        let re: Vec<f64> = (0..100).map(|z| sol.field_at(ti, z).re).collect();
        let m = re.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
        let line: String = re
            .iter()
            .map(|&v| {
                let lv = (v / m * 4.0).round() as i32; // -4..4
                match lv {
                    -4 => 'D',
                    -3 => 'C',
                    -2 => 'B',
                    -1 => 'A',
                    0 => '.',
                    1 => '1',
                    2 => '2',
                    3 => '3',
                    _ => '4',
                }
            })
            .collect();
        println!("t={:.2}us max={:.2e} Re(E)(z): {line}", target * 1e6, m);
        // zigzag indicator: mean |f[z+1]-f[z]| vs mean |f|
        let dsum: f64 = (0..99).map(|z| (re[z + 1] - re[z]).abs()).sum::<f64>() / 99.0;
        let asum: f64 = re.iter().map(|v| v.abs()).sum::<f64>() / 100.0;
        println!("   mean |df|/|f| = {:.3}", dsum / asum.max(1e-300));
    }
}

#[test]
#[ignore]
fn dump_retrieval_series() {
    let mut peaks = Vec::new();
    for t_on in [3.7e-6, 4.0e-6, 4.3e-6, 4.6e-6] {
        let sol = storage_run(2.0e-6, t_on, false, 512);
        let series = sol.field_abs_series(64);
        let (idx, t) = peak_time(&series, &sol.times, 0);
        peaks.push(t);
        println!(
            "t_on {:.1} us, z 64: peak at {:.3} us (value {:.3e})",
            t_on * 1e6,
            t * 1e6,
            series[idx]
        );
        let m: f64 = series.iter().cloned().fold(0.0, f64::max);
        let line: String = series
            .iter()
            .step_by(8)
            .map(|&v| {
                let level = (v / m * 9.0) as usize;
                char::from_digit(level as u32, 10).unwrap_or('9')
            })
            .collect();
        println!("  |E|(z=64) profile: {line}");
    }
    for w in peaks.windows(2) {
        println!("  shift: {:.3} us", (w[1] - w[0]) * 1e6);
    }
}
