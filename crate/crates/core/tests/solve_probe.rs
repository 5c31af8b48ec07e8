use std::time::Instant;
use strider_core::trajopt::library::*;

#[test]
fn try_cold() {
    let cfg = TrajoptConfig { time_budget_secs: 280.0, ..TrajoptConfig::default() };
    for speed in [1.0_f64, 2.5] {
        let t0 = Instant::now();
        let s = solve_turn(&cfg, speed, None).unwrap();
        println!(
            "cold speed {:.1}: status {:?} viol {:.2e} stat {:.2e} outer {} in {:.1?}",
            speed, s.solution.status, s.solution.max_violation, s.solution.stationarity,
            s.solution.outer_iterations, t0.elapsed()
        );
    }
}
