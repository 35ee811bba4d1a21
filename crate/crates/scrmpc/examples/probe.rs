use nalgebra::DVector;
use scrmpc::conic::ClarabelBackend;
use scrmpc::scenario::{bang_bang_schedule, Scenario};
use scrmpc::scr::scr_solve;

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let scenario = Scenario::load(&path).unwrap();
    let (problem, options) = scenario.build().unwrap();
    let horizon = problem.model.horizon();
    let m = problem.model.dims().m;

    for (name, seed) in [
        ("zero", vec![DVector::zeros(m); horizon]),
        ("bang", bang_bang_schedule(horizon, &[15.0, 0.75], &[-15.0, -0.75])),
        ("fwd", vec![DVector::from_row_slice(&[15.0, 0.9]); horizon]),
    ] {
        match scr_solve(&problem, &seed, &options, &ClarabelBackend) {
            Ok(cert) => {
                let end = cert.nominal_states.last().unwrap();
                println!(
                    "{name}: status {:?} iters {} cost {:.1} endpos ({:.1},{:.1}) v_end {:.2}",
                    cert.status, cert.iterations, cert.cost_upper, end[0], end[1], end[2]
                );
            }
            Err(e) => println!("{name}: error {e}"),
        }
    }
}
