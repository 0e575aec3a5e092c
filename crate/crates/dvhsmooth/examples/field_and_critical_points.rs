//! Build the two reference dose fields, evaluate them with exact
//! derivatives, and find and classify every critical point.
//!
//! ```bash
//! cargo run --release --example field_and_critical_points
//! ```

use dvhsmooth::dose_model::{
    eval, find_critical_points, gradient_x, hessian_x, track_critical_value, PeakFamily,
};
use dvhsmooth::histogram::Region;

fn main() {
    let single = PeakFamily::single_peak();
    let two = PeakFamily::two_peak();
    let search = Region::new_box([-8.0; 3], [8.0; 3]).unwrap();

    println!("single peak at the origin:");
    println!("  f(0,0,0)   = {}", eval(&single, &[1.0], &[0.0; 3]).unwrap());
    println!("  f(1,0,0)   = {}", eval(&single, &[1.0], &[1.0, 0.0, 0.0]).unwrap());
    println!(
        "  grad(1,0,0) = {:?}",
        gradient_x(&single, &[1.0], &[1.0, 0.0, 0.0]).unwrap()
    );
    println!(
        "  hess(0,0,0) diagonal = {:?}",
        hessian_x(&single, &[1.0], &[0.0; 3])
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, row)| row[i])
            .collect::<Vec<_>>()
    );

    println!("\ncritical points of the two-peak field (weights 1, 1):");
    for cp in find_critical_points(&two, &[1.0, 1.0], &search, 8).unwrap() {
        let kind = match cp.morse_signature {
            (0, 3) => "maximum",
            (3, 0) => "minimum",
            _ => "saddle",
        };
        println!(
            "  {kind:8} at ({:7.4}, {:6.3}, {:6.3})  value {:.6}  signature {:?}",
            cp.location[0], cp.location[1], cp.location[2], cp.value, cp.morse_signature
        );
    }

    println!("\nsecondary maximum tracked as the second weight varies:");
    let grid: Vec<f64> = (0..=8).map(|i| 0.6 + i as f64 * 0.1).collect();
    for (w2, value) in
        track_critical_value(&two, |t| vec![1.0, t], 1, &grid, &search).unwrap()
    {
        println!("  w2 = {w2:.2}  ->  critical value {value:.6}");
    }
}
