//! Regenerates the bundled fixtures in `crates/cli/fixtures`.
//!
//! `signature.csv` holds scalar curves simulated from the reference
//! scenario; `paths.csv` holds 3-D reaching paths over two distances and
//! three target heights recorded at 30 Hz.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use tms_core::data::{write_samples_csv, write_trajectories_csv, Channels, FunctionalSample, RawTrajectory};
use tms_core::simulate::{simulate_dataset, SimDesign, Truth};

const RATE: f64 = 30.0;
const NOISE_CM: f64 = 0.002;

fn min_jerk(s: f64) -> f64 {
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

fn reach(rng: &mut ChaCha20Rng, distance: f64, height: f64, style: &[f64; 3]) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let duration = (0.9 + 0.004 * distance + style[0] + 0.03 * n01.sample(rng)).max(0.5);
    let bend = rng.random_range(-0.25..0.25);
    let arc = 0.08 * distance * (1.0 + style[1]) + 0.3 * n01.sample(rng);
    let lift = 2.0 + style[2] + 0.2 * n01.sample(rng);
    let n = (duration * RATE).round() as usize + 1;
    let noise = Normal::new(0.0, NOISE_CM).unwrap();
    let mut times = Vec::with_capacity(n);
    let mut coords = Vec::with_capacity(n);
    for k in 0..n {
        let tau = k as f64 / (n - 1) as f64;
        // Timing warp: fixed endpoints, increasing for |bend| < 1.
        let w = tau + bend * tau * (1.0 - tau);
        let s = min_jerk(w);
        let bump = (PI * s).sin();
        times.push(k as f64 / RATE);
        coords.push([
            distance * s + noise.sample(rng),
            arc * bump + noise.sample(rng),
            height * s + lift * bump + noise.sample(rng),
        ]);
    }
    (times, coords)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    std::fs::create_dir_all(&dir)?;

    let truth = Truth::reference_scenario(6, 11)?;
    let sim = simulate_dataset(&truth, &SimDesign::equidistant(6, 60, 12))?;
    let samples: Vec<FunctionalSample> = sim
        .dataset
        .samples()
        .map(|s| FunctionalSample {
            condition: "signature".into(),
            ..s.clone()
        })
        .collect();
    write_samples_csv(std::fs::File::create(dir.join("signature.csv"))?, &samples)?;

    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let styles: Vec<[f64; 3]> = (0..5)
        .map(|_| [0.08 * n01.sample(&mut rng), 0.3 * n01.sample(&mut rng), 1.0 * n01.sample(&mut rng)])
        .collect();
    let mut trajs = Vec::new();
    for distance in [15.0, 30.0] {
        for (label, height) in [("S", 0.0), ("M", 7.5), ("T", 15.0)] {
            for (p, style) in styles.iter().enumerate() {
                // Participant by height interaction.
                let style = [
                    style[0] + 0.02 * n01.sample(&mut rng),
                    style[1] + 0.1 * n01.sample(&mut rng),
                    style[2] + 0.4 * n01.sample(&mut rng),
                ];
                for rep in 1..=4 {
                    let (times, coords) = reach(&mut rng, distance, height, &style);
                    trajs.push(RawTrajectory {
                        condition: format!("d{distance:.0}/{label}"),
                        participant: format!("p{:02}", p + 1),
                        repetition: rep,
                        times,
                        channels: Channels::Spatial(coords),
                    });
                }
            }
        }
    }
    write_trajectories_csv(std::fs::File::create(dir.join("paths.csv"))?, &trajs)?;
    println!("fixtures written to {}", dir.display());
    Ok(())
}
