//! Compares cross-entropy, CCL-SC and CCL-SC + SAT+EM on the desk-scale
//! Gaussian mixture over several seeds.
//!
//! Usage: cargo run --release --example desk_scale -- [noise_std] [seeds] [weight_decay]

use std::time::Instant;

use cclsc::data::{gen_gaussian_mixture, GaussianSpec};
use cclsc::seleval::{risk_coverage_curve, score_dataset};
use cclsc::trainer::{architecture_for, train, Head, TrainConfig};

fn main() -> cclsc::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let std: f64 = args.get(1).map_or(1.5, |s| s.parse().expect("noise std"));
    let seeds: u64 = args.get(2).map_or(5, |s| s.parse().expect("seed count"));
    let wd: f64 = args.get(3).map_or(5e-3, |s| s.parse().expect("weight decay"));
    let base = TrainConfig { weight_decay: wd, ..TrainConfig::default() };

    let methods = [
        ("ce", TrainConfig { contrastive: false, ..base.clone() }),
        ("ccl-sc", base.clone()),
        ("ccl-sc+sat-em", TrainConfig { head: Head::SatEm, ..base.clone() }),
    ];
    for (name, base) in methods {
        let (mut risk_full, mut risk80, mut var, mut bound) = (0.0, 0.0, 0.0, 0.0);
        let start = Instant::now();
        for seed in 0..seeds {
            let split = gen_gaussian_mixture(&GaussianSpec {
                classes: 8,
                dim: 32,
                per_class: 625,
                radius: 5.0,
                std,
                seed,
            })?
            .split;
            let cfg = TrainConfig { seed, ..base.clone() };
            let arch = architecture_for(&cfg, 32, &[64], 32, 8);
            let (params, history) = train(&split, &arch, &cfg)?;
            let scored = score_dataset(&params, &split.test)?;
            let curve = risk_coverage_curve(&scored, &[1.0, 0.8])?;
            let last = history.last().expect("epochs");
            risk_full += curve[0].selective_risk;
            risk80 += curve[1].selective_risk;
            var += last.var_intra();
            bound += last.bound.bound_value;
        }
        let n = seeds as f64;
        println!(
            "{name:>14}: risk@1.0 {:.4}  risk@0.8 {:.4}  var_intra {:.4}  bound {:.4}  ({:.1?}/run)",
            risk_full / n,
            risk80 / n,
            var / n,
            bound / n,
            start.elapsed() / seeds as u32
        );
    }
    Ok(())
}
