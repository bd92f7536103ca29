use plaid_core::denoiser::{anneal_coefficient, BatchShape, Denoiser};
use plaid_core::diffusion::{InteriorMap, MonotoneNet, NoiseSchedule};
use plaid_core::objective::allocate_split;
use plaid_core::Mat;
use rand::Rng;

use crate::support::{rng, tiny_model, Checks, Outcome};

pub fn structural_invariants() -> Outcome {
    let mut c = Checks::default();
    let mut r = rng(41);

    // softmax rows and the convex hull of the table
    let model = tiny_model(7, 6, 42);
    let (b, l, d) = (3, 6, model.config.embed_dim);
    let z = Mat::randn(b * l, d, 2.0, &mut r);
    let prev = Mat::randn(b * l, d, 0.5, &mut r);
    let shape = BatchShape::full(vec![0.2, 0.5, 0.9], l);
    let sched = model.schedule();
    let gam: Vec<f64> = shape.t.iter().map(|&t| sched.gamma(t).unwrap()).collect();
    let (logits, xh) = Denoiser::new(&model).detached_pass(&z, &gam, &prev, &shape, 1.0).unwrap();
    let table = model.table().weights().clone();
    let (mut worst_sum, mut worst_comb, mut outside): (f64, f64, usize) = (0.0, 0.0, 0);
    for row in 0..b * l {
        let lr = logits.row(row);
        let m = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = lr.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / s).collect();
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        if p.iter().any(|&v| v < 0.0) {
            outside += 1;
        }
        for j in 0..d {
            let comb: f64 = (0..table.rows).map(|k| p[k] * table.data[k * d + j]).sum();
            let x = xh.data[row * d + j];
            worst_comb = worst_comb.max((comb - x).abs());
            let col: Vec<f64> = (0..table.rows).map(|k| table.data[k * d + j]).collect();
            let (lo, hi) = (col.iter().cloned().fold(f64::INFINITY, f64::min), col.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            if x < lo - 1e-12 || x > hi + 1e-12 {
                outside += 1;
            }
        }
    }
    c.check(worst_sum < 1e-12, format!("softmax rows sum to 1 (max dev {worst_sum:.1e})"));
    c.check(worst_comb < 1e-12 && outside == 0, format!("x_hat is a convex combination of table rows (max dev {worst_comb:.1e})"));

    // schedule monotonicity over random parameterizations
    let mut violations = 0;
    for _ in 0..1000 {
        let h = r.random_range(1..=8);
        let raw: Vec<f64> = (0..3 * h + 1).map(|_| r.random_range(-6.0..6.0)).collect();
        let g0 = r.random_range(-12.0..0.0);
        let g1 = g0 + r.random_range(0.1..16.0);
        let s = NoiseSchedule::new(g0, g1, InteriorMap::Learned(MonotoneNet::from_raw(raw).unwrap()));
        let mut last = f64::NEG_INFINITY;
        let mut ok = (s.gamma(0.0).unwrap() - g0).abs() < 1e-9 && (s.gamma(1.0).unwrap() - g1).abs() < 1e-9;
        for i in 0..=256 {
            let t = i as f64 / 256.0;
            let v = s.sigma2(t).unwrap();
            ok &= v > last && s.snr_prime(t).unwrap() <= 0.0 && s.gamma_prime(t).unwrap() > 0.0;
            last = v;
        }
        if !ok {
            violations += 1;
        }
    }
    c.check(violations == 0, format!("1000 random schedules monotone with pinned endpoints ({violations} violations)"));

    let a = [anneal_coefficient(0), anneal_coefficient(2500), anneal_coefficient(5000), anneal_coefficient(50_000)];
    c.check(a == [0.0, 0.5, 1.0, 1.0], format!("anneal coefficient at 0/2500/5000/50000 = {a:?}"));

    // split against exhaustive integer search
    let vars = [0.0, 1e-3, 0.5, 1.0, 3.0, 9.0, 100.0, 1e4, 1e6];
    let (mut cases, mut exact, mut far) = (0, 0, 0);
    for batch in 2..=64usize {
        for &vd in &vars {
            for &vr in &vars {
                let (nd, nr) = allocate_split(vd, vr, batch).unwrap();
                let cost = |n: usize| vd / n as f64 + vr / (batch - n) as f64;
                let best_cost = (1..batch).map(cost).fold(f64::INFINITY, f64::min);
                let optimal: Vec<usize> = (1..batch).filter(|&n| cost(n) <= best_cost * (1.0 + 1e-12) + 1e-300).collect();
                cases += 1;
                if nd + nr != batch || nd == 0 || nr == 0 {
                    far += 1;
                } else if optimal.contains(&nd) {
                    exact += 1;
                } else if !optimal.iter().any(|&n| n.abs_diff(nd) <= 1) {
                    far += 1;
                }
            }
        }
    }
    c.check(far == 0, format!("split within rounding neighbourhood of the integer optimum in {cases} cases ({exact} exactly optimal)"));
    c.outcome()
}
