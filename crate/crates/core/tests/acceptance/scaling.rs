use std::fmt::Write as _;

use plaid_core::scaling::{fit_report, parse_records};
use plaid_core::{fit_isoflop, fit_power_law, IsoFlopPoint};

use crate::support::{Checks, Outcome};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

pub fn scaling_methodology() -> Outcome {
    let mut c = Checks::default();
    let mut worst_vertex: f64 = 0.0;
    for (u0, l0, k) in [(3.0, 2.0, 1.0), (12.5, 3.1, 0.07), (18.0, 2.7, 4.0), (9.2, 5.5, 0.5)] {
        let pts: Vec<IsoFlopPoint> = [-1.5, -0.7, 0.0, 0.4, 1.3]
            .iter()
            .map(|du| IsoFlopPoint { flops: 1e18, params: f64::exp(u0 + du), loss: l0 + k * du * du })
            .collect();
        let (n, l) = fit_isoflop(&pts).unwrap();
        worst_vertex = worst_vertex.max(rel(n, f64::exp(u0))).max(rel(l, l0));
    }
    c.check(worst_vertex < 1e-9, format!("isoflop vertex rel err {worst_vertex:.1e}"));

    let mut worst_law: f64 = 0.0;
    for (alpha, beta) in [(2.0, -0.057), (0.3, 0.5), (1.7e-3, 0.27), (40.0, -0.1)] {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| 10f64.powf(15.0 + 0.8 * i as f64)).map(|x| (x, alpha * x.powf(beta))).collect();
        let f = fit_power_law(&pts).unwrap();
        worst_law = worst_law.max(rel(f.alpha, alpha)).max((f.beta - beta).abs());
    }
    c.check(worst_law < 1e-9, format!("power law alpha/beta err {worst_law:.1e}"));

    // two families: b needs 64x the compute of a for any loss
    let mut text = String::new();
    for (fam, factor) in [("a", 1.0), ("b", 64.0)] {
        for k in 0..5 {
            let budget = 1e17 * 4f64.powi(k);
            let eff = budget / factor;
            let u_opt = 0.49 * eff.ln() - 4.0;
            let l_opt = 30.0 * eff.powf(-0.05);
            for du in [-1.2, -0.6, 0.0, 0.6, 1.2] {
                let _ = writeln!(text, "family={fam} budget={budget:e} params={:e} loss={:e}", (u_opt + du).exp(), l_opt + 0.15 * du * du);
            }
        }
    }
    let fits = fit_report(&parse_records(&text).unwrap()).unwrap();
    let (a, b) = (fits[0].loss_law.unwrap(), fits[1].loss_law.unwrap());
    c.check((a.beta - b.beta).abs() < 1e-9, format!("equal slopes {:.9} {:.9}", a.beta, b.beta));
    let ratio = b.alpha / a.alpha;
    let expected = 64f64.powf(-a.beta);
    c.check(rel(ratio, expected) < 1e-9, format!("alpha ratio {ratio:.9} = 64^(-beta) {expected:.9}"));
    let (na, nb) = (fits[0].param_law.unwrap(), fits[1].param_law.unwrap());
    c.check((na.beta - 0.49).abs() < 1e-9 && (nb.beta - 0.49).abs() < 1e-9, format!("N* exponents {:.9} {:.9}", na.beta, nb.beta));
    c.outcome()
}
