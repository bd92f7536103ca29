//! IsoFLOP analysis: per-budget quadratic fits in log model size, compute-optimal power
//! laws and FLOP accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsoFlopPoint {
    /// Non-embedding training FLOPs.
    pub flops: f64,
    /// Non-embedding parameter count.
    pub params: f64,
    /// Nats per token.
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub beta: f64,
    /// Root-mean-square residual of the log-space fit.
    pub residual: f64,
}

impl PowerLawFit {
    pub fn predict(&self, c: f64) -> f64 {
        self.alpha * c.powf(self.beta)
    }
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Least-squares `loss = c0 + c1 u + c2 u^2` with `u = ln N`, solved by normal equations
/// on centered `u`. Returns `(c0, c1, c2)` in uncentered coordinates.
pub fn fit_quadratic(points: &[IsoFlopPoint]) -> Result<[f64; 3]> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.params).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InsufficientData(format!("{} distinct model sizes; need 3", distinct.len())));
    }
    if points.iter().any(|p| !(p.params > 0.0) || !p.loss.is_finite()) {
        return Err(Error::Domain("model sizes must be positive and losses finite".into()));
    }
    let us: Vec<f64> = points.iter().map(|p| p.params.ln()).collect();
    let mu = us.iter().sum::<f64>() / us.len() as f64;
    let mut ata = [[0.0; 3]; 3];
    let mut aty = [0.0; 3];
    for (u, p) in us.iter().zip(points) {
        let v = u - mu;
        let row = [1.0, v, v * v];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * p.loss;
        }
    }
    let [b0, b1, b2] = solve3(ata, aty).ok_or_else(|| Error::InsufficientData("singular normal equations".into()))?;
    // expand b0 + b1 (u - mu) + b2 (u - mu)^2
    Ok([b0 - b1 * mu + b2 * mu * mu, b1 - 2.0 * b2 * mu, b2])
}

/// Compute-optimal `(N*, L*)` at one budget: the vertex of the quadratic fit.
pub fn fit_isoflop(points: &[IsoFlopPoint]) -> Result<(f64, f64)> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.params).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InsufficientData(format!("{} distinct model sizes; need 3", distinct.len())));
    }
    let us: Vec<f64> = points.iter().map(|p| p.params.ln()).collect();
    let mu = us.iter().sum::<f64>() / us.len() as f64;
    let spread = us.iter().map(|u| (u - mu).abs()).fold(0.0, f64::max);
    let [c0, c1, c2] = fit_quadratic(points)?;
    // curvature relative to the scale of the data
    let scale = points.iter().map(|p| p.loss.abs()).fold(0.0, f64::max).max(1e-300);
    if c2 * spread * spread <= 1e-12 * scale {
        return Err(Error::NoMinimum(c2));
    }
    let u_star = -c1 / (2.0 * c2);
    Ok((u_star.exp(), c0 - c1 * c1 / (4.0 * c2)))
}

/// Ordinary least squares of `ln Y` on `ln C`.
pub fn fit_power_law(pairs: &[(f64, f64)]) -> Result<PowerLawFit> {
    if pairs.iter().any(|&(c, y)| !(c > 0.0 && y > 0.0)) {
        return Err(Error::Domain("power-law inputs must be positive".into()));
    }
    let mut cs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    cs.sort_by(f64::total_cmp);
    cs.dedup();
    if cs.len() < 2 {
        return Err(Error::InsufficientData(format!("{} distinct budgets; need 2", cs.len())));
    }
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let beta = sxy / sxx;
    let intercept = my - beta * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - beta * x).powi(2)).sum();
    Ok(PowerLawFit { alpha: intercept.exp(), beta, residual: (rss / n).sqrt() })
}

/// FLOP-counting constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopConvention {
    /// FLOPs per parameter per token of one forward pass.
    pub forward: f64,
    /// FLOPs per parameter per token of the backward pass.
    pub backward: f64,
    /// Mean forward passes per training example under stochastic self-conditioning.
    pub self_cond_passes: f64,
}

impl Default for FlopConvention {
    fn default() -> Self {
        Self { forward: 2.0, backward: 4.0, self_cond_passes: 1.25 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlopMode {
    /// Forward passes only.
    Inference { passes: f64 },
    /// Diffusion training with self-conditioning unrolls.
    Training,
    /// Training with a single forward pass (autoregressive baseline).
    AutoregressiveTraining,
}

/// Non-embedding FLOPs for `tokens` tokens.
pub fn count_flops(model: &DenoiserConfig, tokens: f64, mode: FlopMode, conv: &FlopConvention) -> f64 {
    let p = model.non_embedding_params() as f64;
    let per = match mode {
        FlopMode::Inference { passes } => conv.forward * passes,
        FlopMode::Training => conv.forward * conv.self_cond_passes + conv.backward,
        FlopMode::AutoregressiveTraining => conv.forward + conv.backward,
    };
    per * p * tokens
}

/// One ingested sweep record.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRecord {
    pub family: String,
    pub point: IsoFlopPoint,
}

/// Parses `key=value` records (`budget`, `params`, `loss`, optional `family`), one per
/// line; blank lines and `#` comments are skipped.
pub fn parse_records(text: &str) -> Result<Vec<ScalingRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) =
                tok.split_once('=').ok_or_else(|| Error::Input(format!("line {}: expected key=value, got {tok:?}", lineno + 1)))?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<f64> {
            let v = fields.get(k).ok_or_else(|| Error::Input(format!("line {}: missing {k}", lineno + 1)))?;
            v.parse().map_err(|_| Error::Input(format!("line {}: {k}={v} is not a number", lineno + 1)))
        };
        let point = IsoFlopPoint { flops: num("budget")?, params: num("params")?, loss: num("loss")? };
        if !(point.flops > 0.0 && point.params > 0.0 && point.loss > 0.0) {
            return Err(Error::Domain(format!("line {}: values must be positive", lineno + 1)));
        }
        let family = fields.get("family").map_or_else(|| "default".to_string(), |s| s.to_string());
        out.push(ScalingRecord { family, point });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetOptimum {
    pub budget: f64,
    pub n_star: f64,
    pub l_star: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyFit {
    pub family: String,
    pub optima: Vec<BudgetOptimum>,
    pub loss_law: Option<PowerLawFit>,
    pub param_law: Option<PowerLawFit>,
}

/// IsoFLOP fits for every family and budget, then power laws across budgets.
pub fn fit_report(records: &[ScalingRecord]) -> Result<Vec<FamilyFit>> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no records".into()));
    }
    let mut families: BTreeMap<&str, BTreeMap<u64, Vec<IsoFlopPoint>>> = BTreeMap::new();
    for r in records {
        families.entry(&r.family).or_default().entry(r.point.flops.to_bits()).or_default().push(r.point);
    }
    let mut out = Vec::new();
    for (family, budgets) in families {
        let mut optima = Vec::new();
        for points in budgets.values() {
            let (n_star, l_star) = fit_isoflop(points)?;
            optima.push(BudgetOptimum { budget: points[0].flops, n_star, l_star });
        }
        optima.sort_by(|a, b| a.budget.total_cmp(&b.budget));
        let (loss_law, param_law) = if optima.len() >= 2 {
            let l: Vec<(f64, f64)> = optima.iter().map(|o| (o.budget, o.l_star)).collect();
            let n: Vec<(f64, f64)> = optima.iter().map(|o| (o.budget, o.n_star)).collect();
            (Some(fit_power_law(&l)?), Some(fit_power_law(&n)?))
        } else {
            (None, None)
        };
        out.push(FamilyFit { family: family.to_string(), optima, loss_law, param_law });
    }
    Ok(out)
}

/// Fit report as `key=value` lines followed by a tab-separated table of optima.
pub fn format_report(fits: &[FamilyFit]) -> String {
    let mut s = String::new();
    for f in fits {
        for o in &f.optima {
            let _ = writeln!(s, "family={} budget={:e} n_star={:.12e} l_star={:.12}", f.family, o.budget, o.n_star, o.l_star);
        }
        if let (Some(l), Some(n)) = (f.loss_law, f.param_law) {
            let _ = writeln!(
                s,
                "family={} loss_alpha={:.12} loss_beta={:.12} loss_residual={:.3e} param_alpha={:.12e} param_beta={:.12} param_residual={:.3e}",
                f.family, l.alpha, l.beta, l.residual, n.alpha, n.beta, n.residual
            );
        }
    }
    s.push_str("# family\tbudget\tn_star\tl_star\n");
    for f in fits {
        for o in &f.optima {
            let _ = writeln!(s, "{}\t{:e}\t{:e}\t{}", f.family, o.budget, o.n_star, o.l_star);
        }
    }
    s
}
