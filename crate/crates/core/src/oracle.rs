//! Brute-force fairness theory on finite joint distributions `P(x, s, y)`
//! with binary `s` and `y`.
//!
//! Disparity is measured with total variation,
//! `sum_s P(s) TV(Q_{yhat|s}, Q_yhat)`, which for a binary prediction equals
//! `2 P(s=0) P(s=1) |r0 - r1|` where `r_s` is the group positive rate. The
//! grid search uses that identity: the risk separates over the two groups and
//! the constraint only couples `r0` and `r1`, so each group's grid is
//! enumerated once and the two lists are joined with a sliding window over
//! rates. That is exactly the search over the product grid.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_X: usize = 16;
/// Largest per-group grid enumeration (`grid_n ^ cells`).
pub const MAX_GROUP_GRID: usize = 4_000_000;
const PROB_TOL: f64 = 1e-12;
const FEAS_TOL: f64 = 1e-12;

/// Joint table over `x in 0..x_size`, `s in {0,1}`, `y in {0,1}`, stored at
/// index `(x * 2 + s) * 2 + y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteInstance {
    pub x_size: usize,
    #[serde(default = "two")]
    pub s_size: usize,
    #[serde(default = "two")]
    pub y_size: usize,
    pub table: Vec<f64>,
}

fn two() -> usize {
    2
}

fn oracle_err(msg: impl Into<String>) -> Error {
    Error::Oracle(msg.into())
}

impl DiscreteInstance {
    pub fn new(x_size: usize, table: Vec<f64>) -> Result<Self> {
        let inst = Self {
            x_size,
            s_size: 2,
            y_size: 2,
            table,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Builds `P(s) P(x|s) P(y|x,s)` from its factors. `p_x_given_s[s][x]`
    /// and `p_y1[x][s]` are conditionals.
    pub fn from_factors(p_s1: f64, p_x_given_s: [&[f64]; 2], p_y1: &[[f64; 2]]) -> Result<Self> {
        let x_size = p_y1.len();
        let mut table = vec![0.0; x_size * 4];
        for x in 0..x_size {
            for s in 0..2 {
                let ps = if s == 1 { p_s1 } else { 1.0 - p_s1 };
                let pxs = ps * p_x_given_s[s][x];
                table[(x * 2 + s) * 2 + 1] = pxs * p_y1[x][s];
                table[(x * 2 + s) * 2] = pxs * (1.0 - p_y1[x][s]);
            }
        }
        Self::new(x_size, table)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let inst: Self = serde_json::from_str(text)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_size != 2 || self.y_size != 2 {
            return Err(oracle_err("only binary s and y are supported"));
        }
        if self.x_size == 0 || self.x_size > MAX_X {
            return Err(oracle_err(format!("x_size={} must lie in 1..={MAX_X}", self.x_size)));
        }
        if self.table.len() != self.x_size * 4 {
            return Err(oracle_err(format!(
                "table has {} entries, expected {}",
                self.table.len(),
                self.x_size * 4
            )));
        }
        if self.table.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(oracle_err("probabilities must be finite and nonnegative"));
        }
        let total: f64 = self.table.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(oracle_err(format!("table sums to {total}, expected 1")));
        }
        for s in 0..2 {
            if self.p_s(s) <= 0.0 {
                return Err(oracle_err(format!("P(S={s}) must be positive")));
            }
        }
        Ok(())
    }

    pub fn p(&self, x: usize, s: usize, y: usize) -> f64 {
        self.table[(x * 2 + s) * 2 + y]
    }

    pub fn p_xs(&self, x: usize, s: usize) -> f64 {
        self.p(x, s, 0) + self.p(x, s, 1)
    }

    pub fn p_s(&self, s: usize) -> f64 {
        (0..self.x_size).map(|x| self.p_xs(x, s)).sum()
    }

    /// `P(Y=1 | S=s)`
    pub fn label_rate(&self, s: usize) -> f64 {
        (0..self.x_size).map(|x| self.p(x, s, 1)).sum::<f64>() / self.p_s(s)
    }

    /// `P(Y=1 | x, s)`, `None` on an empty cell.
    pub fn p_y1_given(&self, x: usize, s: usize) -> Option<f64> {
        let m = self.p_xs(x, s);
        (m > 0.0).then(|| self.p(x, s, 1) / m)
    }

    /// `P(x | s)`
    pub fn p_x_given(&self, x: usize, s: usize) -> f64 {
        self.p_xs(x, s) / self.p_s(s)
    }

    /// True when every populated cell carries a single label.
    pub fn is_deterministic(&self) -> bool {
        (0..self.x_size).all(|x| (0..2).all(|s| self.p(x, s, 0).min(self.p(x, s, 1)) <= PROB_TOL))
    }

    /// Majority sensitive value; `None` on an exact tie.
    pub fn majority(&self) -> Option<usize> {
        let p1 = self.p_s(1);
        if (p1 - 0.5).abs() <= PROB_TOL {
            None
        } else {
            Some((p1 > 0.5) as usize)
        }
    }
}

/// Decision kernel `q(yhat=1 | x, s)` stored at index `x * 2 + s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticRule {
    pub x_size: usize,
    pub q: Vec<f64>,
}

impl StochasticRule {
    pub fn constant(x_size: usize, value: f64) -> Self {
        Self {
            x_size,
            q: vec![value; x_size * 2],
        }
    }

    pub fn get(&self, x: usize, s: usize) -> f64 {
        self.q[x * 2 + s]
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.len() != self.x_size * 2 {
            return Err(oracle_err("rule size does not match its alphabet"));
        }
        if self.q.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(oracle_err("rule entries must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BayesRule {
    pub rule: StochasticRule,
    /// Cells `(x, s)` with zero probability; their entry is set to 0.
    pub empty_cells: Vec<(usize, usize)>,
}

/// `q(1|x,s) = 1` iff `P(y=1|x,s) > 1/2`; ties and empty cells map to 0.
pub fn bayes_rule(inst: &DiscreteInstance) -> BayesRule {
    let mut rule = StochasticRule::constant(inst.x_size, 0.0);
    let mut empty_cells = Vec::new();
    for x in 0..inst.x_size {
        for s in 0..2 {
            match inst.p_y1_given(x, s) {
                Some(p) if p > 0.5 => rule.q[x * 2 + s] = 1.0,
                Some(_) => {}
                None => empty_cells.push((x, s)),
            }
        }
    }
    BayesRule { rule, empty_cells }
}

fn check_rule(inst: &DiscreteInstance, rule: &StochasticRule) -> Result<()> {
    rule.validate()?;
    if rule.x_size != inst.x_size {
        return Err(oracle_err("rule and instance alphabets differ"));
    }
    Ok(())
}

/// Expected 0/1 loss of the rule.
pub fn rule_risk(inst: &DiscreteInstance, rule: &StochasticRule) -> Result<f64> {
    check_rule(inst, rule)?;
    let mut risk = 0.0;
    for x in 0..inst.x_size {
        for s in 0..2 {
            let q = rule.get(x, s);
            risk += inst.p(x, s, 0) * q + inst.p(x, s, 1) * (1.0 - q);
        }
    }
    Ok(risk)
}

/// `Q(yhat=1 | s)`
pub fn group_positive_rate(inst: &DiscreteInstance, rule: &StochasticRule, s: usize) -> f64 {
    (0..inst.x_size).map(|x| inst.p_xs(x, s) * rule.get(x, s)).sum::<f64>() / inst.p_s(s)
}

/// `sum_s P(s) TV(Q_{yhat|S=s}, Q_yhat)`; binary TV is the gap of the
/// positive masses.
pub fn rule_disparity(inst: &DiscreteInstance, rule: &StochasticRule) -> Result<f64> {
    check_rule(inst, rule)?;
    let r = [group_positive_rate(inst, rule, 0), group_positive_rate(inst, rule, 1)];
    let ps = [inst.p_s(0), inst.p_s(1)];
    let overall = ps[0] * r[0] + ps[1] * r[1];
    Ok(ps[0] * (r[0] - overall).abs() + ps[1] * (r[1] - overall).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairOptimum {
    pub rule: StochasticRule,
    pub risk: f64,
    pub achieved_disparity: f64,
    pub epsilon: f64,
    /// Best risk found on the grid before refinement.
    pub grid_risk: f64,
}

/// Separable two-group problem: minimize
/// `sum_c slope_c q_c + base` over `q in [0,1]^cells` subject to
/// `|r0 - r1| <= max_gap` with `r_s = sum_{c in s} rate_c q_c`.
struct TwoGroupProblem {
    /// `(x, s)` of each free cell.
    cells: Vec<(usize, usize)>,
    rate: Vec<f64>,
    slope: Vec<f64>,
    base: f64,
    max_gap: f64,
}

impl TwoGroupProblem {
    /// Conditional-risk problem for weights `weight[s]` on each group's
    /// conditional 0/1 risk, using `inst` for the shared conditionals.
    fn new(inst: &DiscreteInstance, weight: [f64; 2], max_gap: f64) -> Self {
        let mut p = Self {
            cells: Vec::new(),
            rate: Vec::new(),
            slope: Vec::new(),
            base: 0.0,
            max_gap,
        };
        for s in 0..2 {
            let ps = inst.p_s(s);
            for x in 0..inst.x_size {
                let (p0, p1) = (inst.p(x, s, 0) / ps, inst.p(x, s, 1) / ps);
                p.base += weight[s] * p1;
                if p0 + p1 > 0.0 {
                    p.cells.push((x, s));
                    p.rate.push(p0 + p1);
                    p.slope.push(weight[s] * (p0 - p1));
                }
            }
        }
        p
    }

    fn gap(&self, q: &[f64]) -> f64 {
        self.cells
            .iter()
            .zip(&self.rate)
            .zip(q)
            .fold(0.0, |a, ((&(_, s), r), qi)| if s == 0 { a + r * qi } else { a - r * qi })
    }

    fn objective(&self, q: &[f64]) -> f64 {
        self.slope.iter().zip(q).fold(self.base, |a, (b, qi)| a + b * qi)
    }

    fn group_cells(&self, s: usize) -> Vec<usize> {
        (0..self.cells.len()).filter(|&c| self.cells[c].1 == s).collect()
    }

    /// Exhaustive grid search; returns the winning cell values.
    fn grid_search(&self, grid_n: usize) -> Result<Vec<f64>> {
        let lists: Vec<Vec<(f64, f64, usize)>> = (0..2)
            .map(|s| self.enumerate_group(&self.group_cells(s), grid_n))
            .collect::<Result<_>>()?;
        let (g0, g1) = (&lists[0], &lists[1]);
        // Sliding window over g1 (sorted by rate) for each g0 rate in order.
        let reach = self.max_gap + FEAS_TOL;
        let mut best: Option<(f64, usize, usize)> = None;
        let mut window: VecDeque<usize> = VecDeque::new();
        let mut hi = 0;
        let mut lo = 0;
        for (i0, &(r0, v0, _)) in g0.iter().enumerate() {
            while hi < g1.len() && g1[hi].0 <= r0 + reach {
                while window.back().is_some_and(|&b| g1[b].1 > g1[hi].1) {
                    window.pop_back();
                }
                window.push_back(hi);
                hi += 1;
            }
            while lo < hi && g1[lo].0 < r0 - reach {
                lo += 1;
            }
            while window.front().is_some_and(|&f| f < lo) {
                window.pop_front();
            }
            if let Some(&j) = window.front() {
                let total = v0 + g1[j].1;
                if best.is_none_or(|(b, _, _)| total < b) {
                    best = Some((total, i0, j));
                }
            }
        }
        let (_, i0, i1) = best.ok_or_else(|| oracle_err("no feasible rule on the grid"))?;
        let mut q = vec![0.0; self.cells.len()];
        for (s, idx) in [(0, g0[i0].2), (1, g1[i1].2)] {
            let mut code = idx;
            for c in self.group_cells(s) {
                q[c] = (code % grid_n) as f64 / (grid_n - 1) as f64;
                code /= grid_n;
            }
        }
        Ok(q)
    }

    /// All grid assignments of one group as `(rate, objective part, code)`,
    /// sorted by rate.
    fn enumerate_group(&self, cells: &[usize], grid_n: usize) -> Result<Vec<(f64, f64, usize)>> {
        let total = (0..cells.len()).try_fold(1usize, |acc, _| acc.checked_mul(grid_n));
        let total = match total {
            Some(t) if t <= MAX_GROUP_GRID => t,
            _ => {
                return Err(oracle_err(format!(
                    "grid of {grid_n}^{} points per group exceeds the {MAX_GROUP_GRID} limit; lower grid_n",
                    cells.len()
                )))
            }
        };
        let step = 1.0 / (grid_n - 1) as f64;
        let mut out = Vec::with_capacity(total);
        for code in 0..total {
            let mut rest = code;
            let (mut r, mut v) = (0.0, 0.0);
            for &c in cells {
                let q = (rest % grid_n) as f64 * step;
                rest /= grid_n;
                r += self.rate[c] * q;
                v += self.slope[c] * q;
            }
            out.push((r, v, code));
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        Ok(out)
    }

    fn feasible(&self, q: &[f64]) -> bool {
        self.gap(q).abs() <= self.max_gap + FEAS_TOL
    }

    /// Coordinate descent over single cells and over pairs of cells moved
    /// along the direction that leaves the rate gap unchanged.
    fn refine(&self, q: &mut [f64]) {
        let n = q.len();
        let signed = |c: usize| if self.cells[c].1 == 0 { self.rate[c] } else { -self.rate[c] };
        for _ in 0..10_000 {
            let before = self.objective(q);
            for c in 0..n {
                if self.slope[c] == 0.0 {
                    continue;
                }
                let dir = -self.slope[c].signum();
                let mut t = if dir > 0.0 { 1.0 - q[c] } else { q[c] };
                let d = signed(c) * dir;
                let gap = self.gap(q);
                if d > 0.0 {
                    t = t.min(((self.max_gap - gap) / d).max(0.0));
                } else if d < 0.0 {
                    t = t.min(((-self.max_gap - gap) / d).max(0.0));
                }
                if t > 0.0 {
                    let old = q[c];
                    q[c] = (q[c] + dir * t).clamp(0.0, 1.0);
                    if !self.feasible(q) {
                        q[c] = old;
                    }
                }
            }
            for i in 0..n {
                for j in i + 1..n {
                    let (ui, uj) = (signed(j), -signed(i));
                    let slope = self.slope[i] * ui + self.slope[j] * uj;
                    if slope.abs() < 1e-15 {
                        continue;
                    }
                    let dir = -slope.signum();
                    let limit = |qc: f64, u: f64| {
                        let u = u * dir;
                        if u > 0.0 {
                            (1.0 - qc) / u
                        } else if u < 0.0 {
                            qc / -u
                        } else {
                            f64::INFINITY
                        }
                    };
                    let t = limit(q[i], ui).min(limit(q[j], uj));
                    if t > 0.0 && t.is_finite() {
                        let (oi, oj) = (q[i], q[j]);
                        q[i] = (q[i] + dir * t * ui).clamp(0.0, 1.0);
                        q[j] = (q[j] + dir * t * uj).clamp(0.0, 1.0);
                        if !self.feasible(q) || self.objective(q) > before + 1e-15 {
                            q[i] = oi;
                            q[j] = oj;
                        }
                    }
                }
            }
            if self.objective(q) >= before - 1e-15 {
                break;
            }
        }
    }

    fn to_rule(&self, x_size: usize, q: &[f64]) -> StochasticRule {
        let mut rule = StochasticRule::constant(x_size, 0.0);
        for (&(x, s), &v) in self.cells.iter().zip(q) {
            rule.q[x * 2 + s] = v;
        }
        rule
    }
}

/// Minimum-risk rule whose disparity is at most `epsilon`: exhaustive search
/// over `grid_n` values per cell, then continuous refinement.
pub fn fair_optimum_grid(inst: &DiscreteInstance, epsilon: f64, grid_n: usize) -> Result<FairOptimum> {
    inst.validate()?;
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(oracle_err(format!("epsilon={epsilon} is infeasible; it must be >= 0")));
    }
    if grid_n < 11 {
        return Err(oracle_err(format!("grid_n={grid_n} must be at least 11")));
    }
    let cells = inst.x_size * 2;
    if cells > 8 {
        return Err(oracle_err(format!("{cells} cells exceed the exhaustive-search limit of 8")));
    }
    let ps = [inst.p_s(0), inst.p_s(1)];
    let problem = TwoGroupProblem::new(inst, ps, epsilon / (2.0 * ps[0] * ps[1]));
    let mut q = problem.grid_search(grid_n)?;
    let grid_risk = problem.objective(&q);
    problem.refine(&mut q);
    let rule = problem.to_rule(inst.x_size, &q);
    let risk = rule_risk(inst, &rule)?;
    let achieved_disparity = rule_disparity(inst, &rule)?;
    debug_assert!(achieved_disparity <= epsilon + 1e-9);
    Ok(FairOptimum {
        rule,
        risk,
        achieved_disparity,
        epsilon,
        grid_risk,
    })
}

/// Bayes risk plus `P(s_min) TV(P_{Y|S=0}, P_{Y|S=1})`; valid only when the
/// label is a deterministic function of `(x, s)`.
pub fn fair_optimal_risk_closed_form(inst: &DiscreteInstance) -> Result<f64> {
    inst.validate()?;
    if !inst.is_deterministic() {
        return Err(oracle_err(
            "closed form requires deterministic labels Y = g(X, S)",
        ));
    }
    let bayes = rule_risk(inst, &bayes_rule(inst).rule)?;
    let p_min = inst.p_s(0).min(inst.p_s(1));
    Ok(bayes + p_min * (inst.label_rate(0) - inst.label_rate(1)).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapBound {
    /// Pooled majority sensitive value (unweighted mean over clients).
    pub s_max: usize,
    /// Right-hand side with the label sum taken over absolute differences,
    /// `sum_i (2 P_i(s_max^i) - 1) sum_y |P_i(y|s_max) - P_i(y|s_max^i)|`.
    pub rhs: f64,
    /// Same bound with total variation in place of the label sum (half of
    /// `rhs`).
    pub rhs_tv: f64,
    /// Smallest total excess risk of a global rule that satisfies demographic
    /// parity on every client.
    pub lhs_best_global: f64,
    pub per_client_fair_risk: Vec<f64>,
    pub slack: f64,
    pub holds: bool,
    pub holds_tv: bool,
}

const SHARE_TOL: f64 = 1e-9;

/// Numerical check of the global-versus-personalized gap bound on a family
/// of clients that differ only in `P(S)`.
pub fn parity_gap_bound(instances: &[DiscreteInstance], grid_n: usize) -> Result<GapBound> {
    if instances.len() < 2 {
        return Err(oracle_err("need at least two clients"));
    }
    let first = &instances[0];
    for inst in instances {
        inst.validate()?;
        if inst.x_size != first.x_size {
            return Err(oracle_err("clients use different feature alphabets"));
        }
        for x in 0..inst.x_size {
            for s in 0..2 {
                if let (Some(a), Some(b)) = (inst.p_y1_given(x, s), first.p_y1_given(x, s)) {
                    if (a - b).abs() > SHARE_TOL {
                        return Err(oracle_err(format!("P(y|x={x},s={s}) differs across clients")));
                    }
                }
                if (inst.p_x_given(x, s) - first.p_x_given(x, s)).abs() > SHARE_TOL {
                    return Err(oracle_err(format!("P(x={x}|s={s}) differs across clients")));
                }
            }
        }
    }
    let pooled_s1 = instances.iter().map(|i| i.p_s(1)).sum::<f64>() / instances.len() as f64;
    if (pooled_s1 - 0.5).abs() <= PROB_TOL {
        return Err(oracle_err("pooled sensitive attribute is tied; supply a family with a strict majority"));
    }
    let s_max = (pooled_s1 > 0.5) as usize;

    let mut rhs = 0.0;
    let mut rhs_tv = 0.0;
    let mut fair = Vec::with_capacity(instances.len());
    for inst in instances {
        let own = inst.majority().unwrap_or(s_max);
        let tv = (inst.label_rate(s_max) - inst.label_rate(own)).abs();
        let factor = 2.0 * inst.p_s(own) - 1.0;
        rhs += factor * 2.0 * tv;
        rhs_tv += factor * tv;
        fair.push(fair_optimum_grid(inst, 0.0, grid_n)?.risk);
    }

    // Summed risk of a shared rule is sum_s W_s * conditional risk_s with
    // W_s = sum_i P_i(s); parity on every client means r0 == r1.
    let weight = [
        instances.iter().map(|i| i.p_s(0)).sum::<f64>(),
        instances.iter().map(|i| i.p_s(1)).sum::<f64>(),
    ];
    let problem = TwoGroupProblem::new(first, weight, 0.0);
    let mut q = problem.grid_search(grid_n)?;
    problem.refine(&mut q);
    let global = problem.objective(&q);
    let lhs = global - fair.iter().sum::<f64>();
    let slack = 2.0 / grid_n as f64;
    Ok(GapBound {
        s_max,
        rhs,
        rhs_tv,
        lhs_best_global: lhs,
        per_client_fair_risk: fair,
        slack,
        holds: lhs >= rhs - slack,
        holds_tv: lhs >= rhs_tv - slack,
    })
}
