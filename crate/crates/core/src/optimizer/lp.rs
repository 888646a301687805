//! Dense two-phase simplex for the small relaxations solved at each
//! branch-and-bound node. Bland's rule keeps it cycle-free.

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub coeffs: Vec<f64>,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpResult {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

struct Tableau {
    /// `rows × (cols + 1)`, last column is the right-hand side.
    a: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.a[r][c];
        for v in &mut self.a[r] {
            *v /= p;
        }
        let pivot_row = self.a[r].clone();
        for (i, row) in self.a.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f.abs() > 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        self.basis[r] = c;
    }

    /// Minimizes `cost · x` over the columns allowed by `allowed`.
    fn optimize(&mut self, cost: &[f64], allowed: &dyn Fn(usize) -> bool) -> Result<(), ()> {
        loop {
            let reduced = |j: usize| -> f64 {
                cost[j]
                    - self
                        .a
                        .iter()
                        .zip(&self.basis)
                        .map(|(row, &b)| cost[b] * row[j])
                        .sum::<f64>()
            };
            let Some(enter) = (0..self.cols)
                .find(|&j| allowed(j) && !self.basis.contains(&j) && reduced(j) < -EPS)
            else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in self.a.iter().enumerate() {
                if row[enter] > EPS {
                    let ratio = row[self.cols] / row[enter];
                    let better = match leave {
                        None => true,
                        Some((l, best)) => {
                            ratio < best - EPS
                                || (ratio <= best + EPS && self.basis[i] < self.basis[l])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, enter),
                None => return Err(()),
            }
        }
    }
}

/// Minimizes `cost · x` subject to `rows` and `x ≥ 0`.
pub fn solve(cost: &[f64], rows: &[Row]) -> LpResult {
    let n = cost.len();
    let m = rows.len();
    // Column layout: originals, one slack/surplus per inequality, one artificial per row needing it.
    let mut slack_of = vec![None; m];
    let mut art_of = vec![None; m];
    let mut cols = n;
    let norm: Vec<(Vec<f64>, Sense, f64)> = rows
        .iter()
        .map(|r| {
            if r.rhs < 0.0 {
                let flip = match r.sense {
                    Sense::Le => Sense::Ge,
                    Sense::Ge => Sense::Le,
                    Sense::Eq => Sense::Eq,
                };
                (r.coeffs.iter().map(|c| -c).collect(), flip, -r.rhs)
            } else {
                (r.coeffs.clone(), r.sense, r.rhs)
            }
        })
        .collect();
    for (i, (_, s, _)) in norm.iter().enumerate() {
        if *s != Sense::Eq {
            slack_of[i] = Some(cols);
            cols += 1;
        }
    }
    let first_art = cols;
    for (i, (_, s, _)) in norm.iter().enumerate() {
        if *s != Sense::Le {
            art_of[i] = Some(cols);
            cols += 1;
        }
    }
    let mut t = Tableau {
        a: vec![vec![0.0; cols + 1]; m],
        basis: vec![0; m],
        cols,
    };
    for (i, (coeffs, s, rhs)) in norm.iter().enumerate() {
        t.a[i][..n].copy_from_slice(coeffs);
        t.a[i][cols] = *rhs;
        if let Some(sc) = slack_of[i] {
            t.a[i][sc] = if *s == Sense::Le { 1.0 } else { -1.0 };
        }
        t.basis[i] = match (art_of[i], slack_of[i]) {
            (Some(ac), _) => {
                t.a[i][ac] = 1.0;
                ac
            }
            (None, Some(sc)) => sc,
            (None, None) => unreachable!("equality rows always get an artificial"),
        };
    }
    if first_art < cols {
        let phase1: Vec<f64> = (0..cols)
            .map(|j| if j >= first_art { 1.0 } else { 0.0 })
            .collect();
        if t.optimize(&phase1, &|_| true).is_err() {
            return LpResult::Unbounded;
        }
        let infeas: f64 = t
            .basis
            .iter()
            .zip(&t.a)
            .filter(|(&b, _)| b >= first_art)
            .map(|(_, r)| r[cols])
            .sum();
        if infeas > 1e-7 {
            return LpResult::Infeasible;
        }
        // Drive zero-level artificials out of the basis; drop redundant rows.
        let mut i = 0;
        while i < t.a.len() {
            if t.basis[i] >= first_art {
                if let Some(c) = (0..first_art).find(|&j| t.a[i][j].abs() > EPS) {
                    t.pivot(i, c);
                } else {
                    t.a.remove(i);
                    t.basis.remove(i);
                    continue;
                }
            }
            i += 1;
        }
    }
    let phase2: Vec<f64> = (0..cols)
        .map(|j| if j < n { cost[j] } else { 0.0 })
        .collect();
    if t.optimize(&phase2, &|j| j < first_art).is_err() {
        return LpResult::Unbounded;
    }
    let mut x = vec![0.0; n];
    for (row, &b) in t.a.iter().zip(&t.basis) {
        if b < n {
            x[b] = row[cols];
        }
    }
    let value = cost.iter().zip(&x).map(|(c, v)| c * v).sum();
    LpResult::Optimal { x, value }
}
