//! Revised primal simplex for the occupation-measure linear programs.
//!
//! All programs solved here have the standard form
//!
//! ```text
//!     min c'x   subject to   A x = b,   x >= 0,
//! ```
//!
//! with few rows (one per grid node, plus a normalization) and many columns
//! (one per node/control pair, plus boundary columns). The solver keeps a
//! dense basis inverse, prices columns with Dantzig's rule, and falls back to
//! Bland's rule after a run of degenerate pivots so the heavily degenerate
//! stationarity programs (right-hand side almost entirely zero) terminate.
//!
//! Stationarity rows at zero discount are linearly dependent (they sum to
//! zero), so phase one can end with artificial variables still basic at zero
//! on redundant rows. They are kept basic with zero cost, barred from
//! entering, and forced out by the ratio test the moment any direction
//! touches their row; the dual value reported for such a row is the
//! consistent one produced by the final basis.
//!
//! Rows are equilibrated to unit maximum absolute value before the solve and
//! dual values are unscaled on the way out, so callers see duals for the
//! constraints exactly as they were stated.

use crate::constants::{
    LP_FEASIBILITY_TOL, LP_PIVOT_TOL, LP_REDUCED_COST_TOL, LP_REFACTOR_PERIOD, LP_SLACKNESS_TOL,
    LP_STALL_THRESHOLD,
};
use crate::error::{Error, Result};

/// Column-major sparse equality-form program. Variables are nonnegative.
#[derive(Clone, Debug, Default)]
pub struct SparseLp {
    pub n_rows: usize,
    cols: Vec<Vec<(usize, f64)>>,
    obj: Vec<f64>,
    rhs: Vec<f64>,
}

impl SparseLp {
    pub fn new(n_rows: usize) -> Self {
        SparseLp { n_rows, cols: Vec::new(), obj: Vec::new(), rhs: vec![0.0; n_rows] }
    }

    /// Append a column; returns its variable index. Entries must name valid
    /// rows; duplicate rows within one column are summed.
    pub fn add_column(&mut self, obj: f64, entries: &[(usize, f64)]) -> usize {
        let mut col: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for &(r, v) in entries {
            assert!(r < self.n_rows, "row {r} out of range");
            if v == 0.0 {
                continue;
            }
            match col.iter_mut().find(|(rr, _)| *rr == r) {
                Some((_, vv)) => *vv += v,
                None => col.push((r, v)),
            }
        }
        self.cols.push(col);
        self.obj.push(obj);
        self.obj.len() - 1
    }

    pub fn set_rhs(&mut self, row: usize, value: f64) {
        self.rhs[row] = value;
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }
}

/// Optimal solution of a [`SparseLp`].
#[derive(Clone, Debug)]
pub struct LpOutcome {
    /// Primal values, one per column.
    pub x: Vec<f64>,
    /// Dual values, one per row, for the constraints as stated.
    pub y: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
    /// Final basis, one column index per row; indices at or above the column
    /// count are phase-one artificials left basic at zero by redundant rows.
    pub basis: Vec<usize>,
}

struct Simplex<'a> {
    lp: &'a SparseLp,
    m: usize,
    n: usize,
    /// Row scale factors (sign folded in so the scaled rhs is nonnegative).
    scale: Vec<f64>,
    /// Column scale factors: every scaled column has unit maximum magnitude,
    /// so bases cannot mix wildly different column scales. Primal values and
    /// objective coefficients are unscaled on the way out.
    cscale: Vec<f64>,
    /// Working right-hand side: the scaled rhs plus a tiny per-row
    /// perturbation that makes vertices nondegenerate, so pivots strictly
    /// reduce the phase objective instead of stalling in long zero-step
    /// walks (which is what assembles ill-conditioned bases).
    rhs: Vec<f64>,
    /// The scaled rhs as stated, restored before the final cleanup.
    rhs_true: Vec<f64>,
    /// Basis column per row; indices >= n denote that row's artificial.
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    /// Dense basis inverse, row-major m x m.
    binv: Vec<f64>,
    /// Largest magnitude in `binv`, refreshed with it: the noise floor for
    /// computed directions is roughly this times machine epsilon.
    binv_max: f64,
    x_b: Vec<f64>,
    pivots: usize,
    stall: usize,
    /// True while `binv` comes straight from a refactorization, with no
    /// product-form updates layered on top.
    fresh: bool,
}

/// Relative size of the anti-degeneracy rhs perturbation.
const LP_PERTURB: f64 = 1e-9;

impl<'a> Simplex<'a> {
    fn new(lp: &'a SparseLp) -> Self {
        let m = lp.n_rows;
        let n = lp.cols.len();
        // Equilibrate: scale each row by its largest magnitude, flipping sign
        // so the scaled right-hand side is nonnegative.
        let mut maxabs = vec![0.0f64; m];
        for col in &lp.cols {
            for &(r, v) in col {
                maxabs[r] = maxabs[r].max(v.abs());
            }
        }
        let mut scale = vec![1.0f64; m];
        let mut rhs_true = vec![0.0f64; m];
        for r in 0..m {
            let s = if maxabs[r] > 0.0 { maxabs[r] } else { 1.0 };
            let flip = if lp.rhs[r] < 0.0 { -1.0 } else { 1.0 };
            scale[r] = flip / s;
            rhs_true[r] = lp.rhs[r] * scale[r];
        }
        // Deterministic per-row jitter in [0.5, 1.5) so no two rows receive
        // the same perturbation.
        let mut rhs = rhs_true.clone();
        let mut state = 0x9e3779b97f4a7c15u64;
        for (r, v) in rhs.iter_mut().enumerate() {
            state = state.wrapping_add(r as u64).wrapping_mul(0xbf58476d1ce4e5b9);
            state ^= state >> 31;
            let jitter = 0.5 + (state >> 11) as f64 / (1u64 << 53) as f64;
            *v += LP_PERTURB * (1.0 + *v) * jitter;
        }
        let mut cscale = vec![1.0f64; n];
        for (j, col) in lp.cols.iter().enumerate() {
            let mx = col.iter().fold(0.0f64, |a, &(r, v)| a.max((v * scale[r]).abs()));
            if mx > 0.0 {
                cscale[j] = 1.0 / mx;
            }
        }
        let mut binv = vec![0.0f64; m * m];
        for r in 0..m {
            binv[r * m + r] = 1.0;
        }
        Simplex {
            lp,
            m,
            n,
            scale,
            cscale,
            rhs: rhs.clone(),
            rhs_true,
            basis: (n..n + m).collect(),
            in_basis: vec![false; n],
            binv,
            binv_max: 1.0,
            x_b: rhs,
            pivots: 0,
            stall: 0,
            fresh: true,
        }
    }

    /// Scaled column entries of variable `j` (artificials are unit columns).
    fn column(&self, j: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        if j >= self.n {
            out.push((j - self.n, 1.0));
        } else {
            for &(r, v) in &self.lp.cols[j] {
                out.push((r, v * self.scale[r] * self.cscale[j]));
            }
        }
    }

    /// Cost coefficient of variable `j` in the scaled program.
    fn scaled_cost(&self, cost: &dyn Fn(usize) -> f64, j: usize) -> f64 {
        let c = cost(j);
        if j < self.n {
            c * self.cscale[j]
        } else {
            c
        }
    }

    /// y' = c_B' B^-1 for the given basic costs.
    fn duals(&self, cost: &dyn Fn(usize) -> f64, y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, &bj) in self.basis.iter().enumerate() {
            let cb = self.scaled_cost(cost, bj);
            if cb != 0.0 {
                let row = &self.binv[i * self.m..(i + 1) * self.m];
                for r in 0..self.m {
                    y[r] += cb * row[r];
                }
            }
        }
    }

    /// Reduced cost of column `j` against duals `y`, in the scaled program.
    fn reduced_cost(&self, j: usize, cj: f64, y: &[f64]) -> f64 {
        let mut rc = cj;
        if j >= self.n {
            rc -= y[j - self.n];
        } else {
            for &(r, v) in &self.lp.cols[j] {
                rc -= y[r] * (v * self.scale[r] * self.cscale[j]);
            }
        }
        rc
    }

    /// d = B^-1 A_j.
    fn direction(&self, col: &[(usize, f64)], d: &mut [f64]) {
        d.iter_mut().for_each(|v| *v = 0.0);
        for &(r, v) in col {
            for i in 0..self.m {
                d[i] += self.binv[i * self.m + r] * v;
            }
        }
    }

    /// Rebuild the dense basis inverse from scratch (Gauss-Jordan with full
    /// pivoting) and refresh the basic values.
    ///
    /// Full pivoting permutes the basis slots so dependent columns — which
    /// product-form drift can manufacture on the heavily degenerate
    /// stationarity programs — sink to the last slots, where they are
    /// repaired in place: each is handed to the artificial of a row it can
    /// still eliminate, which keeps the basis square and leaves the repaired
    /// slot at value zero, exactly the convention for redundant rows. A slot
    /// carrying real mass always has a pivot somewhere, so it is never the
    /// one evicted.
    fn refactor(&mut self) -> Result<()> {
        self.refactor_core(true)
    }

    /// As [`refactor`], but `clamp` chooses the policy for negative basic
    /// values: clamped (and bounded) during the optimization walk, kept
    /// verbatim for the cleanup passes that exist to drive them out.
    fn refactor_core(&mut self, clamp: bool) -> Result<()> {
        let m = self.m;
        let w = 2 * m;
        let mut aug = vec![0.0f64; m * w];
        let mut col = Vec::new();
        let mut art_in_basis = vec![false; m];
        for (i, &bj) in self.basis.iter().enumerate() {
            self.column(bj, &mut col);
            for &(r, v) in &col {
                aug[r * w + i] = v;
            }
            if bj >= self.n {
                art_in_basis[bj - self.n] = true;
            }
        }
        for r in 0..m {
            aug[r * w + m + r] = 1.0;
        }
        let mut repairs = 0usize;
        let mut k = 0usize;
        while k < m {
            let (mut p, mut pc, mut best) = (k, k, 0.0f64);
            for r in k..m {
                for c in k..m {
                    let v = aug[r * w + c].abs();
                    if v > best {
                        best = v;
                        p = r;
                        pc = c;
                    }
                }
            }
            if best < 1e-12 {
                // Every remaining basis column lies in the span of the
                // pivoted ones. Hand each remaining slot to an artificial;
                // right-block column r holds the eliminated image of e_r,
                // and only images still strong on an unpivoted row qualify.
                repairs += 1;
                if repairs > m {
                    return Err(Error::LpNumerics(
                        "basis repair failed to converge at refactorization".into(),
                    ));
                }
                for s in k..m {
                    let mut repl: Option<(f64, usize)> = None;
                    for (r, &taken) in art_in_basis.iter().enumerate() {
                        if taken {
                            continue;
                        }
                        for q in k..m {
                            let v = aug[q * w + m + r].abs();
                            if repl.map_or(true, |(bv, _)| v > bv) {
                                repl = Some((v, r));
                            }
                        }
                    }
                    let Some((v, r)) = repl else {
                        return Err(Error::LpNumerics(format!(
                            "basis matrix numerically singular at refactorization (pivot {best:.3e})"
                        )));
                    };
                    if v < 1e-12 {
                        return Err(Error::LpNumerics(format!(
                            "basis matrix numerically singular at refactorization (pivot {best:.3e}, best repair {v:.3e})"
                        )));
                    }
                    let dropped = self.basis[s];
                    if dropped >= self.n {
                        art_in_basis[dropped - self.n] = false;
                    } else {
                        self.in_basis[dropped] = false;
                    }
                    self.basis[s] = self.n + r;
                    art_in_basis[r] = true;
                    for q in 0..m {
                        aug[q * w + s] = aug[q * w + m + r];
                    }
                }
                continue;
            }
            if pc != k {
                for r in 0..m {
                    aug.swap(r * w + k, r * w + pc);
                }
                self.basis.swap(k, pc);
            }
            if p != k {
                for c in 0..w {
                    aug.swap(k * w + c, p * w + c);
                }
            }
            let piv = aug[k * w + k];
            for c in 0..w {
                aug[k * w + c] /= piv;
            }
            for r in 0..m {
                if r != k {
                    let f = aug[r * w + k];
                    if f != 0.0 {
                        for c in 0..w {
                            aug[r * w + c] -= f * aug[k * w + c];
                        }
                    }
                }
            }
            k += 1;
        }
        for r in 0..m {
            for c in 0..m {
                self.binv[r * m + c] = aug[r * w + m + c];
            }
        }
        // x_B = B^-1 b. The ratio test stretches bounds by a hair per pivot,
        // so slight negative drift is clamped; real corruption still fails
        // the final residual certificate.
        for i in 0..m {
            let row = &self.binv[i * self.m..(i + 1) * self.m];
            let mut acc = 0.0;
            for r in 0..m {
                acc += row[r] * self.rhs[r];
            }
            if clamp && acc < 0.0 {
                if acc < -1e-7 {
                    return Err(Error::LpNumerics(format!(
                        "basic value {acc:.3e} drifted negative at refactorization"
                    )));
                }
                acc = 0.0;
            }
            self.x_b[i] = acc;
        }
        self.binv_max = self.binv.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        self.fresh = true;
        Ok(())
    }

    /// Run the simplex loop minimizing `cost` over columns `allowed`.
    /// Returns the optimal objective for that cost vector. `cond_cap` bounds
    /// the basis-inverse magnitude a pivot may create: beyond it, computed
    /// directions are too noisy to trust, so such pivots are refused.
    fn run(
        &mut self,
        cost: &dyn Fn(usize) -> f64,
        enter_allowed: &dyn Fn(usize) -> bool,
        max_pivots: usize,
        cond_cap: f64,
    ) -> Result<f64> {
        let m = self.m;
        let mut y = vec![0.0f64; m];
        let mut d = vec![0.0f64; m];
        let mut col = Vec::new();
        let mut local_pivots = 0usize;
        // Columns refused at the current vertex because even a fresh
        // factorization gives them no usable pivot; cleared after every
        // pivot since new bases yield new directions.
        let mut banned: Vec<usize> = Vec::new();
        loop {
            if local_pivots > max_pivots {
                return Err(Error::LpNumerics(format!(
                    "simplex did not terminate within {max_pivots} pivots"
                )));
            }
            self.duals(cost, &mut y);
            // Pricing: Dantzig normally, Bland after a degenerate run.
            let bland = self.stall > LP_STALL_THRESHOLD;
            let mut enter: Option<(usize, f64)> = None;
            let mut skipped_banned = false;
            for j in 0..self.n {
                if self.in_basis[j] || !enter_allowed(j) {
                    continue;
                }
                let rc = self.reduced_cost(j, self.scaled_cost(cost, j), &y);
                if rc < -LP_REDUCED_COST_TOL {
                    if banned.contains(&j) {
                        skipped_banned = true;
                        continue;
                    }
                    if bland {
                        enter = Some((j, rc));
                        break;
                    }
                    match enter {
                        Some((_, best)) if best <= rc => {}
                        _ => enter = Some((j, rc)),
                    }
                }
            }
            let (q, _) = match enter {
                Some(e) => e,
                None => {
                    if skipped_banned {
                        // Every remaining descent column was refused at this
                        // vertex. Reduced costs are dual products, so their
                        // own noise scales with the basis inverse; descent
                        // below that noise cannot be distinguished from
                        // optimality, and chasing it is what corrupts bases.
                        let mut worst = 0.0f64;
                        for &j in &banned {
                            let rc = self.reduced_cost(j, self.scaled_cost(cost, j), &y);
                            worst = worst.min(rc);
                        }
                        let cmax = self
                            .basis
                            .iter()
                            .fold(1.0f64, |a, &bj| a.max(self.scaled_cost(cost, bj).abs()));
                        let rc_noise =
                            10.0 * m as f64 * f64::EPSILON * self.binv_max * cmax;
                        if worst < -LP_REDUCED_COST_TOL.max(10.0 * rc_noise) {
                            return Err(Error::LpNumerics(
                                "every remaining descent column lacks a numerically usable pivot"
                                    .into(),
                            ));
                        }
                    }
                    // Optimal for this cost vector.
                    let mut obj = 0.0;
                    for (i, &bj) in self.basis.iter().enumerate() {
                        obj += self.scaled_cost(cost, bj) * self.x_b[i];
                    }
                    return Ok(obj);
                }
            };
            self.column(q, &mut col);
            let anorm = col.iter().fold(0.0f64, |a, &(_, v)| a.max(v.abs()));
            // Ratio test with one stability retry: if every blocking pivot
            // is tiny next to the direction's largest entry — or next to
            // the entering column's own largest entry, which means the
            // column sits numerically in the span of the basis — the
            // culprit is usually product-form drift, so the basis is
            // refactorized and the direction recomputed; if the fresh
            // direction is no better, the column is refused at this vertex.
            // Dividing the basis inverse by such a d[l] is what corrupts it.
            let chosen = loop {
                self.direction(&col, &mut d);
                let dinf = d.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
                // Direction entries are sums of m products against the basis
                // inverse, so their absolute noise scales with its largest
                // entry. Entries below that noise are phantoms: treating one
                // as a blocker and pivoting on it manufactures an exactly
                // singular basis.
                let noise = 10.0 * m as f64 * f64::EPSILON * self.binv_max * anorm;
                let cand = LP_PIVOT_TOL.max(1e-12 * dinf).max(noise);
                let floor = (1e-7 * dinf).max(1e-6 * anorm).max(10.0 * noise);
                // Blocking rows, as (row, effective pivot, ratio). A real
                // basic variable blocks where the step would drive it
                // negative, at ratio x_b/d; an artificial parked at zero
                // also blocks where the step would make it grow, at ratio
                // exactly zero (it is capped at zero so it can never
                // re-enter the solution with mass; sub-tolerance residue on
                // it is noise, not headroom).
                let blocker = |i: usize, d: &[f64], x_b: &[f64]| -> Option<(f64, f64)> {
                    if d[i] > cand {
                        Some((d[i], (x_b[i] / d[i]).max(0.0)))
                    } else if d[i] < -cand
                        && self.basis[i] >= self.n
                        && x_b[i] <= 100.0 * LP_PERTURB
                    {
                        Some((-d[i], 0.0))
                    } else {
                        None
                    }
                };
                // Two-pass test: bound the step with a whisker of slack so
                // near-tied ratios at degenerate vertices count as ties,
                // then take the best-conditioned blocking pivot within the
                // bound. Ties break by column index so runs stay
                // deterministic.
                let slack = 1e-13;
                let mut theta_max = f64::INFINITY;
                for i in 0..m {
                    if let Some((de, ratio)) = blocker(i, &d, &self.x_b) {
                        theta_max = theta_max.min(ratio + slack / de);
                    }
                }
                if !theta_max.is_finite() {
                    if !self.fresh {
                        self.refactor()?;
                        continue;
                    }
                    return Err(Error::LpUnbounded(
                        "descent direction never blocked: the program is unbounded".into(),
                    ));
                }
                let mut best: Option<(usize, f64, f64)> = None;
                for i in 0..m {
                    if let Some((de, ratio)) = blocker(i, &d, &self.x_b) {
                        if ratio <= theta_max {
                            let better = match best {
                                None => true,
                                Some((bi, bde, _)) => {
                                    de > bde + 1e-15
                                        || ((de - bde).abs() <= 1e-15
                                            && self.basis[i] < self.basis[bi])
                                }
                            };
                            if better {
                                best = Some((i, de, ratio));
                            }
                        }
                    }
                }
                let (l, del, ratio) = best.expect("a finite step bound implies a blocking row");
                // The product-form update scales row l of the inverse by
                // 1/del and folds it into every other row, so it can grow
                // the inverse by roughly dinf/del; refuse pivots that would
                // blow past the conditioning budget.
                if del < floor || self.binv_max * (1.0 + dinf / del) > cond_cap {
                    if !self.fresh {
                        self.refactor()?;
                        continue;
                    }
                    break None;
                }
                break Some((l, ratio));
            };
            let (l, theta) = match chosen {
                Some(lt) => lt,
                None => {
                    banned.push(q);
                    continue;
                }
            };
            // Update basic values and the basis inverse (product form).
            let dl = d[l];
            for i in 0..m {
                if i != l {
                    self.x_b[i] -= theta * d[i];
                    if self.x_b[i] < 0.0 {
                        self.x_b[i] = 0.0;
                    }
                }
            }
            // An artificial leaving at a capped step keeps whatever residual
            // mass the step did not consume. Its column is a unit vector, so
            // that residue folds exactly into the working right-hand side;
            // the final cleanup restores the stated rhs, so the fold is a
            // transient re-perturbation, not a change to the problem.
            let leftover = self.x_b[l] - theta * dl;
            if self.basis[l] >= self.n && leftover > 0.0 {
                self.rhs[self.basis[l] - self.n] -= leftover;
            }
            self.x_b[l] = theta;
            if self.basis[l] < self.n {
                self.in_basis[self.basis[l]] = false;
            }
            self.basis[l] = q;
            self.in_basis[q] = true;
            let (head, tail) = self.binv.split_at_mut(l * m);
            let (lrow, rest) = tail.split_at_mut(m);
            for c in 0..m {
                lrow[c] /= dl;
            }
            for (i, row) in head.chunks_exact_mut(m).enumerate() {
                let f = d[i];
                if f != 0.0 {
                    for c in 0..m {
                        row[c] -= f * lrow[c];
                    }
                }
            }
            for (k, row) in rest.chunks_exact_mut(m).enumerate() {
                let f = d[l + 1 + k];
                if f != 0.0 {
                    for c in 0..m {
                        row[c] -= f * lrow[c];
                    }
                }
            }
            self.binv_max = self.binv.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            self.fresh = false;
            self.pivots += 1;
            local_pivots += 1;
            banned.clear();
            if theta <= LP_PIVOT_TOL {
                self.stall += 1;
            } else {
                self.stall = 0;
            }
            if self.pivots % LP_REFACTOR_PERIOD == 0 {
                self.refactor()?;
            }
        }
    }

    /// Remove the anti-degeneracy perturbation and drive out whatever small
    /// negative basic values the exact right-hand side reveals, with
    /// dual-simplex pivots: the leaving row is the most negative basic, the
    /// entering column is chosen by the dual ratio test so the phase
    /// optimality just reached (all reduced costs nonnegative) is preserved.
    /// Each pivot strictly raises the objective toward the true optimum.
    fn cleanup(
        &mut self,
        cost: &dyn Fn(usize) -> f64,
        enter_allowed: &dyn Fn(usize) -> bool,
    ) -> Result<()> {
        self.rhs.copy_from_slice(&self.rhs_true);
        self.refactor_core(false)?;
        let m = self.m;
        let mut y = vec![0.0f64; m];
        let mut w = vec![0.0f64; m];
        let mut d = vec![0.0f64; m];
        let mut col = Vec::new();
        for _round in 0..(4 * m + 16) {
            let mut l = 0usize;
            let mut worst = 0.0f64;
            for i in 0..m {
                if self.x_b[i] < worst {
                    worst = self.x_b[i];
                    l = i;
                }
            }
            if worst >= -LP_FEASIBILITY_TOL {
                for v in self.x_b.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                return Ok(());
            }
            w.copy_from_slice(&self.binv[l * m..(l + 1) * m]);
            self.duals(cost, &mut y);
            // Entering column: among columns the step can push positive
            // (tableau row entry negative), the smallest reduced-cost ratio
            // keeps every reduced cost nonnegative; ties prefer the larger
            // pivot magnitude.
            let mut best: Option<(usize, f64)> = None;
            for j in 0..self.n {
                if self.in_basis[j] || !enter_allowed(j) {
                    continue;
                }
                let mut alpha = 0.0;
                for &(r, v) in &self.lp.cols[j] {
                    alpha += w[r] * (v * self.scale[r] * self.cscale[j]);
                }
                if alpha >= -1e-9 {
                    continue;
                }
                let rc = self.reduced_cost(j, self.scaled_cost(cost, j), &y).max(0.0);
                let ratio = rc / (-alpha);
                let better = match best {
                    None => true,
                    Some((bj, bratio)) => {
                        let balpha = {
                            let mut a = 0.0;
                            for &(r, v) in &self.lp.cols[bj] {
                                a += w[r] * (v * self.scale[r] * self.cscale[bj]);
                            }
                            a
                        };
                        ratio < bratio - 1e-15
                            || ((ratio - bratio).abs() <= 1e-15 && -alpha > -balpha)
                    }
                };
                if better {
                    best = Some((j, ratio));
                }
            }
            let Some((q, _)) = best else {
                return Err(Error::LpNumerics(format!(
                    "cleanup found no entering column for negative basic value {worst:.3e}"
                )));
            };
            self.column(q, &mut col);
            self.direction(&col, &mut d);
            if d[l].abs() < 1e-11 {
                return Err(Error::LpNumerics(
                    "cleanup pivot vanished between selection and application".into(),
                ));
            }
            let theta = self.x_b[l] / d[l];
            for i in 0..m {
                if i != l {
                    self.x_b[i] -= theta * d[i];
                }
            }
            self.x_b[l] = theta;
            if self.basis[l] < self.n {
                self.in_basis[self.basis[l]] = false;
            }
            self.basis[l] = q;
            self.in_basis[q] = true;
            self.pivots += 1;
            // Exactness over speed: cleanup pivots are few, so rebuild the
            // inverse and the basic values from scratch each time.
            self.refactor_core(false)?;
        }
        Err(Error::LpNumerics("cleanup did not restore feasibility".into()))
    }
}

/// Solve the program to optimality. Infeasibility and unboundedness are
/// reported as errors: every measure program assembled in this crate is
/// feasible and bounded by construction, so hitting either means the caller
/// built something else.
///
/// The solve starts with a tight conditioning budget; the rare program whose
/// optimal path genuinely needs wilder bases is retried with more headroom
/// before a numerical failure is reported.
pub fn solve(lp: &SparseLp) -> Result<LpOutcome> {
    let mut last = None;
    for cond_cap in [1e7, 1e10, 1e13] {
        match solve_capped(lp, cond_cap) {
            Err(Error::LpNumerics(msg)) => last = Some(Error::LpNumerics(msg)),
            other => return other,
        }
    }
    Err(last.expect("ladder ran at least once"))
}

fn solve_capped(lp: &SparseLp, cond_cap: f64) -> Result<LpOutcome> {
    let m = lp.n_rows;
    let n = lp.cols.len();
    if m == 0 {
        return Err(Error::LpNumerics("program has no rows".into()));
    }
    let mut sx = Simplex::new(lp);
    let cap = 400 * (m + n) + 20_000;

    // Phase one: minimize the artificial mass. Artificials parked on
    // redundant rows legitimately retain the rhs perturbation, so the
    // infeasibility threshold makes room for it.
    let phase1 = |j: usize| if j >= n { 1.0 } else { 0.0 };
    let art_mass = sx.run(&phase1, &|_| true, cap, cond_cap)?;
    let bnorm = lp.rhs.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let perturb_allowance = 3.0 * LP_PERTURB * (1.0 + bnorm) * m as f64;
    if art_mass > LP_FEASIBILITY_TOL * (1.0 + bnorm) + perturb_allowance {
        return Err(Error::LpInfeasible(format!(
            "phase one terminated with artificial mass {art_mass:.3e}"
        )));
    }
    sx.refactor()?;

    // Phase two: artificials cost nothing and may not re-enter.
    let phase2 = |j: usize| if j >= n { 0.0 } else { lp.obj[j] };
    sx.run(&phase2, &|j| j < n, cap, cond_cap)?;
    // Drop the perturbation and restore exact feasibility at the optimum.
    sx.cleanup(&phase2, &|j| j < n)?;
    // Final clean factorization: the certificates below are computed from
    // exact basic solves, not from the drifted product-form inverse.
    sx.refactor()?;

    // Extract the primal point (undoing the column scaling) and the duals
    // for the stated constraints.
    let mut x = vec![0.0f64; n];
    for (i, &bj) in sx.basis.iter().enumerate() {
        if bj < n {
            x[bj] = sx.x_b[i] * sx.cscale[bj];
        } else if sx.x_b[i] > LP_FEASIBILITY_TOL {
            return Err(Error::LpNumerics(format!(
                "artificial variable still carries mass {:.3e} after phase two",
                sx.x_b[i]
            )));
        }
    }
    let mut y_scaled = vec![0.0f64; m];
    sx.duals(&phase2, &mut y_scaled);
    let y: Vec<f64> = (0..m).map(|r| y_scaled[r] * sx.scale[r]).collect();

    // Certify the answer against the original data.
    let mut residual = vec![0.0f64; m];
    for r in 0..m {
        residual[r] = -lp.rhs[r];
    }
    for (j, col) in lp.cols.iter().enumerate() {
        if x[j] != 0.0 {
            for &(r, v) in col {
                residual[r] += v * x[j];
            }
        }
    }
    let worst = residual.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if worst > LP_FEASIBILITY_TOL * (1.0 + bnorm) * 10.0 {
        return Err(Error::LpNumerics(format!(
            "primal residual {worst:.3e} exceeds tolerance after optimality"
        )));
    }
    let primal_obj: f64 = x.iter().zip(&lp.obj).map(|(xv, cv)| xv * cv).sum();
    let dual_obj: f64 = y.iter().zip(&lp.rhs).map(|(yv, bv)| yv * bv).sum();
    let gap = (primal_obj - dual_obj).abs();
    if gap > LP_SLACKNESS_TOL * (1.0 + primal_obj.abs() + dual_obj.abs()) {
        return Err(Error::LpNumerics(format!(
            "strong duality violated: primal {primal_obj:.9e}, dual {dual_obj:.9e}"
        )));
    }
    Ok(LpOutcome { x, y, objective: primal_obj, pivots: sx.pivots, basis: sx.basis.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_variable_corner_solution() {
        // min -x - 2y  s.t.  x + y + s1 = 4,  x + 3y + s2 = 6.
        // Optimum at (3, 1) with objective -5.
        let mut lp = SparseLp::new(2);
        lp.add_column(-1.0, &[(0, 1.0), (1, 1.0)]);
        lp.add_column(-2.0, &[(0, 1.0), (1, 3.0)]);
        lp.add_column(0.0, &[(0, 1.0)]);
        lp.add_column(0.0, &[(1, 1.0)]);
        lp.set_rhs(0, 4.0);
        lp.set_rhs(1, 6.0);
        let out = solve(&lp).unwrap();
        assert_abs_diff_eq!(out.objective, -5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.x[0], 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.x[1], 1.0, epsilon = 1e-9);
        // Duals: y = (-1/2, -1/2) satisfies both tight constraints.
        assert_abs_diff_eq!(out.y[0], -0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(out.y[1], -0.5, epsilon = 1e-9);
    }

    #[test]
    fn negative_rhs_rows_are_flipped() {
        // min x  s.t.  -x + s = -2  (that is, x - s = 2): optimum x = 2.
        let mut lp = SparseLp::new(1);
        lp.add_column(1.0, &[(0, -1.0)]);
        lp.add_column(0.0, &[(0, 1.0)]);
        lp.set_rhs(0, -2.0);
        let out = solve(&lp).unwrap();
        assert_abs_diff_eq!(out.objective, 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.x[0], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_program_is_reported() {
        // x1 + x2 = -1 with x >= 0.
        let mut lp = SparseLp::new(1);
        lp.add_column(1.0, &[(0, 1.0)]);
        lp.add_column(1.0, &[(0, 1.0)]);
        lp.set_rhs(0, -1.0);
        assert!(matches!(solve(&lp).unwrap_err(), Error::LpInfeasible(_)));
    }

    #[test]
    fn unbounded_program_is_reported() {
        // min -x  s.t.  x - y = 0: the ray x = y -> infinity.
        let mut lp = SparseLp::new(1);
        lp.add_column(-1.0, &[(0, 1.0)]);
        lp.add_column(0.0, &[(0, -1.0)]);
        lp.set_rhs(0, 0.0);
        assert!(matches!(solve(&lp).unwrap_err(), Error::LpUnbounded(_)));
    }

    #[test]
    fn duplicated_rows_stay_solvable() {
        // The same constraint twice: phase one leaves an artificial basic at
        // zero on the redundant row, which must not disturb the optimum.
        let mut lp = SparseLp::new(3);
        lp.add_column(-1.0, &[(0, 1.0), (1, 1.0), (2, 2.0)]);
        lp.add_column(-2.0, &[(0, 1.0), (1, 1.0), (2, 2.0)]);
        lp.add_column(0.0, &[(0, 1.0), (1, 1.0), (2, 2.0)]);
        lp.set_rhs(0, 1.0);
        lp.set_rhs(1, 1.0);
        lp.set_rhs(2, 2.0);
        let out = solve(&lp).unwrap();
        assert_abs_diff_eq!(out.objective, -2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.x[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_vertices_terminate() {
        // Many columns tied at a degenerate vertex (rhs mostly zero).
        let mut lp = SparseLp::new(4);
        for j in 0..12 {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            lp.add_column(
                -(1.0 + j as f64 * 0.1),
                &[(0, 1.0), (1, sign), (2, -sign), (3, (j % 3) as f64 - 1.0)],
            );
        }
        for r in 1..4 {
            lp.add_column(0.0, &[(r, 1.0)]);
            lp.add_column(0.0, &[(r, -1.0)]);
        }
        lp.set_rhs(0, 1.0);
        let out = solve(&lp).unwrap();
        // Mass 1 on the cheapest column is feasible (slacks absorb the rest),
        // so the optimum is the most negative cost.
        assert_abs_diff_eq!(out.objective, -2.1, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_balance_rows_settle_on_the_padded_vertex() {
        // Stationarity of an absorbing random walk plus a mass row: the five
        // balance rows all have zero right-hand sides, so the walk to the
        // optimum is fully degenerate, and the negative-cost chain columns
        // tempt the pricing even though no combination of them can hold
        // mass. The only optimal vertex parks everything on the zero-cost
        // pad. This is the miniature of the measure programs that stressed
        // the solver hardest.
        let interior = 5usize;
        let mut lp = SparseLp::new(interior + 1);
        let norm = interior;
        for i in 0..interior {
            // Walk columns: leave node i toward both sides; mass leaving at
            // the ends is absorbed (no row receives it).
            let mut entries: Vec<(usize, f64)> = vec![(i, 2.0), (norm, 1.0)];
            if i > 0 {
                entries.push((i - 1, -1.0));
            }
            if i + 1 < interior {
                entries.push((i + 1, -1.0));
            }
            lp.add_column(-1.0, &entries);
        }
        lp.add_column(0.0, &[(norm, 1.0)]);
        lp.set_rhs(norm, 1.0);
        let out = solve(&lp).unwrap();
        assert_abs_diff_eq!(out.objective, 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(out.x[interior], 1.0, epsilon = 1e-7);
        for &w in &out.x[..interior] {
            assert!(w.abs() <= 1e-7, "chain column carries mass {w}");
        }
    }

    #[test]
    fn random_programs_satisfy_strong_duality() {
        // Feasible-by-construction programs with a mass cap so none is
        // unbounded. The known feasible point bounds the optimum from above;
        // the internal residual and duality-gap certificates do the rest.
        let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1ab1e);
        for case in 0..50 {
            let m = rng.gen_range(3..9usize);
            let n = m + rng.gen_range(3..15usize);
            let mut dense = vec![vec![0.0f64; n]; m];
            let mut costs = vec![0.0f64; n];
            let mut lp = SparseLp::new(m + 1);
            for j in 0..n {
                let mut entries: Vec<(usize, f64)> = Vec::new();
                for (r, dr) in dense.iter_mut().enumerate() {
                    if rng.gen_bool(0.6) {
                        let v = rng.gen_range(-2.0..2.0);
                        entries.push((r, v));
                        dr[j] = v;
                    }
                }
                entries.push((m, 1.0));
                costs[j] = rng.gen_range(-1.0..3.0);
                lp.add_column(costs[j], &entries);
            }
            lp.add_column(0.0, &[(m, 1.0)]); // slack of the mass cap
            let x_feas: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.0..2.0) } else { 0.0 })
                .collect();
            for r in 0..m {
                let b: f64 = (0..n).map(|j| dense[r][j] * x_feas[j]).sum();
                lp.set_rhs(r, b);
            }
            let mass: f64 = x_feas.iter().sum();
            lp.set_rhs(m, 50.0f64.max(mass + 1.0));
            let out = solve(&lp).unwrap_or_else(|e| panic!("case {case}: {e}"));
            let feas_cost: f64 = (0..n).map(|j| costs[j] * x_feas[j]).sum();
            assert!(
                out.objective <= feas_cost + 1e-7,
                "case {case}: objective {} beats feasible {feas_cost}",
                out.objective
            );
            for (j, &xv) in out.x.iter().enumerate() {
                assert!(xv >= -1e-9, "case {case}: x[{j}] = {xv}");
            }
        }
    }
}
