//! Eigenvalue models of the covariance operator and the spectral-gap
//! combinatorics built on them.
//!
//! A [`Spectrum`] is a finite non-increasing sequence of positive variances
//! `lambda_1 >= ... >= lambda_p > 0`. Four families are supported: isotropic
//! (`lambda_j = 1`), exponential decay (`e^{-alpha j}`), polynomial decay
//! (`j^{-alpha}`), and approximately polynomial decay (`u_j * j^{-alpha}`
//! with seeded multiplicative perturbations `u_j` in `[1/C_ev, C_ev]`,
//! re-sorted so monotonicity holds; sorting preserves the envelope
//! `C_ev^{-1} j^{-alpha} <= lambda_(j) <= C_ev j^{-alpha}`).
//!
//! The gap diagnostics quantify how well an index `r` separates the spectrum:
//! `sum_below = sum_{j<=r} lambda_j/(lambda_j - lambda_{r+1})`,
//! `sum_above = sum_{k>r} lambda_k/(lambda_r - lambda_k)` and the relative
//! gap `lambda_r/(lambda_r - lambda_{r+1})`. All three are finite exactly
//! when `lambda_r > lambda_{r+1}`; a zero gap yields a flagged report, never
//! a division by zero. Good cut indices are found by scanning a window and
//! minimizing the normalized criterion
//! `max(sums/(r*log(e*r)), rel_gap/r)`, which makes the existential gap
//! lemmas checkable without knowing their constants: the achieved values are
//! returned to the caller.
//!
//! Eigenvalue blocks of comparable magnitude (`lambda_{first}/lambda_{last}
//! <= C2`) are constructed greedily by [`Spectrum::build_grouping`]; the
//! variance bound in [`crate::risk`] consumes them.
//!
//! Spectral indices (`r`, `d`, `j`) are 1-based throughout, matching the
//! formulas above.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Eigenvalue model family, carrying its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumKind {
    /// `lambda_j = 1` for all j.
    Isotropic,
    /// `lambda_j = e^{-alpha j}`, alpha > 0.
    Exponential { alpha: f64 },
    /// `lambda_j = j^{-alpha}`, alpha > 1.
    Polynomial { alpha: f64 },
    /// `lambda_j = u_j * j^{-alpha}` with i.i.d. log-uniform `u_j` in
    /// `[1/c_ev, c_ev]` drawn from `seed`, sorted to be non-increasing.
    ApproxPolynomial { alpha: f64, c_ev: f64, seed: u64 },
}

impl SpectrumKind {
    /// The decay exponent `alpha`, when the family has one. The isotropic
    /// family is flat and returns `None`.
    pub fn decay_exponent(&self) -> Option<f64> {
        match *self {
            SpectrumKind::Isotropic => None,
            SpectrumKind::Exponential { alpha }
            | SpectrumKind::Polynomial { alpha }
            | SpectrumKind::ApproxPolynomial { alpha, .. } => Some(alpha),
        }
    }
}

/// Non-increasing positive eigenvalues plus the model that generated them.
#[derive(Debug, Clone, Serialize)]
pub struct Spectrum {
    pub kind: SpectrumKind,
    values: Vec<f64>,
}

/// Finite gap sums at index `r`; `None` when `lambda_r = lambda_{r+1}`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapSums {
    /// `sum_{j<=r} lambda_j / (lambda_j - lambda_{r+1})`, always >= 1.
    pub sum_below: f64,
    /// `sum_{r<k<=p} lambda_k / (lambda_r - lambda_k)`, >= 0 (0 iff r = p... never: r < p).
    pub sum_above: f64,
    /// `lambda_r / (lambda_r - lambda_{r+1})`, always >= 1.
    pub rel_gap: f64,
}

/// Gap diagnostics at one index.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapReport {
    pub r: usize,
    /// `None` flags a zero spectral gap at `r`.
    pub sums: Option<GapSums>,
}

/// Result of a windowed gap-index search.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapSearch {
    pub r: usize,
    pub sums: GapSums,
    /// The normalized sum criterion achieved at `r`:
    /// for the below-search `sum_below/(r log(er))`, for the above-search
    /// `(sum_below+sum_above)/(r log(er))`.
    pub norm_sums: f64,
    /// `rel_gap / r` at `r`.
    pub norm_gap: f64,
}

impl GapSearch {
    /// The minimized quantity: `max(norm_sums, norm_gap)`.
    pub fn score(&self) -> f64 {
        self.norm_sums.max(self.norm_gap)
    }
}

/// Partition of `{1, ..., d}` into blocks of comparable eigenvalues.
#[derive(Debug, Clone, Serialize)]
pub struct Grouping {
    /// Block right endpoints `r_1 < ... < r_{d'}`; block l is
    /// `{r_{l-1}+1, ..., r_l}` with `r_0 = 0`. The last endpoint equals `d`.
    pub breakpoints: Vec<usize>,
    /// Achieved `max_l lambda_{r_{l-1}+1} / lambda_{r_l}` (<= the configured C2).
    pub ratio_bound: f64,
    /// `r_{d'} / d`; 1 by construction since the last block is cut at `d`.
    pub overshoot: f64,
}

impl Grouping {
    /// Number of blocks.
    pub fn len(&self) -> usize {
        self.breakpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.breakpoints.is_empty()
    }

    /// Iterate blocks as 1-based inclusive ranges `(start, end)`.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let starts = std::iter::once(1).chain(self.breakpoints.iter().map(|&r| r + 1));
        starts.zip(self.breakpoints.iter().copied())
    }
}

/// `log(e * r)` = `1 + log r`, the normalization used by the gap criteria.
pub fn log_er(r: usize) -> f64 {
    1.0 + (r as f64).ln()
}

impl Spectrum {
    /// Build the eigenvalue sequence for `kind` truncated at dimension `p`.
    pub fn build(kind: SpectrumKind, p: usize) -> Result<Spectrum> {
        if p == 0 {
            return Err(Error::parameter("spectrum dimension p must be >= 1"));
        }
        let values = match &kind {
            SpectrumKind::Isotropic => vec![1.0; p],
            SpectrumKind::Exponential { alpha } => {
                if !(*alpha > 0.0) {
                    return Err(Error::parameter(format!(
                        "exponential spectrum needs alpha > 0, got {alpha}"
                    )));
                }
                (1..=p).map(|j| (-alpha * j as f64).exp()).collect()
            }
            SpectrumKind::Polynomial { alpha } => {
                if !(*alpha > 1.0) {
                    return Err(Error::parameter(format!(
                        "polynomial spectrum needs alpha > 1, got {alpha}"
                    )));
                }
                (1..=p).map(|j| (j as f64).powf(-alpha)).collect()
            }
            SpectrumKind::ApproxPolynomial { alpha, c_ev, seed } => {
                if !(*alpha > 1.0) {
                    return Err(Error::parameter(format!(
                        "approx-polynomial spectrum needs alpha > 1, got {alpha}"
                    )));
                }
                if !(*c_ev >= 1.0) {
                    return Err(Error::parameter(format!(
                        "approx-polynomial spectrum needs c_ev >= 1, got {c_ev}"
                    )));
                }
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                let half_width = c_ev.ln();
                let mut values: Vec<f64> = (1..=p)
                    .map(|j| {
                        let log_u = rng.gen::<f64>() * 2.0 * half_width - half_width;
                        log_u.exp() * (j as f64).powf(-alpha)
                    })
                    .collect();
                values.sort_by(|a, b| b.partial_cmp(a).unwrap());
                values
            }
        };
        Ok(Spectrum { kind, values })
    }

    /// Truncation dimension p.
    pub fn p(&self) -> usize {
        self.values.len()
    }

    /// `lambda_j`, 1-based.
    pub fn lambda(&self, j: usize) -> f64 {
        self.values[j - 1]
    }

    /// All eigenvalues, non-increasing.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `sum_j lambda_j`.
    pub fn trace(&self) -> f64 {
        crate::risk::pairwise_sum_iter(self.values.iter().copied())
    }

    /// `sum_{k>r} lambda_k`.
    pub fn tail_trace(&self, r: usize) -> f64 {
        crate::risk::pairwise_sum_iter(self.values[r..].iter().copied())
    }

    /// Gap diagnostics at `r`; requires `1 <= r < p`.
    pub fn gap_report(&self, r: usize) -> Result<GapReport> {
        let p = self.p();
        if r < 1 || r >= p {
            return Err(Error::parameter(format!(
                "gap report needs 1 <= r < p, got r = {r}, p = {p}"
            )));
        }
        let lam_r = self.values[r - 1];
        let lam_r1 = self.values[r];
        if lam_r <= lam_r1 {
            return Ok(GapReport { r, sums: None });
        }
        // lambda_r > lambda_{r+1} makes every denominator below positive:
        // lambda_j - lambda_{r+1} >= lam_r - lam_r1 for j <= r and
        // lambda_r - lambda_k >= lam_r - lam_r1 for k > r, by monotonicity.
        let sum_below = crate::risk::pairwise_sum_iter(
            self.values[..r].iter().map(|&lam| lam / (lam - lam_r1)),
        );
        let sum_above = crate::risk::pairwise_sum_iter(
            self.values[r..].iter().map(|&lam| lam / (lam_r - lam)),
        );
        let rel_gap = lam_r / (lam_r - lam_r1);
        Ok(GapReport {
            r,
            sums: Some(GapSums {
                sum_below,
                sum_above,
                rel_gap,
            }),
        })
    }

    /// Scan `r` in `[ceil(c1*d), min(d, p-1)]` and return the index that
    /// minimizes `max(sum_below/(r log(er)), rel_gap/r)`, together with the
    /// achieved normalized values. `None` when every candidate has zero gap.
    pub fn find_gap_index_below(&self, d: usize, c1: f64) -> Result<Option<GapSearch>> {
        if !(c1 > 0.0 && c1 < 1.0) {
            return Err(Error::parameter(format!(
                "gap search needs 0 < c1 < 1, got {c1}"
            )));
        }
        if (d as f64) < 1.0 / c1 {
            return Err(Error::parameter(format!(
                "gap search needs d >= 1/c1, got d = {d}, c1 = {c1}"
            )));
        }
        let lo = (c1 * d as f64).ceil() as usize;
        let hi = d.min(self.p() - 1);
        Ok(self.scan_window(lo.max(1), hi, false))
    }

    /// Scan `r` in `[d, min(floor(C1*d), p-1)]` minimizing
    /// `max((sum_below+sum_above)/(r log(er)), rel_gap/r)`.
    pub fn find_gap_index_above(&self, d: usize, c1: f64) -> Result<Option<GapSearch>> {
        if !(c1 > 1.0) {
            return Err(Error::parameter(format!(
                "gap search needs C1 > 1, got {c1}"
            )));
        }
        if d < 1 {
            return Err(Error::parameter("gap search needs d >= 1"));
        }
        let hi = ((c1 * d as f64).floor() as usize).min(self.p() - 1);
        Ok(self.scan_window(d, hi, true))
    }

    fn scan_window(&self, lo: usize, hi: usize, include_above: bool) -> Option<GapSearch> {
        let mut best: Option<GapSearch> = None;
        for r in lo..=hi {
            let report = self.gap_report(r).expect("window stays inside [1, p)");
            let Some(sums) = report.sums else { continue };
            let raw = if include_above {
                sums.sum_below + sums.sum_above
            } else {
                sums.sum_below
            };
            let candidate = GapSearch {
                r,
                sums,
                norm_sums: raw / (r as f64 * log_er(r)),
                norm_gap: sums.rel_gap / r as f64,
            };
            if best.is_none_or(|b| candidate.score() < b.score()) {
                best = Some(candidate);
            }
        }
        best
    }

    /// Greedily partition `{1, ..., d}` into blocks whose first/last
    /// eigenvalue ratio stays within `c2`: each block is extended as far as
    /// the ratio allows (its lookahead never passes `p-1`), and the last
    /// block is cut at exactly `d`. Requires `c2 >= 1` and `d <= p`.
    pub fn build_grouping(&self, d: usize, c2: f64) -> Result<Grouping> {
        if !(c2 >= 1.0) {
            return Err(Error::parameter(format!(
                "grouping needs C2 >= 1, got {c2}"
            )));
        }
        if d < 1 || d > self.p() {
            return Err(Error::parameter(format!(
                "grouping needs 1 <= d <= p, got d = {d}, p = {}",
                self.p()
            )));
        }
        let mut breakpoints = Vec::new();
        let mut ratio_bound: f64 = 1.0;
        let mut start = 1usize;
        while start <= d {
            let lam_start = self.values[start - 1];
            let mut end = start;
            // A singleton block always satisfies the ratio, so the greedy
            // step advances by at least one index.
            while end < self.p() - 1 && end < d && lam_start / self.values[end] <= c2 {
                end += 1;
            }
            if lam_start / self.values[end - 1] > c2 {
                // Unreachable for c2 >= 1; defensive parity with the scan above.
                return Err(Error::parameter(format!(
                    "grouping stuck at index {start}: ratio exceeds C2 = {c2}"
                )));
            }
            let end = end.min(d);
            ratio_bound = ratio_bound.max(lam_start / self.values[end - 1]);
            breakpoints.push(end);
            start = end + 1;
        }
        let overshoot = *breakpoints.last().expect("d >= 1 gives one block") as f64 / d as f64;
        Ok(Grouping {
            breakpoints,
            ratio_bound,
            overshoot,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn poly2(p: usize) -> Spectrum {
        Spectrum::build(SpectrumKind::Polynomial { alpha: 2.0 }, p).unwrap()
    }

    fn exp1(p: usize) -> Spectrum {
        Spectrum::build(SpectrumKind::Exponential { alpha: 1.0 }, p).unwrap()
    }

    #[test]
    fn exponential_values_are_exact() {
        let s = exp1(3);
        assert_eq!(s.values(), &[(-1.0f64).exp(), (-2.0f64).exp(), (-3.0f64).exp()]);
    }

    #[test]
    fn polynomial_values_are_exact() {
        let s = poly2(3);
        assert_relative_eq!(s.lambda(1), 1.0);
        assert_relative_eq!(s.lambda(2), 0.25);
        assert_relative_eq!(s.lambda(3), 1.0 / 9.0, max_relative = 1e-15);
    }

    #[test]
    fn approx_polynomial_with_unit_envelope_degenerates_to_polynomial() {
        let a = Spectrum::build(
            SpectrumKind::ApproxPolynomial {
                alpha: 2.0,
                c_ev: 1.0,
                seed: 7,
            },
            20,
        )
        .unwrap();
        let b = poly2(20);
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn approx_polynomial_keeps_envelope_after_sorting() {
        for seed in 0..20u64 {
            let s = Spectrum::build(
                SpectrumKind::ApproxPolynomial {
                    alpha: 2.0,
                    c_ev: 1.5,
                    seed,
                },
                200,
            )
            .unwrap();
            for j in 1..=s.p() {
                let envelope = (j as f64).powf(-2.0);
                assert!(s.lambda(j) <= 1.5 * envelope * (1.0 + 1e-12));
                assert!(s.lambda(j) >= envelope / 1.5 * (1.0 - 1e-12));
                if j > 1 {
                    assert!(s.lambda(j) <= s.lambda(j - 1));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Spectrum::build(SpectrumKind::Polynomial { alpha: 1.0 }, 5).is_err());
        assert!(Spectrum::build(SpectrumKind::Exponential { alpha: 0.0 }, 5).is_err());
        assert!(Spectrum::build(
            SpectrumKind::ApproxPolynomial {
                alpha: 2.0,
                c_ev: 0.5,
                seed: 0
            },
            5
        )
        .is_err());
        assert!(Spectrum::build(SpectrumKind::Isotropic, 0).is_err());
    }

    #[test]
    fn gap_sums_polynomial_r1_match_hand_values() {
        // sum_below at r=1: lambda_1/(lambda_1 - lambda_2) = 1/(1 - 1/4) = 4/3.
        let s = poly2(2);
        let g = s.gap_report(1).unwrap().sums.unwrap();
        assert_relative_eq!(g.sum_below, 4.0 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn gap_sum_above_matches_telescoping_closed_form() {
        // sum_{k=2}^{p} (k^-2)/(1 - k^-2) = sum 1/(k^2-1)
        //   = 3/4 - (1/p + 1/(p+1))/2  by partial fractions.
        let p = 20_000;
        let s = poly2(p);
        let g = s.gap_report(1).unwrap().sums.unwrap();
        let pf = p as f64;
        let closed = 0.75 - 0.5 * (1.0 / pf + 1.0 / (pf + 1.0));
        assert_relative_eq!(g.sum_above, closed, max_relative = 1e-12);
    }

    #[test]
    fn exponential_rel_gap_is_geometric() {
        // lambda_r/(lambda_r - lambda_{r+1}) = 1/(1 - e^{-alpha}), any r.
        let s = exp1(10);
        let expected = 1.0 / (1.0 - (-1.0f64).exp());
        for r in 1..10 {
            let g = s.gap_report(r).unwrap().sums.unwrap();
            assert_relative_eq!(g.rel_gap, expected, max_relative = 1e-14);
        }
        assert_relative_eq!(expected, 1.5819767068693265, max_relative = 1e-15);
    }

    #[test]
    fn exponential_sum_below_bounded_by_geometric_series() {
        // Each term lambda_j/(lambda_j - lambda_{r+1}) <= 1/(1 - e^{-alpha}).
        for alpha in [0.5, 1.0, 2.0] {
            let s = Spectrum::build(SpectrumKind::Exponential { alpha }, 40).unwrap();
            let cap = 1.0 / (1.0 - (-alpha).exp());
            for r in 1..s.p() {
                let g = s.gap_report(r).unwrap().sums.unwrap();
                assert!(g.sum_below <= cap * r as f64 * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn zero_gap_is_flagged_not_divided() {
        let s = Spectrum::build(SpectrumKind::Isotropic, 6).unwrap();
        for r in 1..6 {
            assert!(s.gap_report(r).unwrap().sums.is_none());
        }
        assert!(s.gap_report(0).is_err());
        assert!(s.gap_report(6).is_err());
    }

    #[test]
    fn gap_sums_are_at_least_one_when_defined() {
        for spec in [poly2(50), exp1(50)] {
            for r in 1..spec.p() {
                let g = spec.gap_report(r).unwrap().sums.unwrap();
                assert!(g.sum_below >= 1.0);
                assert!(g.rel_gap >= 1.0);
                assert!(g.sum_above >= 0.0);
            }
        }
    }

    /// Brute-force re-scan used as the oracle for the windowed searches.
    fn scan_oracle(
        s: &Spectrum,
        lo: usize,
        hi: usize,
        include_above: bool,
    ) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for r in lo..=hi {
            if let Some(g) = s.gap_report(r).unwrap().sums {
                let raw = if include_above {
                    g.sum_below + g.sum_above
                } else {
                    g.sum_below
                };
                let score = (raw / (r as f64 * log_er(r))).max(g.rel_gap / r as f64);
                if best.is_none_or(|(_, b)| score < b) {
                    best = Some((r, score));
                }
            }
        }
        best
    }

    #[test]
    fn gap_search_below_matches_brute_force_scan() {
        let s = poly2(40);
        let found = s.find_gap_index_below(10, 0.5).unwrap().unwrap();
        let (r, score) = scan_oracle(&s, 5, 10, false).unwrap();
        assert_eq!(found.r, r);
        assert_relative_eq!(found.score(), score, max_relative = 1e-15);
        // The normalized sum criterion stays O(1) for exact polynomial decay.
        assert!(found.norm_sums < 2.0);
    }

    #[test]
    fn gap_search_below_exponential_d8() {
        let s = exp1(40);
        let found = s.find_gap_index_below(8, 0.5).unwrap().unwrap();
        // rel_gap is constant in r, sum_below/(r log er) is decreasing, so the
        // window maximizes r.
        assert_eq!(found.r, 8);
        assert_relative_eq!(
            found.norm_gap,
            1.5819767068693265 / 8.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn gap_search_above_matches_brute_force_scan() {
        let s = poly2(60);
        let found = s.find_gap_index_above(5, 2.0).unwrap().unwrap();
        let (r, score) = scan_oracle(&s, 5, 10, true).unwrap();
        assert_eq!(found.r, r);
        assert_relative_eq!(found.score(), score, max_relative = 1e-15);
    }

    #[test]
    fn gap_search_above_approx_polynomial_stays_bounded() {
        for seed in [1u64, 2, 3] {
            let s = Spectrum::build(
                SpectrumKind::ApproxPolynomial {
                    alpha: 2.0,
                    c_ev: 1.5,
                    seed,
                },
                400,
            )
            .unwrap();
            for d in [5usize, 10, 20, 40] {
                let found = s.find_gap_index_above(d, 2.0).unwrap().unwrap();
                assert!(found.r >= d && found.r <= 2 * d);
                assert!(found.score().is_finite());
            }
        }
    }

    #[test]
    fn gap_search_isotropic_returns_none() {
        let s = Spectrum::build(SpectrumKind::Isotropic, 12).unwrap();
        assert!(s.find_gap_index_below(6, 0.5).unwrap().is_none());
        assert!(s.find_gap_index_above(4, 2.0).unwrap().is_none());
    }

    #[test]
    fn grouping_exponential_unit_ratio_gives_singletons() {
        let s = exp1(20);
        let g = s.build_grouping(6, 1.0).unwrap();
        assert_eq!(g.breakpoints, vec![1, 2, 3, 4, 5, 6]);
        assert_relative_eq!(g.ratio_bound, 1.0);
        assert_relative_eq!(g.overshoot, 1.0);
    }

    #[test]
    fn grouping_isotropic_is_single_block() {
        let s = Spectrum::build(SpectrumKind::Isotropic, 20).unwrap();
        let g = s.build_grouping(6, 1.0).unwrap();
        assert_eq!(g.breakpoints, vec![6]);
        assert_eq!(g.len(), 1);
        assert_relative_eq!(g.ratio_bound, 1.0);
    }

    #[test]
    fn grouping_polynomial_doubles_blocks() {
        let s = poly2(40);
        let g = s.build_grouping(8, 4.0).unwrap();
        assert_eq!(g.breakpoints, vec![2, 6, 8]);
        assert!(g.ratio_bound <= 4.0);
        assert_relative_eq!(g.overshoot, 1.0);
        let blocks: Vec<_> = g.blocks().collect();
        assert_eq!(blocks, vec![(1, 2), (3, 6), (7, 8)]);
    }

    #[test]
    fn grouping_blocks_always_satisfy_ratio_bound() {
        for c2 in [1.0, 1.5, 2.0, 4.0, 10.0] {
            for spec in [poly2(64), exp1(64)] {
                let g = spec.build_grouping(12, c2).unwrap();
                for (start, end) in g.blocks() {
                    assert!(spec.lambda(start) / spec.lambda(end) <= c2 * (1.0 + 1e-12));
                }
                assert_eq!(*g.breakpoints.last().unwrap(), 12);
            }
        }
    }

    #[test]
    fn grouping_rejects_bad_parameters() {
        let s = poly2(10);
        assert!(s.build_grouping(11, 4.0).is_err()); // needs d <= p
        assert!(s.build_grouping(0, 4.0).is_err());
        assert!(s.build_grouping(5, 0.5).is_err());
    }

    #[test]
    fn grouping_covers_the_full_spectrum() {
        let s = poly2(10);
        let g = s.build_grouping(10, 4.0).unwrap();
        assert_eq!(*g.breakpoints.last().unwrap(), 10);
        let covered: usize = g.blocks().map(|(lo, hi)| hi - lo + 1).sum();
        assert_eq!(covered, 10);
        for (lo, hi) in g.blocks() {
            assert!(s.lambda(lo) / s.lambda(hi) <= 4.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn polynomial_gap_sums_obey_r_log_r_growth() {
        // Normalized ratio (sum_below + sum_above)/(r log(er)) stays bounded;
        // its running max moves < 20% across the top tested decade.
        let s = poly2(1500);
        let mut cummax: f64 = 0.0;
        let mut at_30 = 0.0;
        for r in 2..=300 {
            let g = s.gap_report(r).unwrap().sums.unwrap();
            let ratio = (g.sum_below + g.sum_above) / (r as f64 * log_er(r));
            cummax = cummax.max(ratio);
            if r == 30 {
                at_30 = cummax;
            }
        }
        assert!(cummax < 1.2 * at_30, "cummax {cummax} vs at_30 {at_30}");
        assert!(cummax < 5.0);
    }
}
