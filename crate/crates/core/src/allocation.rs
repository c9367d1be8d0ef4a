//! Heterogeneous compression-ratio allocation.
//!
//! Sites are grouped by matrix type across all layers. Each site is scored by
//! its minimum achievable truncation loss at the target ratio; scores are
//! mapped through `ℓ = 1 / ln(score)` and the group budget `|g| · R` is split
//! in proportion to `ℓ`, so sites that lose more under truncation are
//! compressed less.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::calibration::{MatrixType, WeightSite};
use crate::engines::gram_min_loss;
use crate::error::{Error, Result};
use crate::linalg::rank_for_ratio;
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationParams {
    /// Scores are clamped below at this value before taking `1/ln`.
    pub score_floor: f64,
    pub ratio_floor: f64,
    pub ratio_ceiling: f64,
}

impl Default for AllocationParams {
    fn default() -> Self {
        Self {
            score_floor: libm::exp(0.1),
            ratio_floor: 0.02,
            ratio_ceiling: 0.98,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub site_id: String,
    pub matrix_type: MatrixType,
    pub rows: usize,
    pub cols: usize,
    pub allocated_ratio: f64,
    pub resolved_rank: usize,
    /// Minimum truncation loss used for scoring; absent for homogeneous plans.
    pub l_min_score: Option<f64>,
}

/// Per-site ratios and ranks, ordered by `site_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub target_ratio: f64,
    pub entries: Vec<PlanEntry>,
}

impl CompressionPlan {
    pub fn entry(&self, site_id: &str) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.site_id == site_id)
    }

    pub fn dense_params(&self) -> usize {
        self.entries.iter().map(|e| e.rows * e.cols).sum()
    }

    pub fn factored_params(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.resolved_rank * (e.rows + e.cols))
            .sum()
    }

    /// Mean allocated ratio per matrix type.
    pub fn group_means(&self) -> BTreeMap<MatrixType, f64> {
        let mut sums: BTreeMap<MatrixType, (f64, usize)> = BTreeMap::new();
        for e in &self.entries {
            let s = sums.entry(e.matrix_type).or_insert((0.0, 0));
            s.0 += e.allocated_ratio;
            s.1 += 1;
        }
        sums.into_iter()
            .map(|(t, (s, n))| (t, s / n as f64))
            .collect()
    }
}

/// Minimum truncation loss of every site at the rank implied by
/// `target_ratio`, computed from its Gram.
pub fn score_sites(
    sites: &[WeightSite],
    grams: &BTreeMap<String, DenseMatrix>,
    target_ratio: f64,
) -> Result<BTreeMap<String, f64>> {
    let mut scores = BTreeMap::new();
    for site in sites {
        let gram = grams
            .get(&site.site_id)
            .ok_or_else(|| Error::MissingGram(site.site_id.clone()))?;
        let k = rank_for_ratio(site.output_dim(), site.input_dim(), target_ratio)?.resolved_rank;
        scores.insert(site.site_id.clone(), gram_min_loss(&site.weight, gram, k)?);
    }
    Ok(scores)
}

/// Splits each group's budget `|g| · R` in proportion to `1 / ln(score)`,
/// then clamps to `[ratio_floor, ratio_ceiling]` and redistributes the
/// clipped surplus over the remaining members until nothing moves.
pub fn allocate(
    sites: &[WeightSite],
    scores: &BTreeMap<String, f64>,
    target_ratio: f64,
    params: &AllocationParams,
) -> Result<CompressionPlan> {
    check_target(target_ratio)?;
    if !(params.score_floor > 1.0)
        || !(0.0 <= params.ratio_floor
            && params.ratio_floor <= params.ratio_ceiling
            && params.ratio_ceiling < 1.0)
    {
        return Err(Error::InvalidParameter(
            "allocation needs score_floor > 1 and 0 <= floor <= ceiling < 1",
        ));
    }
    let mut groups: BTreeMap<MatrixType, Vec<&WeightSite>> = BTreeMap::new();
    for site in sites {
        groups.entry(site.matrix_type).or_default().push(site);
    }

    let mut entries = Vec::with_capacity(sites.len());
    for (ty, members) in groups {
        let mut raw = Vec::with_capacity(members.len());
        let mut weights = Vec::with_capacity(members.len());
        for site in &members {
            let score = *scores
                .get(&site.site_id)
                .ok_or_else(|| Error::MissingGram(site.site_id.clone()))?;
            if !score.is_finite() {
                return Err(Error::InvalidParameter("non-finite allocation score"));
            }
            raw.push(score);
            weights.push(1.0 / libm::log(score.max(params.score_floor)));
        }
        let ratios = split_budget(&weights, target_ratio, params).ok_or_else(|| {
            Error::InfeasibleBudget {
                group: ty.to_string(),
                target: target_ratio,
            }
        })?;
        for ((site, ratio), score) in members.iter().zip(ratios).zip(raw) {
            entries.push(plan_entry(site, ratio, Some(score))?);
        }
    }
    entries.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    Ok(CompressionPlan {
        target_ratio,
        entries,
    })
}

/// Every site at `target_ratio`.
pub fn homogeneous_plan(sites: &[WeightSite], target_ratio: f64) -> Result<CompressionPlan> {
    check_target(target_ratio)?;
    let mut entries = sites
        .iter()
        .map(|s| plan_entry(s, target_ratio, None))
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    Ok(CompressionPlan {
        target_ratio,
        entries,
    })
}

fn check_target(r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::RatioOutOfRange(r))
    }
}

fn plan_entry(site: &WeightSite, ratio: f64, score: Option<f64>) -> Result<PlanEntry> {
    let (rows, cols) = site.weight.shape();
    Ok(PlanEntry {
        site_id: site.site_id.clone(),
        matrix_type: site.matrix_type,
        rows,
        cols,
        allocated_ratio: ratio,
        resolved_rank: rank_for_ratio(rows, cols, ratio)?.resolved_rank,
        l_min_score: score,
    })
}

/// `r_i = |g| · R · ℓ_i / Σ ℓ_j` with clamp-and-redistribute. Returns `None`
/// when the clamps cannot hold the group sum.
fn split_budget(weights: &[f64], target: f64, params: &AllocationParams) -> Option<Vec<f64>> {
    let n = weights.len();
    let budget = n as f64 * target;
    if budget > n as f64 * params.ratio_ceiling + 1e-12
        || budget < n as f64 * params.ratio_floor - 1e-12
    {
        return None;
    }
    // Equal weights split evenly; the general formula would round.
    if weights.iter().all(|&w| w == weights[0]) {
        return Some(alloc::vec![target; n]);
    }
    let mut ratios = alloc::vec![0.0; n];
    let mut pinned = alloc::vec![false; n];
    for _ in 0..=n {
        let pinned_sum: f64 = ratios
            .iter()
            .zip(&pinned)
            .filter(|(_, &p)| p)
            .map(|(r, _)| r)
            .sum();
        let free_weight: f64 = weights
            .iter()
            .zip(&pinned)
            .filter(|(_, &p)| !p)
            .map(|(w, _)| w)
            .sum();
        let remaining = budget - pinned_sum;
        for i in 0..n {
            if !pinned[i] {
                ratios[i] = remaining * (weights[i] / free_weight);
            }
        }
        // Pin only the side that overshoots more; pinning both at once can
        // strand the budget.
        let excess: f64 = (0..n)
            .filter(|&i| !pinned[i])
            .map(|i| (ratios[i] - params.ratio_ceiling).max(0.0))
            .sum();
        let deficit: f64 = (0..n)
            .filter(|&i| !pinned[i])
            .map(|i| (params.ratio_floor - ratios[i]).max(0.0))
            .sum();
        let mut changed = false;
        for i in 0..n {
            if pinned[i] {
                continue;
            }
            if excess >= deficit && ratios[i] > params.ratio_ceiling {
                ratios[i] = params.ratio_ceiling;
                pinned[i] = true;
                changed = true;
            } else if deficit > excess && ratios[i] < params.ratio_floor {
                ratios[i] = params.ratio_floor;
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            return Some(ratios);
        }
        if pinned.iter().all(|&p| p) {
            let total: f64 = ratios.iter().sum();
            return ((total - budget).abs() <= 1e-12 * n as f64).then_some(ratios);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn sites(n: usize, ty: MatrixType) -> Vec<WeightSite> {
        (0..n)
            .map(|i| WeightSite {
                site_id: format!("L{i:02}.{ty}"),
                layer_index: i,
                matrix_type: ty,
                weight: DenseMatrix::identity(8),
            })
            .collect()
    }

    fn scores_of(sites: &[WeightSite], values: &[f64]) -> BTreeMap<String, f64> {
        sites
            .iter()
            .zip(values)
            .map(|(s, &v)| (s.site_id.clone(), v))
            .collect()
    }

    #[test]
    fn single_site_gets_target() {
        let s = sites(1, MatrixType::Q);
        let plan = allocate(
            &s,
            &scores_of(&s, &[42.0]),
            0.37,
            &AllocationParams::default(),
        )
        .unwrap();
        assert_eq!(plan.entries[0].allocated_ratio, 0.37);
    }

    #[test]
    fn exponential_scores_split_four_to_two() {
        let s = sites(2, MatrixType::K);
        let e = core::f64::consts::E;
        let r = 0.3;
        let plan = allocate(
            &s,
            &scores_of(&s, &[e, e * e]),
            r,
            &AllocationParams::default(),
        )
        .unwrap();
        assert!((plan.entries[0].allocated_ratio - 4.0 * r / 3.0).abs() < 1e-15);
        assert!((plan.entries[1].allocated_ratio - 2.0 * r / 3.0).abs() < 1e-15);
    }

    #[test]
    fn clamping_preserves_group_sum() {
        let s = sites(4, MatrixType::Up);
        let params = AllocationParams::default();
        // One huge score pushes the others above the ceiling before clamping.
        let plan = allocate(&s, &scores_of(&s, &[1.2, 1.2, 1.2, 1e300]), 0.8, &params).unwrap();
        let ratios: Vec<f64> = plan.entries.iter().map(|e| e.allocated_ratio).collect();
        assert!(ratios
            .iter()
            .all(|&r| (params.ratio_floor..=params.ratio_ceiling).contains(&r)));
        let mean = ratios.iter().sum::<f64>() / 4.0;
        assert!((mean - 0.8).abs() < 1e-12, "{ratios:?}");
    }

    #[test]
    fn infeasible_target() {
        let s = sites(2, MatrixType::V);
        let params = AllocationParams {
            ratio_floor: 0.02,
            ratio_ceiling: 0.5,
            ..Default::default()
        };
        let err = allocate(&s, &scores_of(&s, &[3.0, 4.0]), 0.6, &params).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBudget { .. }));
        let err = allocate(
            &s,
            &scores_of(&s, &[3.0, 4.0]),
            0.01,
            &AllocationParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InfeasibleBudget { .. }));
    }

    #[test]
    fn missing_score_or_gram() {
        let s = sites(2, MatrixType::O);
        let partial = scores_of(&s[..1], &[3.0]);
        assert!(matches!(
            allocate(&s, &partial, 0.2, &AllocationParams::default()),
            Err(Error::MissingGram(_))
        ));
        assert!(matches!(
            score_sites(&s, &BTreeMap::new(), 0.2),
            Err(Error::MissingGram(_))
        ));
    }

    #[test]
    fn identity_scores() {
        let s = sites(1, MatrixType::Q);
        let grams: BTreeMap<_, _> = [(s[0].site_id.clone(), DenseMatrix::identity(8))].into();
        let sc = score_sites(&s, &grams, 0.5).unwrap();
        // k = floor(0.5·64/16) = 2, so six unit singular values are dropped.
        assert!((sc[&s[0].site_id] - libm::sqrt(6.0)).abs() < 1e-12);
    }

    #[test]
    fn homogeneous_assigns_target() {
        let s = sites(3, MatrixType::Gate);
        let plan = homogeneous_plan(&s, 0.5).unwrap();
        assert!(plan
            .entries
            .iter()
            .all(|e| e.allocated_ratio == 0.5 && e.resolved_rank == 2));
        assert!(plan.entries.iter().all(|e| e.l_min_score.is_none()));
        assert_eq!(plan.group_means()[&MatrixType::Gate], 0.5);
    }

    #[test]
    fn mixed_groups_are_independent() {
        let mut s = sites(2, MatrixType::Q);
        s.extend(sites(2, MatrixType::K));
        let sc = scores_of(&s, &[10.0, 10.0, 5.0, 500.0]);
        let plan = allocate(&s, &sc, 0.4, &AllocationParams::default()).unwrap();
        let means = plan.group_means();
        assert!((means[&MatrixType::Q] - 0.4).abs() < 1e-12);
        assert!((means[&MatrixType::K] - 0.4).abs() < 1e-12);
        let q = plan
            .entries
            .iter()
            .filter(|e| e.matrix_type == MatrixType::Q)
            .all(|e| (e.allocated_ratio - 0.4).abs() < 1e-15);
        assert!(q);
        assert_eq!(
            vec!["L00.K", "L00.Q", "L01.K", "L01.Q"],
            plan.entries
                .iter()
                .map(|e| e.site_id.as_str())
                .collect::<Vec<_>>()
        );
    }
}
