//! Box geometry (normalized `cx, cy, w, h`), matching costs and the
//! rectangular Hungarian assignment.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Var;

/// `[x1, y1, x2, y2]` corners of a centre-size box.
pub fn cxcywh_to_xyxy<T: Scalar>(b: [T; 4]) -> [T; 4] {
    let h = T::c(0.5);
    [b[0] - h * b[2], b[1] - h * b[3], b[0] + h * b[2], b[1] + h * b[3]]
}

pub fn xyxy_to_cxcywh<T: Scalar>(b: [T; 4]) -> [T; 4] {
    let h = T::c(0.5);
    [h * (b[0] + b[2]), h * (b[1] + b[3]), b[2] - b[0], b[3] - b[1]]
}

fn areas<T: Scalar>(a: [T; 4], b: [T; 4]) -> (T, T, T) {
    let (a, b) = (cxcywh_to_xyxy(a), cxcywh_to_xyxy(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(T::zero());
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(T::zero());
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    (inter, union, hull)
}

pub fn iou<T: Scalar>(a: [T; 4], b: [T; 4]) -> T {
    let (inter, union, _) = areas(a, b);
    if union > T::zero() {
        inter / union
    } else {
        T::zero()
    }
}

/// Generalized IoU in (−1, 1].
pub fn giou<T: Scalar>(a: [T; 4], b: [T; 4]) -> T {
    let (inter, union, hull) = areas(a, b);
    if hull <= T::zero() {
        return T::zero();
    }
    inter / union - (hull - union) / hull
}

/// Weights of the L1 and GIoU terms shared by matching cost and box loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCostWeights {
    pub l1: f64,
    pub giou: f64,
}

impl Default for BoxCostWeights {
    fn default() -> Self {
        BoxCostWeights { l1: 5.0, giou: 2.0 }
    }
}

/// `cost[i][j] = λ_L1·‖pᵢ − gⱼ‖₁ + λ_giou·(1 − GIoU(pᵢ, gⱼ))`, slots × objects.
pub fn box_cost<T: Scalar>(pred: &[[T; 4]], gt: &[[T; 4]], w: BoxCostWeights) -> Result<Vec<Vec<T>>> {
    if let Some(g) = gt.iter().find(|g| !(g[2] > T::zero() && g[3] > T::zero())) {
        return Err(Error::invalid(format!("degenerate ground-truth box {g:?}")));
    }
    Ok(pred
        .iter()
        .map(|p| {
            gt.iter()
                .map(|g| {
                    let l1 = (0..4).map(|k| (p[k] - g[k]).abs()).sum::<T>();
                    T::c(w.l1) * l1 + T::c(w.giou) * (T::one() - giou(*p, *g))
                })
                .collect()
        })
        .collect())
}

/// Slot ↔ object pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment<T> {
    /// `(slot, object)` pairs sorted by slot index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub total_cost: T,
}

impl<T: Scalar> MatchAssignment<T> {
    /// Object matched to each slot, if any.
    pub fn slot_to_object(&self, num_slots: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_slots];
        for &(s, g) in &self.pairs {
            out[s] = Some(g);
        }
        out
    }
}

/// Minimal-cost assignment of each object (column) to a row: returns the
/// row chosen per column. `cost[r][c]`, `cols <= rows`.
fn solve<T: Scalar>(cost: &[Vec<T>], rows: &[usize], cols: &[usize]) -> (T, Vec<usize>) {
    // Potentials formulation with objects as the "left" side (n ≤ m).
    let (n, m) = (cols.len(), rows.len());
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[rows[j - 1]][cols[i0 - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = rows[j - 1];
        }
    }
    let total = assign
        .iter()
        .zip(cols)
        .map(|(&r, &c)| cost[r][c])
        .fold(T::zero(), |a, b| a + b);
    (total, assign)
}

/// Minimum-cost injection of objects into slots. Among optimal assignments
/// the one whose slot sequence (in object order) is lexicographically
/// smallest is returned.
pub fn hungarian_match<T: Scalar>(cost: &[Vec<T>]) -> Result<MatchAssignment<T>> {
    let ns = cost.len();
    let ng = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != ng) {
        return Err(Error::invalid("cost matrix rows have unequal length"));
    }
    if ng > ns {
        return Err(Error::invalid(format!(
            "{ng} objects cannot be matched into {ns} slots"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { op: "hungarian_match" });
    }
    if ng == 0 {
        return Ok(MatchAssignment {
            pairs: Vec::new(),
            unmatched: (0..ns).collect(),
            total_cost: T::zero(),
        });
    }
    let all_rows: Vec<usize> = (0..ns).collect();
    let all_cols: Vec<usize> = (0..ng).collect();
    let (best, _) = solve(cost, &all_rows, &all_cols);
    let scale = cost.iter().flatten().fold(T::one(), |a, &c| a.max(c.abs()));
    let tol = T::c(1e-10) * scale * T::c(ng as f64);

    // Fix objects one at a time to the lowest slot that keeps the optimum.
    let mut chosen: Vec<usize> = Vec::with_capacity(ng);
    let mut fixed_cost = T::zero();
    for g in 0..ng {
        let rest_cols: Vec<usize> = (g + 1..ng).collect();
        let mut picked = None;
        for s in 0..ns {
            if chosen.contains(&s) {
                continue;
            }
            let rest_rows: Vec<usize> = (0..ns).filter(|r| *r != s && !chosen.contains(r)).collect();
            let rest = if rest_cols.is_empty() {
                T::zero()
            } else {
                solve(cost, &rest_rows, &rest_cols).0
            };
            if fixed_cost + cost[s][g] + rest <= best + tol {
                picked = Some(s);
                break;
            }
        }
        let s = picked.expect("an optimal completion always exists");
        fixed_cost = fixed_cost + cost[s][g];
        chosen.push(s);
    }
    let mut pairs: Vec<(usize, usize)> = chosen.iter().enumerate().map(|(g, &s)| (s, g)).collect();
    pairs.sort_unstable();
    let unmatched = (0..ns).filter(|s| !chosen.contains(s)).collect();
    Ok(MatchAssignment {
        pairs,
        unmatched,
        total_cost: fixed_cost,
    })
}

/// `1 − GIoU` and L1 distance for matched box pairs on the tape.
/// `pred` and `gt` are both `m × 4` in cxcywh; returns `(l1, 1 − giou)`
/// as `m × 1` columns.
pub fn box_terms<'t, T: Scalar>(pred: Var<'t, T>, gt: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if pred.shape() != gt.shape() || pred.cols() != 4 {
        return Err(Error::shape("box_terms", &pred.shape(), &gt.shape()));
    }
    let l1 = pred.sub(gt)?.abs()?.sum_axis(1)?;
    let corners = |b: Var<'t, T>| -> Result<[Var<'t, T>; 4]> {
        let (cx, cy) = (b.slice_cols(0, 1)?, b.slice_cols(1, 1)?);
        let (hw, hh) = (b.slice_cols(2, 1)?.scale(T::c(0.5))?, b.slice_cols(3, 1)?.scale(T::c(0.5))?);
        Ok([cx.sub(hw)?, cy.sub(hh)?, cx.add(hw)?, cy.add(hh)?])
    };
    let p = corners(pred)?;
    let g = corners(gt)?;
    let iw = p[2].minimum(g[2])?.sub(p[0].maximum(g[0])?)?.relu()?;
    let ih = p[3].minimum(g[3])?.sub(p[1].maximum(g[1])?)?.relu()?;
    let inter = iw.mul(ih)?;
    let area = |c: &[Var<'t, T>; 4]| c[2].sub(c[0])?.mul(c[3].sub(c[1])?);
    let union = area(&p)?.add(area(&g)?)?.sub(inter)?;
    let hull = p[2]
        .maximum(g[2])?
        .sub(p[0].minimum(g[0])?)?
        .mul(p[3].maximum(g[3])?.sub(p[1].minimum(g[1])?)?)?;
    let giou = inter.div(union)?.sub(hull.sub(union)?.div(hull)?)?;
    Ok((l1, giou.neg()?.add_scalar(T::one())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_match() {
        let m = hungarian_match(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost, 2.0);
    }

    #[test]
    fn too_many_objects() {
        assert!(hungarian_match(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn ties_prefer_low_slots() {
        let m = hungarian_match(&[vec![0.0], vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(m.unmatched, vec![1, 2]);
    }

    #[test]
    fn identical_boxes_cost_zero() {
        let b = [0.5f64, 0.5, 0.2, 0.3];
        let c = box_cost(&[b], &[b], BoxCostWeights::default()).unwrap();
        assert!(c[0][0].abs() < 1e-15);
        assert!((giou(b, b) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_boxes_have_negative_giou() {
        assert!(giou([0.2, 0.5, 0.1, 0.1], [0.8, 0.5, 0.1, 0.1]) < 0.0);
    }

    #[test]
    fn degenerate_gt_rejected() {
        assert!(box_cost(&[[0.5, 0.5, 0.1, 0.1]], &[[0.5, 0.5, 0.0, 0.1]], BoxCostWeights::default()).is_err());
    }
}
