//! Diagnostics over trained models and run logs: expert-weight PCA,
//! class-by-expert routing weights, per-expert routing maps and balance-loss
//! curves. Every exporter returns text (CSV, PGM, JSON) instead of touching
//! the filesystem.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::moe::balance_loss_value;
use crate::pipeline::runlog::RunLog;
use crate::vit::{self, Batch, Ffn, HeadRole, Model};
use crate::{Error, Result};

/// Flattened expert weights of one MoE layer at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    pub epoch: usize,
    pub experts: Vec<Vec<f32>>,
}

/// Expert `w1, b1, w2, b2` of `layer`, concatenated per expert.
pub fn snapshot(model: &Model, layer: usize, epoch: usize) -> Result<WeightSnapshot> {
    let n = match model.ffn.get(layer) {
        Some(Ffn::Moe { n, .. }) => *n,
        _ => return Err(Error::Config(format!("block {layer} is not an MoE layer"))),
    };
    let mut experts = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = Vec::new();
        for name in vit::expert_names(layer, i) {
            v.extend_from_slice(model.tensor(&name)?.data());
        }
        experts.push(v);
    }
    Ok(WeightSnapshot { epoch, experts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaPoint {
    pub expert: usize,
    pub epoch: usize,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaResult {
    pub points: Vec<PcaPoint>,
    /// Unit principal directions; each has its largest-magnitude loading
    /// positive.
    pub components: [Vec<f64>; 2],
    /// Variance of the projections along each component.
    pub variances: [f64; 2],
    /// Mean within-epoch expert variance over the variance of the epoch
    /// centroids; `None` when the centroids do not move.
    pub spread_ratio: Option<f64>,
}

const PCA_TOL: f64 = 1e-8;
const PCA_MAX_ITERS: usize = 20_000;

/// The pooled cloud (every expert at every epoch), centred, with the
/// `(expert, epoch)` label of each row.
pub fn centered_cloud(snaps: &[WeightSnapshot]) -> Result<(Vec<Vec<f64>>, Vec<(usize, usize)>)> {
    let first = snaps
        .first()
        .ok_or_else(|| Error::Input("PCA needs at least one snapshot".into()))?;
    let dim = first
        .experts
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Input("snapshot has no experts".into()))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, s) in snaps.iter().enumerate() {
        if i > 0 && s.epoch <= snaps[i - 1].epoch {
            return Err(Error::Input("snapshot epochs must be strictly increasing".into()));
        }
        for (e, w) in s.experts.iter().enumerate() {
            if w.len() != dim {
                return Err(Error::Input(format!(
                    "expert {e} at epoch {} has {} weights, expected {dim}",
                    s.epoch,
                    w.len()
                )));
            }
            rows.push(w.iter().map(|&v| v as f64).collect::<Vec<f64>>());
            labels.push((e, s.epoch));
        }
    }
    let n = rows.len() as f64;
    let mut mean = vec![0f64; dim];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for r in &mut rows {
        for (v, m) in r.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok((rows, labels))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `C v` for `C = XᵀX / N` without forming `C`.
fn cov_apply(x: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0f64; v.len()];
    for r in x {
        let p = dot(r, v);
        for (o, a) in out.iter_mut().zip(r) {
            *o += p * a;
        }
    }
    let n = x.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let p = dot(v, u);
        for (a, b) in v.iter_mut().zip(u) {
            *a -= p * b;
        }
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 0..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|a| *a = -*a);
    }
}

/// Leading eigenvector of the covariance restricted to the complement of
/// `found`. Starts from the first coordinate axis with a non-zero image,
/// moving to the next axis otherwise. Returns `None` when the restricted
/// covariance vanishes.
fn power_direction(x: &[Vec<f64>], found: &[Vec<f64>], scale: f64) -> Option<Vec<f64>> {
    let dim = x[0].len();
    let floor = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let mut start = None;
    for axis in 0..dim {
        let mut v = vec![0f64; dim];
        v[axis] = 1.0;
        project_out(&mut v, found);
        if norm(&v) < 1e-6 {
            continue;
        }
        let mut w = cov_apply(x, &v);
        project_out(&mut w, found);
        if norm(&w) > floor {
            let nw = norm(&w);
            w.iter_mut().for_each(|a| *a /= nw);
            start = Some(w);
            break;
        }
    }
    let mut v = start?;
    for _ in 0..PCA_MAX_ITERS {
        let mut w = cov_apply(x, &v);
        project_out(&mut w, found);
        let nw = norm(&w);
        if nw <= floor {
            return None;
        }
        w.iter_mut().for_each(|a| *a /= nw);
        let diff: f64 = v.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let flip: f64 = v.iter().zip(&w).map(|(a, b)| (a + b) * (a + b)).sum::<f64>().sqrt();
        v = w;
        if diff.min(flip) < PCA_TOL {
            break;
        }
    }
    Some(v)
}

/// A unit vector orthogonal to `found`, used when the cloud has no second
/// direction.
fn any_orthogonal(dim: usize, found: &[Vec<f64>]) -> Vec<f64> {
    for axis in 0..dim {
        let mut v = vec![0f64; dim];
        v[axis] = 1.0;
        project_out(&mut v, found);
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            return v;
        }
    }
    vec![0f64; dim]
}

/// Top-two principal components of the pooled expert-weight cloud, by power
/// iteration with deflation.
pub fn pca_trajectory(snaps: &[WeightSnapshot]) -> Result<PcaResult> {
    let (x, labels) = centered_cloud(snaps)?;
    let dim = x[0].len();
    let total_var: f64 = x.iter().map(|r| dot(r, r)).sum::<f64>() / x.len() as f64;
    if total_var == 0.0 {
        return Err(Error::Degenerate("all expert weight vectors are identical".into()));
    }
    let mut found: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v = power_direction(&x, &found, total_var).unwrap_or_else(|| any_orthogonal(dim, &found));
        fix_sign(&mut v);
        found.push(v);
    }
    let mut points = Vec::with_capacity(x.len());
    let mut var = [0f64; 2];
    for (r, &(expert, epoch)) in x.iter().zip(&labels) {
        let p1 = dot(r, &found[0]);
        let p2 = dot(r, &found[1]);
        var[0] += p1 * p1;
        var[1] += p2 * p2;
        points.push(PcaPoint { expert, epoch, pc1: p1, pc2: p2 });
    }
    var.iter_mut().for_each(|v| *v /= x.len() as f64);
    Ok(PcaResult {
        points,
        components: [found[0].clone(), found[1].clone()],
        variances: var,
        spread_ratio: spread_ratio(snaps),
    })
}

fn spread_ratio(snaps: &[WeightSnapshot]) -> Option<f64> {
    let dim = snaps[0].experts[0].len();
    let mut centroids = Vec::new();
    let mut within = 0f64;
    for s in snaps {
        let n = s.experts.len() as f64;
        let mut c = vec![0f64; dim];
        for w in &s.experts {
            for (a, &b) in c.iter_mut().zip(w) {
                *a += b as f64 / n;
            }
        }
        within += s
            .experts
            .iter()
            .map(|w| w.iter().zip(&c).map(|(&a, b)| (a as f64 - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        centroids.push(c);
    }
    within /= snaps.len() as f64;
    let m = centroids.len() as f64;
    let mut grand = vec![0f64; dim];
    for c in &centroids {
        for (g, v) in grand.iter_mut().zip(c) {
            *g += v / m;
        }
    }
    let between = centroids
        .iter()
        .map(|c| c.iter().zip(&grand).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / m;
    (between > 0.0).then(|| within / between)
}

impl PcaResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("expert,epoch,pc1,pc2\n");
        for p in &self.points {
            writeln!(s, "{},{},{:e},{:e}", p.expert, p.epoch, p.pc1, p.pc2).unwrap();
        }
        s
    }

    pub fn sidecar_json(&self) -> String {
        #[derive(Serialize)]
        struct Side {
            variances: [f64; 2],
            spread_ratio: Option<f64>,
        }
        let mut s = serde_json::to_string_pretty(&Side {
            variances: self.variances,
            spread_ratio: self.spread_ratio,
        })
        .unwrap();
        s.push('\n');
        s
    }
}

/// Routing of every token through one MoE layer for a batch.
struct LayerRouting {
    n: usize,
    k: usize,
    /// `[rows, n]` post-TopK gate values.
    gates: Vec<f32>,
    /// `rows × k` selected experts, highest gate first.
    selected: Vec<usize>,
    rows: usize,
}

fn route(model: &Model, patches: &crate::tensor::Tensor, layer: usize) -> Result<LayerRouting> {
    let Some(Ffn::Moe { n, k, .. }) = model.ffn.get(layer).copied() else {
        return Err(Error::Config(format!("block {layer} is not an MoE layer")));
    };
    let head = if model.has_head(HeadRole::Upstream) {
        HeadRole::Upstream
    } else {
        HeadRole::Downstream
    };
    let mut tape = model.tape();
    let out = model.forward(&mut tape, patches, head)?;
    let aux = out
        .aux
        .iter()
        .find(|a| a.layer_id == layer)
        .expect("every MoE block reports aux");
    let gates = tape.value(aux.gate.gates).to_vec();
    Ok(LayerRouting {
        n,
        k,
        rows: gates.len() / n,
        gates,
        selected: aux.gate.selected.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecializationMatrix {
    /// Class of each row, ascending.
    pub classes: Vec<usize>,
    /// `cells[row][expert]`.
    pub cells: Vec<Vec<f64>>,
    /// Display order: `row_order[i]` is the row shown in position `i`, sorted
    /// by each row's strongest expert.
    pub row_order: Vec<usize>,
}

/// Mean over each class's tokens of the token's largest gate value, credited
/// to the expert holding it. A batch labels either whole images (one label
/// per image) or tokens (one per token).
pub fn specialization_matrix(model: &Model, data: &[Batch], layer: usize) -> Result<SpecializationMatrix> {
    let t = model.spec.tokens();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    let mut n_experts = None;
    for b in data {
        let r = route(model, &b.patches, layer)?;
        n_experts = Some(r.n);
        let images = r.rows / t;
        let per_token = if b.labels.len() == r.rows {
            true
        } else if b.labels.len() == images {
            false
        } else {
            return Err(Error::Input(format!(
                "batch has {} labels for {images} images of {t} tokens",
                b.labels.len()
            )));
        };
        for row in 0..r.rows {
            let class = if per_token { b.labels[row] } else { b.labels[row / t] };
            let e = r.selected[row * r.k];
            let g = r.gates[row * r.n + e] as f64;
            let entry = sums.entry(class).or_insert_with(|| (vec![0.0; r.n], 0));
            entry.0[e] += g;
            entry.1 += 1;
        }
    }
    let Some(n) = n_experts else {
        // Still reject dense layers on empty input.
        route_check(model, layer)?;
        return Err(Error::Input("specialization needs at least one batch".into()));
    };
    let classes: Vec<usize> = sums.keys().copied().collect();
    let cells: Vec<Vec<f64>> = sums
        .values()
        .map(|(s, c)| s.iter().map(|v| v / *c as f64).collect())
        .collect();
    let strongest = |row: &Vec<f64>| {
        let mut best = 0;
        for e in 1..n {
            if row[e] > row[best] {
                best = e;
            }
        }
        best
    };
    let mut row_order: Vec<usize> = (0..cells.len()).collect();
    row_order.sort_by_key(|&r| (strongest(&cells[r]), r));
    Ok(SpecializationMatrix {
        classes,
        cells,
        row_order,
    })
}

fn route_check(model: &Model, layer: usize) -> Result<()> {
    match model.ffn.get(layer) {
        Some(Ffn::Moe { .. }) => Ok(()),
        _ => Err(Error::Config(format!("block {layer} is not an MoE layer"))),
    }
}

impl SpecializationMatrix {
    pub fn n_experts(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    /// Rows in display order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class");
        for e in 0..self.n_experts() {
            write!(s, ",expert_{e}").unwrap();
        }
        s.push('\n');
        for &r in &self.row_order {
            write!(s, "{}", self.classes[r]).unwrap();
            for v in &self.cells[r] {
                write!(s, ",{v:.9}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn sidecar_json(&self) -> String {
        #[derive(Serialize)]
        struct Side<'a> {
            classes: &'a [usize],
            row_order: &'a [usize],
            displayed_classes: Vec<usize>,
        }
        let mut s = serde_json::to_string_pretty(&Side {
            classes: &self.classes,
            row_order: &self.row_order,
            displayed_classes: self.row_order.iter().map(|&r| self.classes[r]).collect(),
        })
        .unwrap();
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingMaps {
    pub rows: usize,
    pub cols: usize,
    /// The exported experts, most routed patches first.
    pub experts: Vec<usize>,
    /// Routed-patch count over the batch for every expert.
    pub counts: Vec<usize>,
    /// `grids[image][j]` belongs to `experts[j]`; row-major, 1 when routed.
    pub grids: Vec<Vec<Vec<u8>>>,
}

/// Binary patch grids for the `top_m` experts with the most routed patches
/// (ties go to the lower index). `grid` overrides the `rows × cols` reshape;
/// by default the token count must be a perfect square.
pub fn routing_map_export(
    model: &Model,
    patches: &crate::tensor::Tensor,
    layer: usize,
    top_m: usize,
    grid: Option<(usize, usize)>,
) -> Result<RoutingMaps> {
    route_check(model, layer)?;
    let t = model.spec.tokens();
    let (rows, cols) = match grid {
        Some((r, c)) if r * c == t => (r, c),
        Some((r, c)) => return Err(Error::Input(format!("grid {r}x{c} does not hold {t} tokens"))),
        None => {
            let s = (t as f64).sqrt().round() as usize;
            if s * s != t {
                return Err(Error::Input(format!("{t} tokens do not form a square grid")));
            }
            (s, s)
        }
    };
    let r = route(model, patches, layer)?;
    let images = r.rows / t;
    let mut counts = vec![0usize; r.n];
    for &e in &r.selected {
        counts[e] += 1;
    }
    let mut order: Vec<usize> = (0..r.n).collect();
    order.sort_by_key(|&e| (std::cmp::Reverse(counts[e]), e));
    order.truncate(top_m.min(r.n));
    let mut grids = Vec::with_capacity(images);
    for img in 0..images {
        let per: Vec<Vec<u8>> = order
            .iter()
            .map(|&e| {
                (0..t)
                    .map(|p| {
                        let row = img * t + p;
                        r.selected[row * r.k..(row + 1) * r.k].contains(&e) as u8
                    })
                    .collect()
            })
            .collect();
        grids.push(per);
    }
    Ok(RoutingMaps {
        rows,
        cols,
        experts: order,
        counts,
        grids,
    })
}

impl RoutingMaps {
    /// Plain-text graymap (P2, maxval 1) for one image and exported expert.
    pub fn to_pgm(&self, image: usize, slot: usize) -> String {
        let g = &self.grids[image][slot];
        let mut s = format!("P2\n{} {}\n1\n", self.cols, self.rows);
        for r in 0..self.rows {
            let line: Vec<String> = g[r * self.cols..(r + 1) * self.cols].iter().map(u8::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// `(file name, contents)` for every grid.
    pub fn files(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for img in 0..self.grids.len() {
            for (slot, e) in self.experts.iter().enumerate() {
                out.push((format!("routing_image{img}_expert{e}.pgm"), self.to_pgm(img, slot)));
            }
        }
        out
    }

    pub fn sidecar_json(&self) -> String {
        #[derive(Serialize)]
        struct Side<'a> {
            rows: usize,
            cols: usize,
            experts: &'a [usize],
            counts: &'a [usize],
        }
        let mut s = serde_json::to_string_pretty(&Side {
            rows: self.rows,
            cols: self.cols,
            experts: &self.experts,
            counts: &self.counts,
        })
        .unwrap();
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalancePoint {
    pub step: usize,
    pub run_label: String,
    /// Recomputed from the logged importance vector.
    pub balance_loss: f64,
    /// The value the training loop logged.
    pub logged: f64,
}

/// Balance loss of `layer` per logged step of each run, optionally limited
/// to one stage. Steps are numbered in log order.
pub fn balance_curve(runs: &[(String, RunLog)], layer: usize, stage: Option<&str>) -> Result<Vec<BalancePoint>> {
    if runs.is_empty() {
        return Err(Error::Input("balance curve needs at least one run log".into()));
    }
    let mut out = Vec::new();
    for (label, log) in runs {
        let mut step = 0;
        for e in log.steps() {
            if stage.is_some_and(|s| s != e.stage) {
                continue;
            }
            let Some(slot) = e.layer_ids.iter().position(|&l| l == layer) else {
                continue;
            };
            let imp = e
                .imp
                .get(slot)
                .ok_or_else(|| Error::Data(format!("run {label} step {} lacks importance for layer {layer}", e.step)))?;
            out.push(BalancePoint {
                step,
                run_label: label.clone(),
                balance_loss: balance_loss_value(imp)?,
                logged: e.balance.get(slot).copied().unwrap_or(f64::NAN),
            });
            step += 1;
        }
        if step == 0 {
            return Err(Error::Data(format!("run {label} has no importance records for layer {layer}")));
        }
    }
    Ok(out)
}

pub fn balance_csv(points: &[BalancePoint]) -> String {
    let mut s = String::from("step,run_label,balance_loss\n");
    for p in points {
        writeln!(s, "{},{},{:e}", p.step, p.run_label, p.balance_loss).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::runlog::{LogEntry, StepEntry};

    fn snap(epoch: usize, experts: Vec<Vec<f32>>) -> WeightSnapshot {
        WeightSnapshot { epoch, experts }
    }

    #[test]
    fn identical_snapshots_center_to_origin_and_are_degenerate() {
        let s = vec![snap(0, vec![vec![1.0, 2.0, 3.0]; 3]), snap(1, vec![vec![1.0, 2.0, 3.0]; 3])];
        let (x, _) = centered_cloud(&s).unwrap();
        assert!(x.iter().flatten().all(|&v| v == 0.0));
        assert!(matches!(pca_trajectory(&s), Err(Error::Degenerate(_))));
    }

    #[test]
    fn collinear_cloud_has_no_second_component() {
        let dir = [0.3f32, -0.5, 0.8, 0.1, 0.0, 0.2];
        let base = [1.0f32, 0.5, -0.25, 2.0, 0.0, 1.5];
        let line = |t: f32| base.iter().zip(&dir).map(|(b, d)| b + t * d).collect::<Vec<f32>>();
        let s = vec![
            snap(0, vec![line(-1.0), line(0.5)]),
            snap(1, vec![line(2.0), line(0.25)]),
            snap(3, vec![line(-0.75), line(1.0)]),
        ];
        let p = pca_trajectory(&s).unwrap();
        assert!(p.variances[1] < 1e-10, "{:?}", p.variances);
        assert!(p.variances[0] >= p.variances[1]);
        // PC1 is the line direction, sign fixed by the largest loading
        let dn = dir.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        for (c, &d) in p.components[0].iter().zip(&dir) {
            assert!((c - d as f64 / dn).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_snapshot_series_are_rejected() {
        assert!(pca_trajectory(&[]).is_err());
        let s = vec![snap(1, vec![vec![0.0, 1.0]]), snap(1, vec![vec![1.0, 0.0]])];
        assert!(pca_trajectory(&s).is_err());
        let s = vec![snap(0, vec![vec![0.0, 1.0], vec![1.0]])];
        assert!(pca_trajectory(&s).is_err());
    }

    #[test]
    fn balance_curve_recomputes_from_importance() {
        let mut log = RunLog::default();
        for (i, imp) in [vec![1.0f32, 1.0], vec![1.5, 0.5]].into_iter().enumerate() {
            log.push(LogEntry::Step(StepEntry {
                stage: "downstream".into(),
                step: i,
                lr: 0.0,
                task_loss: 0.0,
                balance: vec![balance_loss_value(&imp).unwrap()],
                layer_ids: vec![2],
                imp: vec![imp],
                flops_cumulative: 0,
            }));
        }
        let pts = balance_curve(&[("w0".into(), log.clone())], 2, Some("downstream")).unwrap();
        assert_eq!(pts[0].balance_loss, 0.0);
        assert_eq!(pts[1].balance_loss, 0.25);
        assert_eq!(balance_csv(&pts), "step,run_label,balance_loss\n0,w0,0e0\n1,w0,2.5e-1\n");
        assert!(matches!(balance_curve(&[("w0".into(), log)], 1, None), Err(Error::Data(_))));
    }
}
