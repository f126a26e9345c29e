//! Overlap and surface-distance metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_same(op: &'static str, a: &[bool], b: &[bool], dims: [usize; 3]) -> Result<()> {
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::shape(
            op,
            format!("masks of {} and {} voxels for grid {dims:?}", a.len(), b.len()),
        ));
    }
    Ok(())
}

/// Dice similarity `2|P & G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "dsc",
            format!("masks of {} and {} voxels", pred.len(), gt.len()),
        ));
    }
    let (mut inter, mut sum) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        sum += usize::from(p) + usize::from(g);
    }
    Ok(if sum == 0 { 1.0 } else { 2.0 * inter as f64 / sum as f64 })
}

/// Foreground voxels with at least one face neighbour outside the mask;
/// the volume border counts as outside.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                out[(z * h + y) * w + x] = edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
            }
        }
    }
    out
}

/// Lower envelope of parabolas: `out[p] = min_q ((p - q) s)^2 + f[q]`.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let s2 = spacing * spacing;
    let key = |q: usize| f[q] + s2 * (q * q) as f64;
    let mut hull: Vec<usize> = Vec::with_capacity(f.len());
    // hull[i] is lowest on (bounds[i], bounds[i + 1]]
    let mut bounds: Vec<f64> = Vec::with_capacity(f.len() + 1);
    for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
        let mut cut = f64::NEG_INFINITY;
        while let Some(&top) = hull.last() {
            cut = (key(q) - key(top)) / (2.0 * s2 * (q - top) as f64);
            if cut <= bounds[hull.len() - 1] {
                hull.pop();
                bounds.pop();
                cut = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        hull.push(q);
        bounds.push(cut);
    }
    if hull.is_empty() {
        out.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < hull.len() && bounds[k + 1] < p as f64 {
            k += 1;
        }
        let dq = (p as f64 - hull[k] as f64) * spacing;
        *o = dq * dq + f[hull[k]];
    }
}

/// Squared Euclidean distance (spacing-scaled) from every voxel to the
/// nearest `true` voxel of `sites`; infinite when there is none.
pub fn squared_distance_transform(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let len = dims[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        let starts: Vec<usize> = (0..d * h * w).filter(|&i| (i / strides[axis]) % len == 0).collect();
        for start in starts {
            for (j, v) in line.iter_mut().enumerate() {
                *v = grid[start + j * strides[axis]];
            }
            edt_1d(&line, spacing[axis], &mut out);
            for (j, v) in out.iter().enumerate() {
                grid[start + j * strides[axis]] = *v;
            }
        }
    }
    grid
}

/// Index (0-based) of the nearest-rank 95th percentile in a sorted list of
/// `n` values: rank `ceil(0.95 n)`.
pub fn percentile95_rank(n: usize) -> usize {
    (95 * n).div_ceil(100).max(1) - 1
}

/// Directed distances from each boundary voxel of `from` to the boundary
/// of `to`.
pub fn directed_distances(from: &[bool], to: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let dt = squared_distance_transform(&boundary(to, dims), dims, spacing);
    boundary(from, dims)
        .iter()
        .zip(&dt)
        .filter(|(b, _)| **b)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

fn percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[percentile95_rank(v.len())]
}

/// Symmetric 95th-percentile Hausdorff distance between mask boundaries, or
/// `None` when either mask is empty.
pub fn hd95(pred: &[bool], gt: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<Option<f64>> {
    check_same("hd95", pred, gt, dims)?;
    if !pred.iter().any(|&v| v) || !gt.iter().any(|&v| v) {
        return Ok(None);
    }
    let a = percentile95(directed_distances(pred, gt, dims, spacing));
    let b = percentile95(directed_distances(gt, pred, dims, spacing));
    Ok(Some(a.max(b)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub dsc_percent: f64,
    pub hd95: Option<f64>,
    pub defined: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub mean_dsc_percent: f64,
    /// Mean over the classes where HD95 is defined.
    pub mean_hd95: Option<f64>,
}

pub fn class_name(k: usize) -> String {
    format!("class{k}")
}

impl MetricsReport {
    /// Per-class metrics for foreground classes `1..classes` of integer
    /// label grids.
    pub fn evaluate(pred: &[u8], gt: &[u8], dims: [usize; 3], spacing: [f64; 3], classes: usize) -> Result<Self> {
        let n: usize = dims.iter().product();
        if pred.len() != n || gt.len() != n {
            return Err(Error::shape(
                "evaluate",
                format!("label grids of {} and {} voxels for {dims:?}", pred.len(), gt.len()),
            ));
        }
        let mut per_class = Vec::new();
        for k in 1..classes {
            let p: Vec<bool> = pred.iter().map(|&v| v as usize == k).collect();
            let g: Vec<bool> = gt.iter().map(|&v| v as usize == k).collect();
            let hd = hd95(&p, &g, dims, spacing)?;
            per_class.push(ClassMetrics {
                name: class_name(k),
                dsc_percent: 100.0 * dsc(&p, &g)?,
                hd95: hd,
                defined: hd.is_some(),
            });
        }
        Ok(Self::from_classes(per_class))
    }

    pub fn from_classes(classes: Vec<ClassMetrics>) -> Self {
        let n = classes.len().max(1) as f64;
        let mean_dsc_percent = classes.iter().map(|c| c.dsc_percent).sum::<f64>() / n;
        let defined: Vec<f64> = classes.iter().filter_map(|c| c.hd95).collect();
        let mean_hd95 = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Self {
            classes,
            mean_dsc_percent,
            mean_hd95,
        }
    }

    /// Averages matching classes over several reports.
    pub fn average(reports: &[MetricsReport]) -> Self {
        let Some(first) = reports.first() else {
            return Self::default();
        };
        let classes = first
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let dsc = reports.iter().map(|r| r.classes[i].dsc_percent).sum::<f64>() / reports.len() as f64;
                let hds: Vec<f64> = reports.iter().filter_map(|r| r.classes[i].hd95).collect();
                let hd = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
                ClassMetrics {
                    name: c.name.clone(),
                    dsc_percent: dsc,
                    hd95: hd,
                    defined: hd.is_some(),
                }
            })
            .collect();
        Self::from_classes(classes)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10} {:>9} {:>10}\n", "class", "DSC(%)", "HD95");
        let hd = |v: Option<f64>| v.map_or("undefined".to_string(), |h| format!("{h:.3}"));
        for c in &self.classes {
            let _ = writeln!(s, "{:<10} {:>9.2} {:>10}", c.name, c.dsc_percent, hd(c.hd95));
        }
        let _ = writeln!(
            s,
            "{:<10} {:>9.2} {:>10}",
            "mean",
            self.mean_dsc_percent,
            hd(self.mean_hd95)
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
