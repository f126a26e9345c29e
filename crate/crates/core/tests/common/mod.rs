//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use glims::model::ModelConfig;
use glims::params::ParamStore;
use glims::swin::{WindowAttention, WindowGrid};
use glims::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Original coordinate of token `t` of window `w` after the cyclic shift.
pub fn origin(g: &WindowGrid, w: usize, t: usize) -> ([usize; 3], [usize; 3]) {
    let nw = g.windows_per_axis();
    let wc = [w / (nw[1] * nw[2]), (w / nw[2]) % nw[1], w % nw[2]];
    let m = g.window;
    let tc = [t / (m[1] * m[2]), (t / m[2]) % m[1], t % m[2]];
    let p = [0, 1, 2].map(|a| (wc[a] * m[a] + tc[a] + g.shift[a]) % g.padded[a]);
    (p, tc)
}

#[derive(Debug)]
pub struct MaskAudit {
    /// Query rows checked, one per real token and head.
    pub rows: usize,
    /// Largest weight on a padded key or a key across the cyclic seam.
    pub max_forbidden: f64,
    /// Largest deviation of a row's allowed weights from summing to one.
    pub max_row_error: f64,
}

/// Attention weights of shifted windows on every grid up to 4^3 with M = 2.
/// A key is allowed iff it is a real voxel and its offset from the query in
/// the original volume equals their offset inside the window.
pub fn audit_shifted_masks(attn: &WindowAttention, store: &ParamStore<f32>, dim: usize) -> MaskAudit {
    let p = store.constants();
    let heads = attn.heads;
    let mut audit = MaskAudit {
        rows: 0,
        max_forbidden: 0.0,
        max_row_error: 0.0,
    };
    for d in 1..=4 {
        for h in 1..=4 {
            for w in 1..=4 {
                let g = WindowGrid::new([d, h, w], 2, true).unwrap();
                let seed = (d * 16 + h * 4 + w) as u64;
                let x = Tensor::randn(&[1, dim, d, h, w], 4.0, &mut ChaCha8Rng::seed_from_u64(seed));
                let tokens = g.partition(&Var::constant(x)).unwrap();
                let mask = g.mask::<f32>();
                let (_, weights) = attn.forward_with_weights(&p, &tokens, mask.as_ref()).unwrap();
                let t = g.tokens_per_window();
                let wv = weights.value();
                for win in 0..g.num_windows() {
                    for i in 0..t {
                        let (pi, ti) = origin(&g, win, i);
                        if (0..3).any(|a| pi[a] >= g.extent[a]) {
                            continue;
                        }
                        for head in 0..heads {
                            let mut allowed = 0.0f64;
                            for j in 0..t {
                                let (pj, tj) = origin(&g, win, j);
                                let real = (0..3).all(|a| pj[a] < g.extent[a]);
                                let contiguous =
                                    (0..3).all(|a| pi[a] as isize - pj[a] as isize == ti[a] as isize - tj[a] as isize);
                                let v = wv.at(&[win, head, i, j]) as f64;
                                if real && contiguous {
                                    allowed += v;
                                } else {
                                    audit.max_forbidden = audit.max_forbidden.max(v);
                                }
                            }
                            audit.max_row_error = audit.max_row_error.max((allowed - 1.0).abs());
                            audit.rows += 1;
                        }
                    }
                }
            }
        }
    }
    audit
}

pub fn oracle_boundary(mask: &[bool], [d, h, w]: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[(z * h + y) * w + x] {
                    continue;
                }
                let p = [z as isize, y as isize, x as isize];
                let exposed = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
                    .iter()
                    .any(|o: &[isize; 3]| {
                        let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                        let inside = q[0] >= 0
                            && q[1] >= 0
                            && q[2] >= 0
                            && q[0] < d as isize
                            && q[1] < h as isize
                            && q[2] < w as isize;
                        !inside || !mask[((q[0] as usize) * h + q[1] as usize) * w + q[2] as usize]
                    });
                if exposed {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

pub fn oracle_directed(a: &[[usize; 3]], b: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut d: Vec<f64> = a
        .iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    (0..3)
                        .map(|i| ((p[i] as f64 - q[i] as f64) * spacing[i]).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let rank = ((0.95 * d.len() as f64).ceil() as usize).max(1);
    d[rank - 1]
}

pub fn oracle_hd95(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Option<f64> {
    if !a.contains(&true) || !b.contains(&true) {
        return None;
    }
    let (ba, bb) = (oracle_boundary(a, dims), oracle_boundary(b, dims));
    Some(oracle_directed(&ba, &bb, spacing).max(oracle_directed(&bb, &ba, spacing)))
}

pub fn oracle_dsc(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|v| **v).count() + b.iter().filter(|v| **v).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Empty, sparse, dense or blob-shaped masks.
pub fn random_mask(r: &mut ChaCha8Rng, dims: [usize; 3]) -> Vec<bool> {
    let n: usize = dims.iter().product();
    match r.random_range(0..5) {
        0 => vec![false; n],
        1 => (0..n).map(|_| r.random_bool(0.02)).collect(),
        2 => (0..n).map(|_| r.random_bool(0.5)).collect(),
        _ => {
            let c = dims.map(|e| r.random_range(0.0..e as f64));
            let rad = r.random_range(1.0..dims[0] as f64 / 2.0);
            (0..n)
                .map(|i| {
                    let p = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
                    (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>() <= rad * rad
                })
                .collect()
        }
    }
}

/// Two convolutional levels and a bottleneck without transformer blocks.
pub fn cnn_only() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        num_levels: 2,
        depths: vec![0],
        patch_size: 8,
        deep_supervision_levels: 2,
        ..ModelConfig::full()
    }
}

pub fn dacb(c: usize) -> usize {
    3 * c * 27 + (3 * c * 2 * c + 2 * c) + (2 * c * c + c)
}

pub fn pointwise(cin: usize, cout: usize) -> usize {
    cin * cout + cout
}

pub fn csab(c: usize) -> usize {
    let h = (c / 8).max(1);
    (c * h + h) + (h * c + c) + pointwise(2, 1)
}

/// Parameter count of [`cnn_only`] from the block formulas.
pub fn cnn_only_hand_count() -> usize {
    let (s, k) = (4, 4);
    let down = |c: usize| 2 * dacb(c) + 2 * c * c * 8 + 2 * c;
    let up = |c: usize| (2 * c * c * 8 + c) + pointwise(2 * c, c) + 2 * dacb(c);
    pointwise(4, s)
        + down(s)
        + down(2 * s)
        + csab(s)
        + csab(2 * s)
        + up(s)
        + up(2 * s)
        + pointwise(s, k)
        + pointwise(2 * s, k)
}
