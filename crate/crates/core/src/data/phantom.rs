//! Synthetic volumes with nested ellipsoidal regions.
//!
//! Class `k` occupies ellipsoid `k` minus ellipsoid `k + 1`, and every
//! ellipsoid lies inside its parent. A child with semi-axes `s_i a_i` and a
//! centre offset of E1-norm at most `1 - max s_i` is contained in the parent
//! (triangle inequality in the parent's norm), which is how offsets are drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::volume::{LabelVolume, Volume};
use crate::error::{Error, Result};

pub const MIN_EXTENT: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Background plus `classes - 1` nested regions.
    pub classes: usize,
    pub channels: usize,
    /// Outer semi-axes as a fraction of the half extent.
    pub outer_axes: (f64, f64),
    /// Child semi-axes as a fraction of the parent's, per axis.
    pub inner_scale: (f64, f64),
    /// `[classes][channels]` mean intensities; empty selects a default.
    pub means: Vec<Vec<f32>>,
    pub noise_sigma: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [64; 3],
            spacing: [1.0; 3],
            classes: 4,
            channels: 4,
            outer_axes: (0.55, 0.8),
            inner_scale: (0.6, 0.8),
            means: Vec::new(),
            noise_sigma: 0.1,
        }
    }
}

/// Default intensities: every channel orders the classes differently.
pub fn default_means(classes: usize, channels: usize) -> Vec<Vec<f32>> {
    let top = (classes - 1).max(1) as f32;
    (0..classes)
        .map(|k| (0..channels).map(|c| ((k + c) % classes) as f32 / top).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    /// Voxel-index coordinates.
    pub center: [f64; 3],
    pub axes: [f64; 3],
}

impl Ellipsoid {
    /// Squared norm of `p - center` in this ellipsoid's metric.
    pub fn norm2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.axes[i]).powi(2)).sum()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.norm2(p) <= 1.0
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.axes.iter().product::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub labels: LabelVolume,
    /// Outermost first.
    pub regions: Vec<Ellipsoid>,
}

fn check_range(name: &str, (lo, hi): (f64, f64), max: f64, errs: &mut Vec<String>) {
    if !(lo > 0.0 && lo <= hi && hi <= max) {
        errs.push(format!("{name} range ({lo}, {hi}) must satisfy 0 < lo <= hi <= {max}"));
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.dims.iter().any(|&d| d < MIN_EXTENT) {
            errs.push(format!("extents {:?} must be at least {MIN_EXTENT}", self.dims));
        }
        if self.classes < 2 || self.classes > 255 {
            errs.push(format!("class count {} must be in 2..=255", self.classes));
        }
        if self.channels == 0 {
            errs.push("channel count must be positive".into());
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            errs.push(format!("spacing {:?} must be positive", self.spacing));
        }
        check_range("outer axis", self.outer_axes, 1.0, &mut errs);
        if self.inner_scale.1 >= 1.0 {
            errs.push(format!(
                "inner scale {} would make an inner region larger than its parent",
                self.inner_scale.1
            ));
        } else {
            check_range("inner scale", self.inner_scale, 1.0, &mut errs);
        }
        if !self.means.is_empty()
            && (self.means.len() != self.classes || self.means.iter().any(|m| m.len() != self.channels))
        {
            errs.push(format!("means must be {} x {}", self.classes, self.channels));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            errs.push(format!("noise sigma {} must be non-negative", self.noise_sigma));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    fn draw_regions(&self, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
        let half = self.dims.map(|d| (d as f64 - 1.0) / 2.0);
        let (lo, hi) = self.outer_axes;
        let axes: [f64; 3] = std::array::from_fn(|i| rng.random_range(lo..=hi) * half[i]);
        let center = std::array::from_fn(|i| rng.random_range(axes[i]..=2.0 * half[i] - axes[i]));
        let mut regions = vec![Ellipsoid { center, axes }];
        let (lo, hi) = self.inner_scale;
        for _ in 2..self.classes {
            let parent = regions.last().unwrap();
            let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(lo..=hi));
            let slack = 1.0 - scale.iter().cloned().fold(0.0, f64::max);
            let dir: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let reach = slack * rng.random_range(0.0..=1.0);
            let child = Ellipsoid {
                center: std::array::from_fn(|i| parent.center[i] + parent.axes[i] * dir[i] / len * reach),
                axes: std::array::from_fn(|i| parent.axes[i] * scale[i]),
            };
            regions.push(child);
        }
        regions
    }

    pub fn generate(&self) -> Result<Phantom> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let regions = self.draw_regions(&mut rng);
        let [d, h, w] = self.dims;
        let mut labels = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z as f64, y as f64, x as f64];
                    let depth = regions.iter().take_while(|e| e.contains(p)).count();
                    labels.push(depth as u8);
                }
            }
        }
        let means = if self.means.is_empty() {
            default_means(self.classes, self.channels)
        } else {
            self.means.clone()
        };
        let vox = labels.len();
        let mut data = Vec::with_capacity(self.channels * vox);
        for c in 0..self.channels {
            for &l in &labels {
                let noise: f32 = if self.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    self.noise_sigma * z as f32
                } else {
                    0.0
                };
                data.push(means[l as usize][c] + noise);
            }
        }
        Ok(Phantom {
            image: Volume::new(self.channels, self.dims, self.spacing, data)?,
            labels: LabelVolume::new(self.dims, self.spacing, labels)?,
            regions,
        })
    }
}
