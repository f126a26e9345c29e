//! Sliding-window inference with uniform blending.

use crate::data::sample::{crop, reflect_pad};
use crate::data::{Case, Volume};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::GlimsModel;
use crate::tensor::Tensor;

/// Window starts along one axis: multiples of the stride, then a last start
/// clamped to `extent - patch`, without duplicates.
pub fn window_starts(extent: usize, patch: usize, overlap: f64) -> Result<Vec<usize>> {
    if patch == 0 || extent < patch {
        return Err(Error::InvalidArgument(format!(
            "extent {extent} is smaller than patch {patch}"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap {overlap} must be in [0, 1)")));
    }
    let stride = ((patch as f64 * (1.0 - overlap)).round() as usize).max(1);
    let last = extent - patch;
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s < last).collect();
    starts.push(last);
    Ok(starts)
}

/// Logits `[1, K, D, H, W]` for a `[1, C, D, H, W]` volume, averaging the
/// windows that cover each voxel. Axes shorter than the patch are
/// reflect-padded and the result is cropped back.
pub fn sliding_window(model: &GlimsModel, volume: &Tensor<f32>, overlap: f64) -> Result<Tensor<f32>> {
    let s = volume.shape();
    if s.len() != 5 || s[0] != 1 {
        return Err(Error::shape(
            "sliding_window",
            format!("expected [1, C, D, H, W], got {s:?}"),
        ));
    }
    let patch = model.config.patch_size;
    let channels = s[1];
    let dims = [s[2], s[3], s[4]];
    let original = Volume::new(channels, dims, [1.0; 3], volume.data().to_vec())?;
    let (padded, _) = reflect_pad(&original, None, patch)?;
    let pd = padded.dims;
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| window_starts(pd[a], patch, overlap))
        .collect::<Result<_>>()?;

    let k = model.config.num_classes;
    let vox = pd.iter().product::<usize>();
    let mut sum = vec![0f32; k * vox];
    let mut count = vec![0u32; vox];
    let size = [patch; 3];
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                let corner = [z, y, x];
                let window = crop(&padded.data, pd, channels, corner, size);
                let input = Tensor::new(&[1, channels, patch, patch, patch], window)?;
                let logits = model.predict(&input)?;
                accumulate(&mut sum, &mut count, logits.data(), pd, corner, patch, k);
            }
        }
    }
    for c in 0..k {
        for (v, &n) in sum[c * vox..(c + 1) * vox].iter_mut().zip(&count) {
            *v /= n as f32;
        }
    }
    let out = crop(&sum, pd, k, [0; 3], dims);
    Tensor::new(&[1, k, dims[0], dims[1], dims[2]], out)
}

fn accumulate(
    sum: &mut [f32],
    count: &mut [u32],
    logits: &[f32],
    dims: [usize; 3],
    corner: [usize; 3],
    patch: usize,
    k: usize,
) {
    let [_, h, w] = dims;
    let vox = dims.iter().product::<usize>();
    let pv = patch * patch * patch;
    for z in 0..patch {
        for y in 0..patch {
            let row = ((corner[0] + z) * h + corner[1] + y) * w + corner[2];
            let src = (z * patch + y) * patch;
            for c in 0..k {
                let dst = &mut sum[c * vox + row..c * vox + row + patch];
                for (d, s) in dst.iter_mut().zip(&logits[c * pv + src..c * pv + src + patch]) {
                    *d += s;
                }
            }
            for n in &mut count[row..row + patch] {
                *n += 1;
            }
        }
    }
}

/// Per-voxel arg-max over the class axis of `[1, K, D, H, W]` logits.
pub fn argmax_labels(logits: &Tensor<f32>) -> Vec<u8> {
    let s = logits.shape();
    let (k, vox) = (s[1], s[2] * s[3] * s[4]);
    let d = logits.data();
    (0..vox)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if d[c * vox + v] > d[best * vox + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

pub fn predict_labels(model: &GlimsModel, image: &Volume, overlap: f64) -> Result<Vec<u8>> {
    if image.channels != model.config.in_channels {
        return Err(Error::AxisMismatch {
            op: "predict_labels",
            axis: 1,
            expected: model.config.in_channels,
            actual: image.channels,
        });
    }
    Ok(argmax_labels(&sliding_window(model, &image.to_tensor(), overlap)?))
}

/// Metrics of full-volume predictions, averaged over cases.
pub fn evaluate(model: &GlimsModel, cases: &[Case], overlap: f64) -> Result<MetricsReport> {
    let mut reports = Vec::with_capacity(cases.len());
    for case in cases {
        let pred = predict_labels(model, &case.image, overlap)?;
        let spacing = case.labels.spacing.map(f64::from);
        reports.push(MetricsReport::evaluate(
            &pred,
            &case.labels.data,
            case.labels.dims,
            spacing,
            model.config.num_classes,
        )?);
    }
    Ok(MetricsReport::average(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_clamp_and_dedup() {
        assert_eq!(window_starts(128, 96, 0.8).unwrap(), [0, 19, 32]);
        assert_eq!(window_starts(96, 96, 0.8).unwrap(), [0]);
        assert_eq!(window_starts(10, 4, 0.5).unwrap(), [0, 2, 4, 6]);
        assert!(window_starts(3, 4, 0.5).is_err());
    }
}
