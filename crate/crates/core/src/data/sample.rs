//! Random patches, reflective padding and flips.

use rand::Rng;

use super::volume::{LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mirror index without repeating the edge voxel (`... 2 1 0 1 2 ...`).
pub fn reflect_index(i: isize, extent: usize) -> usize {
    if extent == 1 {
        return 0;
    }
    let period = 2 * (extent as isize - 1);
    let r = i.rem_euclid(period);
    (if r < extent as isize { r } else { period - r }) as usize
}

fn gather<T: Copy>(
    src: &[T],
    dims: [usize; 3],
    channels: usize,
    out_dims: [usize; 3],
    at: impl Fn(usize, usize) -> usize,
) -> Vec<T> {
    let [d, h, w] = dims;
    let [od, oh, ow] = out_dims;
    let mut out = Vec::with_capacity(channels * od * oh * ow);
    for c in 0..channels {
        let base = c * d * h * w;
        for z in 0..od {
            let sz = at(0, z);
            for y in 0..oh {
                let sy = at(1, y);
                for x in 0..ow {
                    out.push(src[base + (sz * h + sy) * w + at(2, x)]);
                }
            }
        }
    }
    out
}

/// Grows every axis shorter than `min` to `min` by reflecting past the far
/// edge; the original occupies the leading corner.
pub fn reflect_pad(image: &Volume, labels: Option<&LabelVolume>, min: usize) -> Result<(Volume, Option<LabelVolume>)> {
    let out_dims = image.dims.map(|e| e.max(min));
    let at = |axis: usize, i: usize| reflect_index(i as isize, image.dims[axis]);
    let vol = Volume::new(
        image.channels,
        out_dims,
        image.spacing,
        gather(&image.data, image.dims, image.channels, out_dims, at),
    )?;
    let lab = labels
        .map(|l| LabelVolume::new(out_dims, l.spacing, gather(&l.data, l.dims, 1, out_dims, at)))
        .transpose()?;
    Ok((vol, lab))
}

/// Crops `[corner, corner + size)` on every axis.
pub fn crop<T: Copy>(src: &[T], dims: [usize; 3], channels: usize, corner: [usize; 3], size: [usize; 3]) -> Vec<T> {
    gather(src, dims, channels, size, |axis, i| corner[axis] + i)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Volume,
    pub labels: LabelVolume,
    pub corner: [usize; 3],
}

/// Uniformly random `size^3` patch with its aligned labels; volumes smaller
/// than the patch are reflect-padded first.
pub fn sample_patch<R: Rng + ?Sized>(image: &Volume, labels: &LabelVolume, size: usize, rng: &mut R) -> Result<Patch> {
    if image.dims != labels.dims {
        return Err(Error::shape(
            "sample_patch",
            format!("image {:?} and labels {:?} disagree", image.dims, labels.dims),
        ));
    }
    if size == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let padded;
    let (image, labels) = if image.dims.iter().any(|&e| e < size) {
        let (v, l) = reflect_pad(image, Some(labels), size)?;
        padded = (v, l.expect("labels padded"));
        (&padded.0, &padded.1)
    } else {
        (image, labels)
    };
    let corner: [usize; 3] = std::array::from_fn(|i| rng.random_range(0..=image.dims[i] - size));
    let size3 = [size; 3];
    Ok(Patch {
        image: Volume::new(
            image.channels,
            size3,
            image.spacing,
            crop(&image.data, image.dims, image.channels, corner, size3),
        )?,
        labels: LabelVolume::new(size3, labels.spacing, crop(&labels.data, labels.dims, 1, corner, size3))?,
        corner,
    })
}

/// Reverses the chosen axes of a channel-major volume in place.
pub fn flip<T: Copy>(data: &mut [T], dims: [usize; 3], channels: usize, axes: [bool; 3]) {
    if !axes.contains(&true) {
        return;
    }
    let src = data.to_vec();
    let out = gather(&src, dims, channels, dims, |axis, i| {
        if axes[axis] {
            dims[axis] - 1 - i
        } else {
            i
        }
    });
    data.copy_from_slice(&out);
}

/// Random independent flips of each axis with probability 1/2.
pub fn random_flip<R: Rng + ?Sized>(patch: &mut Patch, rng: &mut R) {
    let axes: [bool; 3] = std::array::from_fn(|_| rng.random_bool(0.5));
    flip(&mut patch.image.data, patch.image.dims, patch.image.channels, axes);
    flip(&mut patch.labels.data, patch.labels.dims, 1, axes);
}

/// Stacks equally sized patches into `[B, C, D, H, W]` and flat labels.
pub fn stack(patches: &[Patch]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = patches
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let [d, h, w] = first.image.dims;
    let c = first.image.channels;
    let mut data = Vec::with_capacity(patches.len() * first.image.data.len());
    let mut labels = Vec::with_capacity(patches.len() * first.labels.data.len());
    for p in patches {
        if p.image.dims != first.image.dims || p.image.channels != c {
            return Err(Error::shape("stack", "patches differ in shape"));
        }
        data.extend_from_slice(&p.image.data);
        labels.extend_from_slice(&p.labels.data);
    }
    Ok((Tensor::new(&[patches.len(), c, d, h, w], data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_mirrors_without_repeating_edges() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 3)).collect();
        assert_eq!(got, [1, 2, 1, 0, 1, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(5, 1), 0);
    }
}
