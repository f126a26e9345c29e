//! `GLVOL1` volume files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                         |
//! |-------:|-----:|-------------------------------|
//! | 0      | 6    | magic `GLVOL1`                |
//! | 6      | 4    | u32 version (1)               |
//! | 10     | 4    | u32 channels                  |
//! | 14     | 12   | u32 D, H, W                   |
//! | 26     | 12   | f32 spacing D, H, W (mm)      |
//! | 38     | 1    | u8 dtype (0 = f32, 1 = u8)    |
//! | 39     | ...  | payload, channel-major `[C, D, H, W]` |

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"GLVOL1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 39;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub channels: u32,
    pub dims: [u32; 3],
    pub spacing: [f32; 3],
    pub dtype: Dtype,
}

impl Header {
    fn payload_len(&self) -> usize {
        let vox: usize = self.dims.iter().map(|&d| d as usize).product();
        self.channels as usize * vox * self.dtype.size()
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.push(self.dtype as u8);
    }

    fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < MAGIC.len() || &bytes[..6] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::TruncatedHeader(bytes.len()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(6);
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let dtype = match bytes[38] {
            0 => Dtype::F32,
            1 => Dtype::U8,
            t => return Err(FormatError::UnknownDtype(t)),
        };
        let header = Self {
            channels: u32_at(10),
            dims: [u32_at(14), u32_at(18), u32_at(22)],
            spacing: [f32_at(26), f32_at(30), f32_at(34)],
            dtype,
        };
        if header.channels == 0 || header.dims.contains(&0) {
            return Err(FormatError::InvalidHeader(format!(
                "channels {} and extents {:?} must be positive",
                header.channels, header.dims
            )));
        }
        if header.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(FormatError::InvalidHeader(format!(
                "spacing {:?} must be positive",
                header.spacing
            )));
        }
        Ok(header)
    }
}

fn split_payload(bytes: &[u8], expected: Dtype) -> Result<(Header, &[u8]), FormatError> {
    let header = Header::decode(bytes)?;
    if header.dtype != expected {
        return Err(FormatError::WrongDtype {
            expected: expected.name(),
            found: header.dtype.name(),
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let want = header.payload_len();
    if payload.len() < want {
        return Err(FormatError::Truncated {
            expected: want,
            actual: payload.len(),
        });
    }
    if payload.len() > want {
        return Err(FormatError::TrailingBytes {
            expected: want,
            actual: payload.len(),
        });
    }
    Ok((header, payload))
}

fn check_volume(dims: [usize; 3], spacing: [f32; 3], channels: usize, len: usize) -> Result<()> {
    if channels == 0 || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "volume extents {dims:?} and channels {channels} must be positive"
        )));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
    }
    if len != channels * dims.iter().product::<usize>() {
        return Err(Error::InvalidArgument(format!(
            "{len} values do not fill {channels} x {dims:?}"
        )));
    }
    Ok(())
}

/// Multi-channel image volume, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(channels: usize, dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_volume(dims, spacing, channels, data.len())?;
        Ok(Self {
            channels,
            dims,
            spacing,
            data,
        })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// `[1, C, D, H, W]` tensor view (copy).
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.dims;
        Tensor::new(&[1, self.channels, d, h, w], self.data.clone()).expect("consistent volume")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        Header {
            channels: self.channels as u32,
            dims: self.dims.map(|d| d as u32),
            spacing: self.spacing,
            dtype: Dtype::F32,
        }
        .encode(&mut out);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = split_payload(bytes, Dtype::F32)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(h.channels as usize, h.dims.map(|d| d as usize), h.spacing, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        check_volume(dims, spacing, 1, data.len())?;
        Ok(Self { dims, spacing, data })
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&l| l == class).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len());
        Header {
            channels: 1,
            dims: self.dims.map(|d| d as u32),
            spacing: self.spacing,
            dtype: Dtype::U8,
        }
        .encode(&mut out);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = split_payload(bytes, Dtype::U8)?;
        if h.channels != 1 {
            return Err(FormatError::InvalidHeader(format!("label files have 1 channel, found {}", h.channels)).into());
        }
        Self::new(h.dims.map(|d| d as usize), h.spacing, payload.to_vec())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
