//! Input domains: explicit boxes and image patches.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ndarray::Array1;
use preimage_core::InputBox;
use serde::{Deserialize, Serialize};

use crate::image::Image;

/// Domain file contents. Image paths are relative to the domain file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// A `width x height` rectangle with top-left pixel at column `x`, row
    /// `y`, free to take any value in the channel bounds (default `[0, 1]`).
    Patch {
        image: PathBuf,
        x: usize,
        y: usize,
        width: usize,
        height: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channel_lower: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channel_upper: Option<Vec<f64>>,
    },
    /// Listed `[row, column]` pixels may only brighten, up to 1.
    MaskedPatch { image: PathBuf, mask: Vec<[usize; 2]> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatchShape {
    Rect { x: usize, y: usize, width: usize, height: usize },
    /// `(row, column)` pairs.
    Mask(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatchKind {
    /// Patched coordinates range over per-channel bounds.
    Free { lower: Vec<f64>, upper: Vec<f64> },
    /// Lower bound is the image, upper bound is 1 inside the patch.
    OneSided,
}

impl PatchKind {
    pub fn unit(channels: usize) -> Self {
        PatchKind::Free {
            lower: vec![0.0; channels],
            upper: vec![1.0; channels],
        }
    }
}

/// A built domain and, for image domains, the image and patch pixels.
#[derive(Debug, Clone)]
pub struct Domain {
    pub input: InputBox,
    pub image: Option<Image>,
    /// Flat pixel indices `row * width + column` of the patch.
    pub pixels: Vec<usize>,
}

impl PatchShape {
    /// Pixel indices covered, in row-major order without duplicates.
    pub fn pixels(&self, image: &Image) -> Result<Vec<usize>> {
        let (h, w) = (image.height, image.width);
        let mut out = match self {
            PatchShape::Rect { x, y, width, height } => {
                ensure!(
                    x + width <= w && y + height <= h,
                    "patch {width}x{height} at ({x}, {y}) does not fit a {w}x{h} image"
                );
                let mut v = Vec::with_capacity(width * height);
                for r in *y..y + height {
                    for c in *x..x + width {
                        v.push(r * w + c);
                    }
                }
                v
            }
            PatchShape::Mask(cells) => {
                let mut v = Vec::with_capacity(cells.len());
                for &(r, c) in cells {
                    ensure!(r < h && c < w, "mask pixel ({r}, {c}) outside a {w}x{h} image");
                    v.push(r * w + c);
                }
                v
            }
        };
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// Box around `image` where only the patch may change.
pub fn build_patch_domain(image: &Image, patch: &PatchShape, kind: &PatchKind) -> Result<InputBox> {
    let pixels = patch.pixels(image)?;
    let ch = image.channels;
    let mut lower = Array1::from(image.data.clone());
    let mut upper = lower.clone();
    match kind {
        PatchKind::Free { lower: lo, upper: hi } => {
            ensure!(
                lo.len() == ch && hi.len() == ch,
                "channel bounds need {ch} entries"
            );
            for k in 0..ch {
                ensure!(lo[k] <= hi[k], "channel {k} bounds [{}, {}] are reversed", lo[k], hi[k]);
            }
            for &p in &pixels {
                for k in 0..ch {
                    lower[p * ch + k] = lo[k];
                    upper[p * ch + k] = hi[k];
                }
            }
        }
        PatchKind::OneSided => {
            for &p in &pixels {
                for k in 0..ch {
                    upper[p * ch + k] = 1.0;
                }
            }
        }
    }
    Ok(InputBox::new(lower, upper)?)
}

impl DomainSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading domain {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing domain {}", path.display()))
    }

    /// Build the box; `base` is the directory relative image paths start from.
    pub fn build(&self, base: &Path) -> Result<Domain> {
        match self {
            DomainSpec::Box { lower, upper } => {
                if lower.len() != upper.len() {
                    bail!("box bounds have {} and {} entries", lower.len(), upper.len());
                }
                let input = InputBox::new(Array1::from(lower.clone()), Array1::from(upper.clone()))?;
                Ok(Domain {
                    input,
                    image: None,
                    pixels: Vec::new(),
                })
            }
            DomainSpec::Patch {
                image,
                x,
                y,
                width,
                height,
                channel_lower,
                channel_upper,
            } => {
                let img = Image::load(&base.join(image))?;
                let ch = img.channels;
                let kind = PatchKind::Free {
                    lower: channel_lower.clone().unwrap_or_else(|| vec![0.0; ch]),
                    upper: channel_upper.clone().unwrap_or_else(|| vec![1.0; ch]),
                };
                let shape = PatchShape::Rect {
                    x: *x,
                    y: *y,
                    width: *width,
                    height: *height,
                };
                let input = build_patch_domain(&img, &shape, &kind)?;
                let pixels = shape.pixels(&img)?;
                Ok(Domain {
                    input,
                    image: Some(img),
                    pixels,
                })
            }
            DomainSpec::MaskedPatch { image, mask } => {
                let img = Image::load(&base.join(image))?;
                let shape = PatchShape::Mask(mask.iter().map(|&[r, c]| (r, c)).collect());
                let input = build_patch_domain(&img, &shape, &PatchKind::OneSided)?;
                let pixels = shape.pixels(&img)?;
                Ok(Domain {
                    input,
                    image: Some(img),
                    pixels,
                })
            }
        }
    }
}
