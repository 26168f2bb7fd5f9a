//! Image input: plain PPM (`P3`) or PGM (`P2`) text files, or a JSON tensor
//! `{"shape": [h, w, c], "data": [...]}` in height, width, channel order.
//! Values end up in `[0, 1]`.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, channel fastest.
    pub data: Vec<f64>,
}

#[derive(Deserialize)]
struct Tensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(height > 0 && width > 0 && channels > 0, "image dimensions must be positive");
        ensure!(
            data.len() == height * width * channels,
            "image has {} values, expected {height} x {width} x {channels}",
            data.len()
        );
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!("pixel value {v} is outside [0, 1]");
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading image {}", path.display()))?;
        let parsed = if text.trim_start().starts_with('{') {
            Self::from_json(&text)
        } else {
            Self::from_netpbm(&text)
        };
        parsed.with_context(|| format!("parsing image {}", path.display()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Tensor = serde_json::from_str(text)?;
        let [h, w, c] = t.shape;
        Self::new(h, w, c, t.data)
    }

    /// Plain-text `P3` (colour) or `P2` (grey) with `#` comments.
    pub fn from_netpbm(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let channels = match tokens.next() {
            Some("P3") => 3,
            Some("P2") => 1,
            Some(m) => bail!("unsupported image format `{m}`; expected P2 or P3"),
            None => bail!("empty image file"),
        };
        let mut header = [0usize; 3];
        for h in &mut header {
            *h = tokens.next().context("truncated header")?.parse().context("bad header value")?;
        }
        let [width, height, maxval] = header;
        ensure!(maxval > 0, "maximum value must be positive");
        let data = tokens
            .map(|t| -> Result<f64> {
                let v: usize = t.parse().with_context(|| format!("bad pixel value `{t}`"))?;
                ensure!(v <= maxval, "pixel value {v} exceeds {maxval}");
                Ok(v as f64 / maxval as f64)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, channels, data)
    }

    pub fn to_ppm(&self) -> String {
        let magic = if self.channels == 1 { "P2" } else { "P3" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height);
        for row in self.data.chunks(self.width * self.channels) {
            let line: Vec<String> = row.iter().map(|v| ((v * 255.0).round() as u32).to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let text = "P3\n# a comment\n2 1\n255\n255 0 0  0 0 255\n";
        let img = Image::from_netpbm(text).unwrap();
        assert_eq!((img.height, img.width, img.channels), (1, 2, 3));
        assert_eq!(img.data, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(Image::from_netpbm(&img.to_ppm()).unwrap(), img);
    }

    #[test]
    fn rejects_bad_images() {
        assert!(Image::from_netpbm("P6\n1 1\n255\n0 0 0").is_err());
        assert!(Image::from_netpbm("P3\n1 1\n255\n0 0").is_err());
        assert!(Image::from_netpbm("P2\n1 1\n10\n11").is_err());
        assert!(Image::from_json(r#"{"shape":[1,1,1],"data":[1.5]}"#).is_err());
    }

    #[test]
    fn json_tensor() {
        let img = Image::from_json(r#"{"shape":[2,1,1],"data":[0.25,0.5]}"#).unwrap();
        assert_eq!((img.height, img.width, img.channels), (2, 1, 1));
    }
}
