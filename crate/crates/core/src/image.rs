use crate::error::{Error, Result};

/// Row-major `height x width x channels` raster of intensities.
///
/// Targets hold values in `[0, 1]`; reconstructions may leave that range and
/// are kept unclamped until export.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        check_shape(width, height, channels)?;
        Ok(Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        })
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(width, height, channels)?;
        if data.len() != width * height * channels {
            return Err(Error::invalid(
                "image data",
                format!(
                    "expected {} values for {width}x{height}x{channels}, got {}",
                    width * height * channels,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Like [`ImageGrid::from_data`] but additionally requires every value in `[0, 1]`.
    pub fn target(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let img = Self::from_data(width, height, channels, data)?;
        img.check_target_range()?;
        Ok(img)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_shape(width, height, channels)?;
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::from_data(width, height, channels, data)
    }

    pub fn check_target_range(&self) -> Result<()> {
        match self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(v) => Err(Error::invalid("target image", format!("value {v} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(width, height, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    /// One channel as a dense `height x width` plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Rec. 601 luma for three-channel images; copies single-channel images.
    pub fn to_gray(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self.data.chunks_exact(self.channels).map(luminance).collect();
        Self {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Box-filter downsampling by an integer factor (trailing partial blocks dropped).
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || factor > self.width || factor > self.height {
            return Err(Error::invalid("downsample factor", format!("{factor} does not fit the image")));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = (factor * factor) as f64;
        Self::from_fn(w, h, self.channels, |x, y, c| {
            let mut acc = 0.0;
            for yy in y * factor..(y + 1) * factor {
                for xx in x * factor..(x + 1) * factor {
                    acc += self.get(xx, yy, c);
                }
            }
            acc / norm
        })
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            })
        }
    }
}

/// Rec. 601 luma of a pixel or amplitude vector; single values pass through.
pub fn luminance(v: &[f64]) -> f64 {
    match v {
        [g] => *g,
        [r, g, b, ..] => 0.299 * r + 0.587 * g + 0.114 * b,
        _ => v.iter().sum::<f64>() / v.len().max(1) as f64,
    }
}

fn check_shape(width: usize, height: usize, channels: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("image size", format!("{width}x{height} has no pixels")));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::invalid("channels", format!("must be 1 or 3, got {channels}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_row_major_interleaved() {
        let img = ImageGrid::from_fn(3, 2, 3, |x, y, c| (100 * y + 10 * x + c) as f64).unwrap();
        assert_eq!(img.get(2, 1, 1), 121.0);
        assert_eq!(img.data()[img.index(1, 0, 2)], 12.0);
        assert_eq!(img.pixel(2, 1), &[120.0, 121.0, 122.0]);
        assert_eq!(img.plane(0), vec![0.0, 10.0, 20.0, 100.0, 110.0, 120.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ImageGrid::zeros(0, 4, 1).is_err());
        assert!(ImageGrid::zeros(4, 4, 2).is_err());
        assert!(ImageGrid::from_data(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageGrid::target(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageGrid::from_data(1, 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = ImageGrid::from_fn(4, 2, 1, |x, _, _| x as f64).unwrap();
        let d = img.downsample(2).unwrap();
        assert_eq!(d.shape(), (2, 1, 1));
        assert_eq!(d.data(), &[0.5, 2.5]);
    }
}
