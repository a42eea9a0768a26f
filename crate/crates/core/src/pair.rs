//! Registration inputs and displacement fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense displacement field `[1,2,H,W]` in voxel units. Component 0 is the
/// x displacement (along W), component 1 the y displacement (along H). A
/// target location `p` maps to the source location `p + u(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dvf(Tensor);

impl Dvf {
    pub fn new(field: Tensor) -> Result<Self> {
        let [n, c, _, _] = field.dims4()?;
        if n != 1 || c != 2 {
            return Err(Error::Shape(format!(
                "DVF must be [1,2,H,W], got {:?}",
                field.shape()
            )));
        }
        if field.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("DVF holds non-finite values".into()));
        }
        Ok(Dvf(field))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Dvf(Tensor::zeros(&[1, 2, height, width]))
    }

    /// Builds a field from per-pixel `(ux, uy)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut t = Tensor::zeros(&[1, 2, height, width]);
        let hw = height * width;
        let d = t.data_mut();
        for y in 0..height {
            for x in 0..width {
                let (ux, uy) = f(x, y);
                d[y * width + x] = ux;
                d[hw + y * width + x] = uy;
            }
        }
        Dvf(t)
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn ux(&self) -> &[f64] {
        &self.0.data()[..self.height() * self.width()]
    }

    pub fn uy(&self) -> &[f64] {
        &self.0.data()[self.height() * self.width()..]
    }

    /// Displacement at pixel `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width() + x;
        (self.ux()[i], self.uy()[i])
    }

    /// Bilinearly interpolated displacement at a real-valued location, or
    /// `None` outside the image domain.
    pub fn sample(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (w, h) = (self.width(), self.height());
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return None;
        }
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (tx, ty) = (x - x0 as f64, y - y0 as f64);
        let interp = |c: &[f64]| {
            let top = c[y0 * w + x0] * (1.0 - tx) + c[y0 * w + x1] * tx;
            let bot = c[y1 * w + x0] * (1.0 - tx) + c[y1 * w + x1] * tx;
            top * (1.0 - ty) + bot * ty
        };
        Some((interp(self.ux()), interp(self.uy())))
    }

    pub fn max_magnitude(&self) -> f64 {
        self.ux()
            .iter()
            .zip(self.uy())
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    pub fn negated(&self) -> Dvf {
        let data = self.0.data().iter().map(|v| -v).collect();
        Dvf(Tensor::new(self.0.shape(), data).expect("same shape"))
    }
}

/// A landmark correspondence in voxel coordinates `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub target: [f64; 2],
    pub source: [f64; 2],
}

/// Everything needed to train on and evaluate one image pair.
#[derive(Clone, Debug)]
pub struct RegistrationPair {
    /// `[1,1,H,W]`, intensities in `[0,1]`.
    pub source_image: Tensor,
    pub target_image: Tensor,
    /// `[1,K,H,W]`, one binary channel per organ.
    pub source_mask: Tensor,
    pub target_mask: Tensor,
    pub landmarks: Vec<Landmark>,
    pub gt_dvf: Option<Dvf>,
}

impl RegistrationPair {
    pub fn height(&self) -> usize {
        self.target_image.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.target_image.shape()[3]
    }

    pub fn organs(&self) -> usize {
        self.target_mask.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let [_, _, h, w] = self.target_image.dims4()?;
        for t in [&self.source_image, &self.source_mask, &self.target_mask] {
            let [_, _, th, tw] = t.dims4()?;
            if (th, tw) != (h, w) {
                return Err(Error::Shape(format!(
                    "pair spatial shapes disagree: {h}x{w} vs {th}x{tw}"
                )));
            }
        }
        if self.source_mask.shape() != self.target_mask.shape() {
            return Err(Error::Shape("source and target masks differ in shape".into()));
        }
        let inside = |p: [f64; 2]| {
            p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64
        };
        if let Some(l) = self
            .landmarks
            .iter()
            .find(|l| !inside(l.target) || !inside(l.source))
        {
            return Err(Error::Contract(format!("landmark {l:?} outside the image")));
        }
        Ok(())
    }
}
