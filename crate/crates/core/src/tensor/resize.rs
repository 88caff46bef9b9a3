//! Bilinear resampling of image stacks.

use super::{Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Tensor<T> {
    /// Bilinear resize of the last two axes with half-pixel centres and edge
    /// clamping. Halving an even extent averages each 2x2 block.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::config(format!(
                "resize_bilinear: cannot resize {:?} to {out_h}x{out_w}",
                self.shape()
            )));
        }
        let (h, w) = (self.shape()[r - 2], self.shape()[r - 1]);
        if h == 0 || w == 0 {
            return Err(Error::config("resize_bilinear: empty input"));
        }
        let planes = self.numel() / (h * w);
        let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f64)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(inp - 1);
                    let i1 = (i0 + 1).min(inp - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let ty = taps(h, out_h);
        let tx = taps(w, out_w);
        let src = self.data();
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let at = |y: usize, x: usize| plane[y * w + x].to_f64_lossy();
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out.push(T::of(top * (1.0 - fy) + bottom * fy));
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Tensor::from_vec(&shape, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_averages_blocks() {
        let t = Tensor::<f64>::from_vec(&[1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]).unwrap();
        let r = t.resize_bilinear(1, 2).unwrap();
        assert_eq!(r.shape(), &[1, 1, 2]);
        assert_eq!(r.data(), &[2.5, 6.5]);
    }

    #[test]
    fn same_size_is_identity() {
        let t = Tensor::<f32>::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.resize_bilinear(3, 2).unwrap(), t);
    }

    #[test]
    fn constant_stays_constant() {
        let t = Tensor::<f32>::full(&[2, 3, 7, 5], 0.3);
        let r = t.resize_bilinear(4, 9).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }
}
