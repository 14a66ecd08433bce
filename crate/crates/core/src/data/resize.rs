use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source coordinate and blend weight for one output index, half-pixel centers.
fn taps(out: usize, src: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / out as f64;
    (0..out)
        .map(|o| {
            let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (x - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of `[H, W, C]` to `[th, tw, C]`.
///
/// Sample points sit at pixel centers and are clamped at the borders, so a
/// 2×2 image shrunk to 1×1 averages all four pixels.
pub fn resize_bilinear(img: &Tensor<f32>, th: usize, tw: usize) -> Result<Tensor<f32>> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::shape("resize_bilinear", format!("expected [H,W,C], got {:?}", img.shape())));
    };
    if th == 0 || tw == 0 {
        return Err(Error::shape("resize_bilinear", "target must be at least 1x1"));
    }
    if (th, tw) == (h, w) {
        return Ok(img.clone());
    }
    let (ys, xs) = (taps(th, h), taps(tw, w));
    let src = img.data();
    let at = |y: usize, x: usize, k: usize| src[(y * w + x) * c + k];
    let mut out = Vec::with_capacity(th * tw * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for k in 0..c {
                let top = at(y0, x0, k) * (1.0 - fx) + at(y0, x1, k) * fx;
                let bot = at(y1, x0, k) * (1.0 - fx) + at(y1, x1, k) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![th, tw, c], out)
}
