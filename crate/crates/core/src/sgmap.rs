//! SG-Map: a coarse saliency map of a (superpixel) sample gradient —
//! absolute value, per-channel max normalization, grayscale projection,
//! average pooling, and a PGM render.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm::write_pgm;
use crate::spgq::GradientPart;
use crate::tensor::Tensor;

/// ITU-R 601 luma weights for 3-channel gradients; single channels pass
/// through, anything else is averaged.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Default pool size: 7 for natural-image resolutions, 2 for small digits.
pub fn default_pool(height: usize) -> usize {
    if height >= 64 {
        7
    } else {
        2
    }
}

/// Builds the map from a pixel-level gradient of shape C×H×W. `pool` is
/// the average-pooling window (ragged edge tiles average over what they
/// cover).
pub fn sg_map(grad: &Tensor, pool: usize) -> Result<Tensor> {
    let (c, h, w) = match grad.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                context: "sg_map".into(),
                expected: vec![3],
                got: other.to_vec(),
            })
        }
    };
    if pool == 0 {
        return Err(Error::InvalidArgument("pool must be ≥ 1".into()));
    }
    let plane = h * w;
    // |g| with per-channel max normalization.
    let mut norm = vec![0.0; c * plane];
    for ch in 0..c {
        let s = &grad.data()[ch * plane..(ch + 1) * plane];
        let mx = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if mx > 0.0 {
            for (o, &v) in norm[ch * plane..(ch + 1) * plane].iter_mut().zip(s) {
                *o = v.abs() / mx;
            }
        }
    }
    // Grayscale projection.
    let mut gray = vec![0.0; plane];
    for (i, g) in gray.iter_mut().enumerate() {
        *g = match c {
            1 => norm[i],
            3 => (0..3).map(|ch| LUMA[ch] * norm[ch * plane + i]).sum(),
            _ => (0..c).map(|ch| norm[ch * plane + i]).sum::<f64>() / c as f64,
        };
    }
    // Average pooling with ragged edges.
    let ph = h.div_ceil(pool);
    let pw = w.div_ceil(pool);
    let mut out = vec![0.0; ph * pw];
    for by in 0..ph {
        for bx in 0..pw {
            let y1 = ((by + 1) * pool).min(h);
            let x1 = ((bx + 1) * pool).min(w);
            let mut s = 0.0;
            let mut n = 0usize;
            for y in by * pool..y1 {
                for x in bx * pool..x1 {
                    s += gray[y * w + x];
                    n += 1;
                }
            }
            out[by * pw + bx] = s / n as f64;
        }
    }
    Tensor::new(vec![ph, pw], out)
}

/// Expands a superpixel gradient record back to a piecewise-constant
/// pixel gradient (each member pixel takes its superpixel value).
pub fn record_gradient_image(gp: &GradientPart) -> Result<Tensor> {
    let seg = &gp.segmentation;
    let plane = seg.height * seg.width;
    let mut data = vec![0.0; gp.channels * plane];
    for (pix, &l) in seg.labels.iter().enumerate() {
        for c in 0..gp.channels {
            data[c * plane + pix] = gp.g[l as usize * gp.channels + c];
        }
    }
    Tensor::new(vec![gp.channels, seg.height, seg.width], data)
}

/// 8-bit PGM render: the map's maximum maps to 255 (an all-zero map stays
/// black).
pub fn render_pgm(map: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                context: "render_pgm".into(),
                expected: vec![2],
                got: other.to_vec(),
            })
        }
    };
    let mx = map.data().iter().fold(0.0f64, |m, &v| m.max(v));
    let pixels: Vec<u16> = map
        .data()
        .iter()
        .map(|&v| {
            if mx > 0.0 {
                (v / mx * 255.0).round() as u16
            } else {
                0
            }
        })
        .collect();
    write_pgm(path, w, h, 255, &pixels)
}
