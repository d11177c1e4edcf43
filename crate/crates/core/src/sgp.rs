//! Sample Gradient Purification.
//!
//! Per-channel extremum thresholding and normalization of superpixel
//! gradients: positive and negative entries are filtered independently
//! against a fraction β of their channel extremum, survivors are
//! normalized by that extremum, and negative survivors keep their sign so
//! the downstream cosine can distinguish facilitation from impediment.

/// Signed, thresholded, normalized superpixel gradient with its survivor
/// mask. Values are laid out J×C with index `j * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PurifiedGradient {
    pub j: usize,
    pub channels: usize,
    /// 0 where masked out; otherwise magnitude in (β, 1], sign preserved.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub beta: f64,
    /// Per-channel (g_+, g_-): the largest nonnegative entry and the most
    /// negative entry; 0 where the side is empty.
    pub extrema: Vec<(f64, f64)>,
}

/// Filters and normalizes a J×C superpixel gradient array.
///
/// Per channel: entries strictly above β·g_+ survive as g/g_+; entries
/// strictly below β·g_- survive as −(g/g_-) (i.e. sign kept, magnitude in
/// (β, 1]); everything else is zeroed. Zero entries count toward the
/// nonnegative extremum and never survive.
pub fn purify(g: &[f64], j: usize, channels: usize, beta: f64) -> PurifiedGradient {
    assert!(beta > 0.0 && beta < 1.0, "beta must lie in (0,1)");
    assert_eq!(g.len(), j * channels);
    let mut extrema = vec![(0.0f64, 0.0f64); channels];
    for c in 0..channels {
        let mut gp = f64::NEG_INFINITY;
        let mut gm = f64::INFINITY;
        let mut has_pos = false;
        let mut has_neg = false;
        for jj in 0..j {
            let v = g[jj * channels + c];
            if v >= 0.0 {
                has_pos = true;
                gp = gp.max(v);
            } else {
                has_neg = true;
                gm = gm.min(v);
            }
        }
        extrema[c] = (if has_pos { gp } else { 0.0 }, if has_neg { gm } else { 0.0 });
    }
    let mut values = vec![0.0; g.len()];
    let mut mask = vec![false; g.len()];
    for c in 0..channels {
        let (gp, gm) = extrema[c];
        for jj in 0..j {
            let idx = jj * channels + c;
            let v = g[idx];
            if v >= 0.0 {
                if gp > 0.0 && v > beta * gp {
                    values[idx] = v / gp;
                    mask[idx] = true;
                }
            } else if v < beta * gm {
                // gm < 0 here by construction
                values[idx] = -(v / gm);
                mask[idx] = true;
            }
        }
    }
    PurifiedGradient {
        j,
        channels,
        values,
        mask,
        beta,
        extrema,
    }
}

/// Survivor positions in deterministic channel-major order (ascending j
/// within each channel).
pub fn survivors(p: &PurifiedGradient) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for c in 0..p.channels {
        for j in 0..p.j {
            if p.mask[j * p.channels + c] {
                out.push((j, c));
            }
        }
    }
    out
}

/// Purifies `g` considering only positions where `keep` is true; everything
/// else is zeroed and excluded from the extremum computation. Used to purify
/// the proxy's simulated gradient on the victim's survivor support before
/// the cosine comparison.
pub fn purify_restricted(
    g: &[f64],
    keep: &[bool],
    j: usize,
    channels: usize,
    beta: f64,
) -> PurifiedGradient {
    assert!(beta > 0.0 && beta < 1.0, "beta must lie in (0,1)");
    assert_eq!(g.len(), j * channels);
    assert_eq!(keep.len(), g.len());
    let mut extrema = vec![(0.0f64, 0.0f64); channels];
    for c in 0..channels {
        let mut gp = f64::NEG_INFINITY;
        let mut gm = f64::INFINITY;
        let (mut has_pos, mut has_neg) = (false, false);
        for jj in 0..j {
            let idx = jj * channels + c;
            if !keep[idx] {
                continue;
            }
            let v = g[idx];
            if v >= 0.0 {
                has_pos = true;
                gp = gp.max(v);
            } else {
                has_neg = true;
                gm = gm.min(v);
            }
        }
        extrema[c] = (if has_pos { gp } else { 0.0 }, if has_neg { gm } else { 0.0 });
    }
    let mut values = vec![0.0; g.len()];
    let mut mask = vec![false; g.len()];
    for c in 0..channels {
        let (gp, gm) = extrema[c];
        for jj in 0..j {
            let idx = jj * channels + c;
            if !keep[idx] {
                continue;
            }
            let v = g[idx];
            if v >= 0.0 {
                if gp > 0.0 && v > beta * gp {
                    values[idx] = v / gp;
                    mask[idx] = true;
                }
            } else if v < beta * gm {
                values[idx] = -(v / gm);
                mask[idx] = true;
            }
        }
    }
    PurifiedGradient {
        j,
        channels,
        values,
        mask,
        beta,
        extrema,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_entry_enumeration() {
        // entries {0.9, 0.4, -0.6, -0.2}, β=0.5 → {1.0, 0, -1.0, 0}
        let p = purify(&[0.9, 0.4, -0.6, -0.2], 4, 1, 0.5);
        assert_eq!(p.values, vec![1.0, 0.0, -1.0, 0.0]);
        assert_eq!(p.mask, vec![true, false, true, false]);
        assert_eq!(survivors(&p), vec![(0, 0), (2, 0)]);
        assert_eq!(p.extrema, vec![(0.9, -0.6)]);
    }

    #[test]
    fn all_equal_positive_all_survive() {
        let p = purify(&[0.3; 5], 5, 1, 0.9);
        assert_eq!(p.values, vec![1.0; 5]);
        assert!(p.mask.iter().all(|&m| m));
    }

    #[test]
    fn all_zero_channel_stays_zero() {
        let p = purify(&[0.0; 6], 3, 2, 0.5);
        assert_eq!(p.values, vec![0.0; 6]);
        assert!(p.mask.iter().all(|&m| !m));
        assert_eq!(p.extrema, vec![(0.0, 0.0); 2]);
    }

    #[test]
    fn empty_negative_side_records_zero_extremum() {
        let p = purify(&[0.2, 0.8], 2, 1, 0.5);
        assert_eq!(p.extrema, vec![(0.8, 0.0)]);
        assert_eq!(p.values, vec![0.0, 1.0]);
    }
}
