//! Cubic-convolution resampling (Keys kernel, `a = -0.5`) with clamped
//! edges.

const A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps along one axis: for each output index, the four clamped source
/// indices and their weights.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<[(usize, f64); 4]> {
    let ratio = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let frac = src - base;
            let base = base as isize;
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let offset = k as isize - 1;
                let idx = (base + offset).clamp(0, last) as usize;
                *tap = (idx, cubic_weight(frac - offset as f64));
            }
            taps
        })
        .collect()
}

/// Resamples a row-major `in_w × in_h` plane to `out_w × out_h`. No
/// clamping of the result; callers decide the valid range.
pub fn bicubic_plane(
    values: &[f64],
    in_w: usize,
    in_h: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f64> {
    assert_eq!(values.len(), in_w * in_h);
    let xs = axis_taps(in_w, out_w);
    let ys = axis_taps(in_h, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for ytaps in &ys {
        for xtaps in &xs {
            let mut acc = 0.0;
            for &(sy, wy) in ytaps {
                let row = &values[sy * in_w..(sy + 1) * in_w];
                let mut r = 0.0;
                for &(sx, wx) in xtaps {
                    r += wx * row[sx];
                }
                acc += wy * r;
            }
            out.push(acc);
        }
    }
    out
}
