use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Per-output-index list of (input index, weight) for box-filter resampling.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|j| {
            let lo = j as f64 * ratio;
            let hi = lo + ratio;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging resize of an H×W×C image.
pub fn resize_area(img: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.to_owned();
    }
    let wy = area_weights(h, out_h);
    let wx = area_weights(w, out_w);
    // rows first, then columns
    let mut tmp = Array3::<f64>::zeros((out_h, w, c));
    for (oy, taps) in wy.iter().enumerate() {
        for &(iy, wt) in taps {
            let src = img.index_axis(ndarray::Axis(0), iy);
            let mut dst = tmp.index_axis_mut(ndarray::Axis(0), oy);
            dst.scaled_add(wt, &src);
        }
    }
    let mut out = Array3::<f64>::zeros((out_h, out_w, c));
    for (ox, taps) in wx.iter().enumerate() {
        for &(ix, wt) in taps {
            let src = tmp.index_axis(ndarray::Axis(1), ix);
            let mut dst = out.index_axis_mut(ndarray::Axis(1), ox);
            dst.scaled_add(wt, &src);
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Nearest-centre resize for label masks (classes must not be blended).
pub fn resize_nearest(mask: ArrayView2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
        mask[[sy, sx]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for (n_in, n_out) in [(1920, 640), (1080, 90), (7, 3), (5, 5)] {
            for taps in area_weights(n_in, n_out) {
                let s: f64 = taps.iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn integer_factor_is_block_mean() {
        let img = Array3::from_shape_fn((4, 4, 1), |(y, x, _)| (y * 4 + x) as f64 / 16.0);
        let out = resize_area(img.view(), 2, 2);
        let expected = (0.0 + 1.0 + 4.0 + 5.0) / 4.0 / 16.0;
        assert!((out[[0, 0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn nearest_keeps_labels() {
        let m = Array2::from_shape_fn((90, 160), |(y, _)| if y < 45 { 10u8 } else { 0 });
        let r = resize_nearest(m.view(), 9, 16);
        assert_eq!(r[[0, 0]], 10);
        assert_eq!(r[[8, 15]], 0);
    }
}
