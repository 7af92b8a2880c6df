use crate::simulator::Image;

/// Resamples an `fh x fw` map to `fh * stride x fw * stride`. Pixel centre
/// `u + 0.5` sits at feature coordinate `(u + 0.5) / stride`, clamped to the
/// map, matching the pixel-to-feature mapping of the attention masks.
pub fn upsample_bilinear(map: &[f64], fw: usize, fh: usize, stride: usize) -> Vec<f64> {
    let (w, h) = (fw * stride, fh * stride);
    let s = stride as f64;
    let mut out = Vec::with_capacity(w * h);
    for v in 0..h {
        let y = ((v as f64 + 0.5) / s).clamp(0.0, (fh - 1) as f64);
        let y0 = (y.floor() as usize).min(fh.saturating_sub(2));
        let ty = y - y0 as f64;
        let y1 = (y0 + 1).min(fh - 1);
        for u in 0..w {
            let x = ((u as f64 + 0.5) / s).clamp(0.0, (fw - 1) as f64);
            let x0 = (x.floor() as usize).min(fw.saturating_sub(2));
            let tx = x - x0 as f64;
            let x1 = (x0 + 1).min(fw - 1);
            let at = |xi: usize, yi: usize| map[yi * fw + xi];
            let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
            let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn heat(m: f64) -> [f64; 3] {
    let m = m.clamp(0.0, 1.0);
    [255.0 * (2.0 * m).min(1.0), 255.0 * (2.0 * m - 1.0).max(0.0), 0.0]
}

fn blend(frame: &Image, weights: &[f64]) -> Image {
    let mut out = frame.clone();
    for y in 0..frame.height {
        for x in 0..frame.width {
            let px = frame.pixel(x, y);
            let c = heat(weights[y * frame.width + x]);
            out.set_pixel(x, y, std::array::from_fn(|k| (0.5 * px[k] as f64 + 0.5 * c[k]).round() as u8));
        }
    }
    out
}

fn normalized(map: &[f64]) -> Vec<f64> {
    let max = map.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        map.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; map.len()]
    }
}

/// Per-step overlays plus one with every step superimposed (pixelwise
/// maximum). Each mask is scaled to peak 1, upsampled and alpha blended at
/// 0.5 over `frame` as a heat colour. `masks` is `[steps][fh * fw]`.
pub fn attention_overlays(frame: &Image, masks: &[Vec<f64>], fw: usize, fh: usize, stride: usize) -> (Vec<Image>, Image) {
    assert_eq!((fw * stride, fh * stride), (frame.width, frame.height), "mask grid does not tile the frame");
    let up: Vec<Vec<f64>> = masks.iter().map(|m| upsample_bilinear(&normalized(m), fw, fh, stride)).collect();
    let steps = up.iter().map(|w| blend(frame, w)).collect();
    let mut combined = vec![0.0; frame.width * frame.height];
    for w in &up {
        for (c, v) in combined.iter_mut().zip(w) {
            *c = f64::max(*c, *v);
        }
    }
    (steps, blend(frame, &combined))
}
