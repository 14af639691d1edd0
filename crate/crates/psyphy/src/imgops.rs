//! Float image operations shared by preprocessing, augmentation and figure
//! rendering. Arrays are `[3, H, W]` with values in `[0, 1]` until normalized.

use image::RgbImage;
use ndarray::Array3;

/// Fixed published channel statistics used by object-pretrained weights.
pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub fn to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    })
}

/// Clamps to `[0, 1]` and rounds to 8-bit.
pub fn to_image(arr: &Array3<f32>) -> RgbImage {
    let (c, h, w) = arr.dim();
    assert_eq!(c, 3, "expected 3 channels");
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            (arr[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear(arr: &Array3<f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (c_n, h, w) = arr.dim();
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    let mut out = Array3::<f32>::zeros((c_n, oh, ow));
    for oy in 0..oh {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..ow {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for c in 0..c_n {
                let top = arr[[c, y0, x0]] * (1.0 - wx) + arr[[c, y0, x1]] * wx;
                let bot = arr[[c, y1, x0]] * (1.0 - wx) + arr[[c, y1, x1]] * wx;
                out[[c, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

pub fn center_crop(arr: &Array3<f32>, ch: usize, cw: usize) -> Array3<f32> {
    let (_, h, w) = arr.dim();
    assert!(ch <= h && cw <= w, "crop larger than image");
    let y0 = (h - ch) / 2;
    let x0 = (w - cw) / 2;
    arr.slice(ndarray::s![.., y0..y0 + ch, x0..x0 + cw]).to_owned()
}

pub fn crop(arr: &Array3<f32>, y0: usize, x0: usize, ch: usize, cw: usize) -> Array3<f32> {
    arr.slice(ndarray::s![.., y0..y0 + ch, x0..x0 + cw]).to_owned()
}

pub fn hflip(arr: &Array3<f32>) -> Array3<f32> {
    let (c_n, h, w) = arr.dim();
    Array3::from_shape_fn((c_n, h, w), |(c, y, x)| arr[[c, y, w - 1 - x]])
}

pub fn normalize(mut arr: Array3<f32>) -> Array3<f32> {
    for c in 0..3 {
        let (m, s) = (NORM_MEAN[c], NORM_STD[c]);
        arr.index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|v| (v - m) / s);
    }
    arr
}

/// Evaluation-time preprocessing: resize the short side to `8/7` of the target
/// (256 for a 224 input), center-crop, then normalize.
pub fn preprocess(img: &RgbImage, input_size: (usize, usize)) -> Array3<f32> {
    let arr = to_array(img);
    let (_, h, w) = arr.dim();
    let (th, tw) = input_size;
    let short_target = (th.max(tw) * 8).div_ceil(7);
    let scale = short_target as f32 / h.min(w) as f32;
    let (rh, rw) = (
        ((h as f32 * scale).round() as usize).max(th),
        ((w as f32 * scale).round() as usize).max(tw),
    );
    let resized = resize_bilinear(&arr, rh, rw);
    normalize(center_crop(&resized, th, tw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_image_round_trip_is_exact() {
        let img = RgbImage::from_fn(5, 4, |x, y| image::Rgb([(x * 40) as u8, (y * 60) as u8, 7]));
        let back = to_image(&to_array(&img));
        assert_eq!(img, back);
    }

    #[test]
    fn identity_resize_preserves_values() {
        let arr = Array3::from_shape_fn((3, 6, 6), |(c, y, x)| (c + y * x) as f32 * 0.01);
        let out = resize_bilinear(&arr, 6, 6);
        let diff = (&out - &arr).mapv(f32::abs).iter().cloned().fold(0.0, f32::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn preprocess_yields_requested_shape() {
        let img = RgbImage::from_fn(100, 80, |x, y| image::Rgb([x as u8, y as u8, 0]));
        let out = preprocess(&img, (64, 64));
        assert_eq!(out.dim(), (3, 64, 64));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn hflip_is_involutive() {
        let arr = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| (c * 20 + y * 5 + x) as f32);
        assert_eq!(hflip(&hflip(&arr)), arr);
    }
}
