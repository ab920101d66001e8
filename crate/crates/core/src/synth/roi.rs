//! Mask bounding boxes and region-of-interest crops.

use crate::error::{Result, UstError};
use crate::kernels::{self, PixelBox};
use crate::model::{ImageBatch, MaskBatch};
use crate::tensor::Tensor;

/// Tightest box around the foreground of one `h x w` mask plane.
pub fn mask_bbox(mask: &[f64], h: usize, w: usize) -> Result<PixelBox> {
    assert_eq!(mask.len(), h * w);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for (c, &v) in mask[r * w..(r + 1) * w].iter().enumerate() {
            if v >= 0.5 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(UstError::EmptyMask("bounding box of an empty mask".into()));
    }
    Ok(PixelBox {
        row: r0,
        col: c0,
        height: r1 - r0 + 1,
        width: c1 - c0 + 1,
    })
}

/// Bounding boxes of every mask of a batch.
pub fn batch_bboxes(m: &MaskBatch) -> Result<Vec<PixelBox>> {
    let (h, w) = m.hw();
    (0..m.batch())
        .map(|i| mask_bbox(m.tensor().sample_data(i), h, w))
        .collect()
}

/// Zero the background, crop to the mask's bounding box and bilinearly
/// resize the crop to `out_size x out_size`.
pub fn extract_roi(x: &ImageBatch, m: &MaskBatch, out_size: usize) -> Result<ImageBatch> {
    let t = extract_roi_tensor(x.tensor(), m, out_size)?;
    ImageBatch::new(t)
}

pub(crate) fn extract_roi_tensor(x: &Tensor, m: &MaskBatch, out_size: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4();
    if m.batch() != n || m.hw() != (h, w) {
        return Err(UstError::shape("extract_roi mask", &[n, 1, h, w], m.tensor().shape()));
    }
    let boxes = batch_bboxes(m)?;
    let dst = PixelBox::full(out_size, out_size);
    let mut out = Tensor::zeros(&[n, c, out_size, out_size]);
    let plane_out = c * out_size * out_size;
    for (i, bb) in boxes.iter().enumerate() {
        let mut masked = x.sample_data(i).to_vec();
        let mk = m.tensor().sample_data(i);
        for ch in 0..c {
            for (v, mv) in masked[ch * h * w..(ch + 1) * h * w].iter_mut().zip(mk) {
                *v *= mv;
            }
        }
        kernels::resample_forward(
            &masked,
            c,
            (h, w),
            bb,
            &dst,
            (out_size, out_size),
            &mut out.data_mut()[i * plane_out..(i + 1) * plane_out],
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(h: usize, w: usize, on: &[(usize, usize)]) -> Vec<f64> {
        let mut m = vec![0.0; h * w];
        for &(r, c) in on {
            m[r * w + c] = 1.0;
        }
        m
    }

    #[test]
    fn bbox_edge_cases() {
        let full = vec![1.0; 6 * 5];
        assert_eq!(mask_bbox(&full, 6, 5).unwrap(), PixelBox::full(6, 5));
        let single = mask_from(8, 8, &[(3, 5)]);
        assert_eq!(
            mask_bbox(&single, 8, 8).unwrap(),
            PixelBox {
                row: 3,
                col: 5,
                height: 1,
                width: 1
            }
        );
        assert!(matches!(mask_bbox(&[0.0; 4], 2, 2), Err(UstError::EmptyMask(_))));
    }

    proptest! {
        #[test]
        fn bbox_matches_brute_force_scan(bits in proptest::collection::vec(any::<bool>(), 70)) {
            let (h, w) = (7, 10);
            let m: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let coords: Vec<(usize, usize)> = (0..h * w).filter(|&i| bits[i]).map(|i| (i / w, i % w)).collect();
            match mask_bbox(&m, h, w) {
                Err(_) => prop_assert!(coords.is_empty()),
                Ok(b) => {
                    let rmin = coords.iter().map(|c| c.0).min().unwrap();
                    let rmax = coords.iter().map(|c| c.0).max().unwrap();
                    let cmin = coords.iter().map(|c| c.1).min().unwrap();
                    let cmax = coords.iter().map(|c| c.1).max().unwrap();
                    prop_assert_eq!(b, PixelBox { row: rmin, col: cmin, height: rmax - rmin + 1, width: cmax - cmin + 1 });
                }
            }
        }
    }

    fn ramp(n: usize, c: usize, h: usize, w: usize) -> ImageBatch {
        let len = n * c * h * w;
        let data = (0..len).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        ImageBatch::new(Tensor::new(&[n, c, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn full_frame_roi_is_masked_resize_and_idempotent() {
        let x = ramp(1, 3, 8, 8);
        let m = MaskBatch::ones(1, 8, 8);
        let once = extract_roi(&x, &m, 8).unwrap();
        assert!(once.tensor().max_abs_diff(x.tensor()) <= 1e-6);
        let twice = extract_roi(&once, &m, 8).unwrap();
        assert!(twice.tensor().max_abs_diff(once.tensor()) <= 1e-6);
    }

    #[test]
    fn background_pixels_become_zero() {
        let x = ImageBatch::new(Tensor::full(&[1, 1, 4, 4], 0.7)).unwrap();
        let m = MaskBatch::new(Tensor::new(&[1, 1, 4, 4], {
            let mut v = vec![1.0; 16];
            v[5] = 0.0;
            v
        }).unwrap())
        .unwrap();
        let roi = extract_roi(&x, &m, 4).unwrap();
        assert_eq!(roi.tensor().data()[5], 0.0);
        assert_eq!(roi.tensor().data()[0], 0.7);
    }
}
