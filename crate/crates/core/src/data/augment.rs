//! Training-time augmentation: horizontal flip, zero-pad and random crop,
//! random erasing with the dataset mean.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetRecord, Region};
use crate::autodiff::Tensor;

pub const FLIP_P: f64 = 0.5;
pub const PAD: usize = 10;
pub const ERASE_P: f64 = 0.5;
pub const ERASE_AREA: (f64, f64) = (0.02, 0.4);
pub const ERASE_ASPECT: f64 = 0.3;
const ERASE_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentFlags {
    pub flip: bool,
    pub pad_crop: bool,
    pub erase: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags { flip: true, pad_crop: true, erase: true }
    }
}

impl AugmentFlags {
    pub const OFF: AugmentFlags = AugmentFlags { flip: false, pad_crop: false, erase: false };
}

/// What a single [`augment_traced`] call did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentTrace {
    pub flipped: bool,
    /// Crop origin inside the padded image.
    pub crop: Option<(usize, usize)>,
    pub erased: Option<Region>,
}

pub fn augment<R: Rng>(record: &DatasetRecord, rng: &mut R, flags: AugmentFlags, fill: &[f64]) -> DatasetRecord {
    augment_traced(record, rng, flags, fill).0
}

/// `fill` holds one value per channel.
pub fn augment_traced<R: Rng>(
    record: &DatasetRecord,
    rng: &mut R,
    flags: AugmentFlags,
    fill: &[f64],
) -> (DatasetRecord, AugmentTrace) {
    let mut out = record.clone();
    let mut trace = AugmentTrace::default();
    let [c, h, w] = *out.image.shape() else { panic!("augment expects [C, H, W]") };
    assert_eq!(fill.len(), c, "one fill value per channel");

    if flags.flip && rng.random_bool(FLIP_P) {
        out.image = flip_horizontal(&out.image);
        out.occluder = out.occluder.map(|r| Region { left: w - r.left - r.width, ..r });
        trace.flipped = true;
    }
    if flags.pad_crop {
        let oy = rng.random_range(0..=2 * PAD);
        let ox = rng.random_range(0..=2 * PAD);
        out.image = pad_crop(&out.image, oy, ox);
        out.occluder = out.occluder.and_then(|r| shift(r, oy, ox, h, w));
        trace.crop = Some((oy, ox));
    }
    if flags.erase && rng.random_bool(ERASE_P) {
        let area = (h * w) as f64;
        for _ in 0..ERASE_ATTEMPTS {
            let target = rng.random_range(ERASE_AREA.0..ERASE_AREA.1) * area;
            let aspect = rng.random_range(ERASE_ASPECT..1.0 / ERASE_ASPECT);
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh >= h || ew >= w {
                continue;
            }
            let r = Region { top: rng.random_range(0..=h - eh), left: rng.random_range(0..=w - ew), height: eh, width: ew };
            let data = out.image.data_mut();
            for (ch, &f) in fill.iter().enumerate() {
                for y in r.top..r.top + eh {
                    let row = (ch * h + y) * w;
                    data[row + r.left..row + r.left + ew].fill(f);
                }
            }
            trace.erased = Some(r);
            break;
        }
    }
    (out, trace)
}

/// Mirrors a `[C, H, W]` image left to right.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let w = *image.shape().last().expect("image has a width");
    let mut data = image.data().to_vec();
    data.chunks_mut(w).for_each(<[f64]>::reverse);
    Tensor::new(image.shape(), data).expect("same shape")
}

/// Pads by [`PAD`] zeros on every side and crops an `H×W` window at `(oy, ox)`.
fn pad_crop(image: &Tensor, oy: usize, ox: usize) -> Tensor {
    let [c, h, w] = *image.shape() else { unreachable!() };
    let src = image.data();
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let Some(sy) = (y + oy).checked_sub(PAD).filter(|&sy| sy < h) else { continue };
            for x in 0..w {
                if let Some(sx) = (x + ox).checked_sub(PAD).filter(|&sx| sx < w) {
                    data[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    Tensor::new(image.shape(), data).expect("same shape")
}

fn shift(r: Region, oy: usize, ox: usize, h: usize, w: usize) -> Option<Region> {
    let top = (r.top + PAD) as isize - oy as isize;
    let left = (r.left + PAD) as isize - ox as isize;
    let t = top.max(0);
    let l = left.max(0);
    let b = (top + r.height as isize).min(h as isize);
    let rr = (left + r.width as isize).min(w as isize);
    (b > t && rr > l).then(|| Region { top: t as usize, left: l as usize, height: (b - t) as usize, width: (rr - l) as usize })
}
