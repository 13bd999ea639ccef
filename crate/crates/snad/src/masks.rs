//! Label maps and the binary masks derived from them.
//!
//! A [`LabelMap`] assigns every pixel one of four classes. From it we build
//! the foreground/background pair that drives separable normalization and the
//! four one-hot region masks used by the reconstruction loss. Foreground is
//! everything that is not background: facial, hair and skin are all face
//! attributes. Resampling is nearest-neighbor so masks stay binary and the
//! partition properties survive any chain of downsamplings.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel class vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionClass {
    Back,
    Skin,
    Hair,
    Facial,
}

impl RegionClass {
    pub const ALL: [RegionClass; 4] = [
        RegionClass::Back,
        RegionClass::Skin,
        RegionClass::Hair,
        RegionClass::Facial,
    ];

    /// Grayscale code used in label-map files; spaced for visual inspection.
    pub fn code(self) -> u8 {
        match self {
            RegionClass::Back => 0,
            RegionClass::Skin => 85,
            RegionClass::Hair => 170,
            RegionClass::Facial => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(RegionClass::Back),
            85 => Some(RegionClass::Skin),
            170 => Some(RegionClass::Hair),
            255 => Some(RegionClass::Facial),
            _ => None,
        }
    }

    /// Channel index in one-hot encodings, matching `ALL` order.
    pub fn channel(self) -> usize {
        match self {
            RegionClass::Back => 0,
            RegionClass::Skin => 1,
            RegionClass::Hair => 2,
            RegionClass::Facial => 3,
        }
    }
}

/// Per-pixel class map at image resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    classes: Vec<RegionClass>,
}

impl LabelMap {
    pub fn from_classes(width: usize, height: usize, classes: Vec<RegionClass>) -> Result<Self> {
        if classes.len() != width * height {
            return Err(Error::shape(
                "label map size",
                (width * height).to_string(),
                classes.len().to_string(),
            ));
        }
        Ok(LabelMap {
            width,
            height,
            classes,
        })
    }

    pub fn filled(width: usize, height: usize, class: RegionClass) -> Self {
        LabelMap {
            width,
            height,
            classes: vec![class; width * height],
        }
    }

    #[inline]
    pub fn class_at(&self, x: usize, y: usize) -> RegionClass {
        self.classes[y * self.width + x]
    }

    #[inline]
    pub fn set_class(&mut self, x: usize, y: usize, class: RegionClass) {
        self.classes[y * self.width + x] = class;
    }

    pub fn count(&self, class: RegionClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// Nearest-neighbor downsampling: output pixel `(x, y)` takes the source
    /// class at `(floor(x*W/w'), floor(y*H/h'))`, i.e. each block's top-left
    /// sample for integer factors.
    pub fn downsample(&self, target_h: usize, target_w: usize) -> Result<LabelMap> {
        if target_h > self.height || target_w > self.width || target_h == 0 || target_w == 0 {
            return Err(Error::InvalidArgument {
                what: "label downsample target",
                detail: format!(
                    "{target_h}x{target_w} must be within source {}x{}",
                    self.height, self.width
                ),
            });
        }
        let mut classes = Vec::with_capacity(target_h * target_w);
        for y in 0..target_h {
            for x in 0..target_w {
                let sy = y * self.height / target_h;
                let sx = x * self.width / target_w;
                classes.push(self.class_at(sx, sy));
            }
        }
        LabelMap::from_classes(target_w, target_h, classes)
    }

    /// One-hot encoding over the 4 classes: `(1, 4, H, W)`.
    pub fn one_hot(&self) -> Tensor {
        Tensor::from_fn([1, 4, self.height, self.width], |_, c, h, w| {
            if self.class_at(w, h).channel() == c {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// A binary `H x W` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// Nearest-neighbor downsampling with the same sampling grid as
    /// [`LabelMap::downsample`]; output stays binary.
    pub fn downsample(&self, target_h: usize, target_w: usize) -> Result<Mask> {
        if target_h > self.height || target_w > self.width || target_h == 0 || target_w == 0 {
            return Err(Error::InvalidArgument {
                what: "mask downsample target",
                detail: format!(
                    "{target_h}x{target_w} must be within source {}x{}",
                    self.height, self.width
                ),
            });
        }
        let mut out = Mask::zeros(target_w, target_h);
        for y in 0..target_h {
            for x in 0..target_w {
                let sy = y * self.height / target_h;
                let sx = x * self.width / target_w;
                out.set(x, y, self.get(sx, sy));
            }
        }
        Ok(out)
    }

    /// `(1, 1, H, W)` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn([1, 1, self.height, self.width], |_, _, h, w| {
            if self.get(w, h) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// All mask structures derived from one label map, at one resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    /// Foreground (facial | hair | skin).
    pub foreground: Mask,
    /// Background (the `back` class).
    pub background: Mask,
    /// One-hot region masks for the reconstruction loss.
    pub facial: Mask,
    pub back: Mask,
    pub hair: Mask,
    pub skin: Mask,
    pub height: usize,
    pub width: usize,
}

/// Splits a label map into foreground/background plus the four one-hot
/// region masks. Total on valid input; re-derivation from the same map is
/// idempotent.
pub fn split_foreground(map: &LabelMap) -> RegionMasks {
    let (w, h) = (map.width, map.height);
    let mut fg = Mask::zeros(w, h);
    let mut bg = Mask::zeros(w, h);
    let mut facial = Mask::zeros(w, h);
    let mut back = Mask::zeros(w, h);
    let mut hair = Mask::zeros(w, h);
    let mut skin = Mask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let class = map.class_at(x, y);
            let is_back = class == RegionClass::Back;
            bg.set(x, y, is_back);
            fg.set(x, y, !is_back);
            match class {
                RegionClass::Back => back.set(x, y, true),
                RegionClass::Skin => skin.set(x, y, true),
                RegionClass::Hair => hair.set(x, y, true),
                RegionClass::Facial => facial.set(x, y, true),
            }
        }
    }
    RegionMasks {
        foreground: fg,
        background: bg,
        facial,
        back,
        hair,
        skin,
        height: h,
        width: w,
    }
}

impl RegionMasks {
    /// Downsamples every mask with the shared sampling grid, preserving the
    /// partition invariants.
    pub fn downsample(&self, target_h: usize, target_w: usize) -> Result<RegionMasks> {
        Ok(RegionMasks {
            foreground: self.foreground.downsample(target_h, target_w)?,
            background: self.background.downsample(target_h, target_w)?,
            facial: self.facial.downsample(target_h, target_w)?,
            back: self.back.downsample(target_h, target_w)?,
            hair: self.hair.downsample(target_h, target_w)?,
            skin: self.skin.downsample(target_h, target_w)?,
            height: target_h,
            width: target_w,
        })
    }

    pub fn region(&self, class: RegionClass) -> &Mask {
        match class {
            RegionClass::Back => &self.back,
            RegionClass::Skin => &self.skin,
            RegionClass::Hair => &self.hair,
            RegionClass::Facial => &self.facial,
        }
    }
}

/// Per-sample masks and one-hot labels at every resolution a network needs.
///
/// Built once per batch; keys are spatial sizes (square features).
#[derive(Clone, Debug)]
pub struct MaskPyramid {
    levels: Vec<(usize, BatchMasks)>,
}

/// Batched mask tensors at one resolution: `(B, 1, S, S)` foreground and
/// background maps, per-region maps, and `(B, 4, S, S)` one-hot labels.
#[derive(Clone, Debug)]
pub struct BatchMasks {
    pub foreground: Tensor,
    pub background: Tensor,
    pub one_hot: Tensor,
    pub regions: [Tensor; 4],
}

impl BatchMasks {
    /// Stacks per-sample masks at one resolution.
    pub fn from_masks(masks: &[RegionMasks], labels: &[LabelMap]) -> Result<Self> {
        if masks.is_empty() || masks.len() != labels.len() {
            return Err(Error::InvalidArgument {
                what: "batch masks",
                detail: "need equal, nonzero mask and label counts".into(),
            });
        }
        let (h, w) = (masks[0].height, masks[0].width);
        let b = masks.len();
        let stack = |pick: &dyn Fn(&RegionMasks) -> &Mask| -> Tensor {
            Tensor::from_fn([b, 1, h, w], |bi, _, hi, wi| {
                if pick(&masks[bi]).get(wi, hi) {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let one_hot = Tensor::from_fn([b, 4, h, w], |bi, c, hi, wi| {
            if labels[bi].class_at(wi, hi).channel() == c {
                1.0
            } else {
                0.0
            }
        });
        Ok(BatchMasks {
            foreground: stack(&|m| &m.foreground),
            background: stack(&|m| &m.background),
            one_hot,
            regions: [
                stack(&|m| &m.back),
                stack(&|m| &m.skin),
                stack(&|m| &m.hair),
                stack(&|m| &m.facial),
            ],
        })
    }

    pub fn region(&self, class: RegionClass) -> &Tensor {
        &self.regions[class.channel()]
    }
}

impl MaskPyramid {
    /// Builds batched masks at each requested square size from full-resolution
    /// label maps.
    pub fn build(labels: &[LabelMap], sizes: &[usize]) -> Result<Self> {
        let full: Vec<RegionMasks> = labels.iter().map(split_foreground).collect();
        let mut levels = Vec::new();
        for &s in sizes {
            let masks: Vec<RegionMasks> = full
                .iter()
                .map(|m| m.downsample(s, s))
                .collect::<Result<_>>()?;
            let lowres: Vec<LabelMap> = labels
                .iter()
                .map(|l| l.downsample(s, s))
                .collect::<Result<_>>()?;
            levels.push((s, BatchMasks::from_masks(&masks, &lowres)?));
        }
        Ok(MaskPyramid { levels })
    }

    /// Masks at a given spatial size; errors name the missing scale.
    pub fn at(&self, size: usize) -> Result<&BatchMasks> {
        self.levels
            .iter()
            .find(|(s, _)| *s == size)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::InvalidArgument {
                what: "mask pyramid scale",
                detail: format!("no masks were precomputed at {size}x{size}"),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(n: usize) -> LabelMap {
        let mut map = LabelMap::filled(n, n, RegionClass::Back);
        for y in 0..n {
            for x in 0..n {
                if (x + y) % 2 == 0 {
                    map.set_class(x, y, RegionClass::Facial);
                }
            }
        }
        map
    }

    #[test]
    fn all_back_gives_empty_foreground() {
        let map = LabelMap::filled(4, 4, RegionClass::Back);
        let m = split_foreground(&map);
        assert_eq!(m.foreground.count(), 0);
        assert_eq!(m.background.count(), 16);
    }

    #[test]
    fn masks_partition_exactly() {
        let map = checkerboard(8);
        let m = split_foreground(&map);
        for y in 0..8 {
            for x in 0..8 {
                assert!(m.foreground.get(x, y) != m.background.get(x, y));
                let one_hot: usize = [&m.facial, &m.back, &m.hair, &m.skin]
                    .iter()
                    .filter(|r| r.get(x, y))
                    .count();
                assert_eq!(one_hot, 1);
                // Foreground is the union of the non-back regions.
                let union = m.facial.get(x, y) || m.hair.get(x, y) || m.skin.get(x, y);
                assert_eq!(m.foreground.get(x, y), union);
            }
        }
    }

    #[test]
    fn region_counts_cover_all_pixels() {
        let map = checkerboard(6);
        let m = split_foreground(&map);
        let total = m.facial.count() + m.back.count() + m.hair.count() + m.skin.count();
        assert_eq!(total, 36);
    }

    #[test]
    fn downsample_takes_top_left_of_each_block() {
        let mut mask = Mask::zeros(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                mask.set(x, y, x % 2 == 0 && y % 2 == 0);
            }
        }
        let down = mask.downsample(16, 16).unwrap();
        assert_eq!(down.count(), 256); // every sampled position was a top-left
    }

    #[test]
    fn downsample_all_ones_stays_all_ones() {
        let mut mask = Mask::zeros(12, 12);
        for y in 0..12 {
            for x in 0..12 {
                mask.set(x, y, true);
            }
        }
        for s in [6, 4, 3, 1] {
            assert_eq!(mask.downsample(s, s).unwrap().count(), s * s);
        }
    }

    #[test]
    fn partition_survives_downsample_chains() {
        let map = checkerboard(16);
        let mut m = split_foreground(&map);
        for s in [8, 4, 2] {
            m = m.downsample(s, s).unwrap();
            for y in 0..s {
                for x in 0..s {
                    assert!(m.foreground.get(x, y) != m.background.get(x, y));
                    let one_hot: usize = [&m.facial, &m.back, &m.hair, &m.skin]
                        .iter()
                        .filter(|r| r.get(x, y))
                        .count();
                    assert_eq!(one_hot, 1);
                }
            }
        }
    }

    #[test]
    fn upsample_rejected() {
        let mask = Mask::zeros(4, 4);
        assert!(mask.downsample(8, 8).is_err());
    }

    #[test]
    fn split_is_idempotent() {
        let map = checkerboard(8);
        assert_eq!(split_foreground(&map), split_foreground(&map));
    }

    #[test]
    fn pyramid_reports_missing_scale() {
        let labels = vec![checkerboard(16)];
        let pyr = MaskPyramid::build(&labels, &[16, 8]).unwrap();
        assert!(pyr.at(8).is_ok());
        let err = pyr.at(4).unwrap_err();
        assert!(err.to_string().contains("4x4"), "{err}");
    }
}
