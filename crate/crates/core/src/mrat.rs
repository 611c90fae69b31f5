//! Multi-resolution asymmetric translation: CutMix / ClassMix masks and the
//! composition of intermediate images and their synthetic labels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::QuadBatch;
use crate::error::{IdaError, Result};
use crate::plane::{LabelPlane, Plane};
use crate::scalar::Scalar;

/// Vessel class index.
pub const FOREGROUND: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    CutMix,
    ClassMix,
}

/// Which quad member supplies the pasted pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchSource {
    Sp,
    Tp,
}

/// Placement of the `size x size` CutMix square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBox {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixMask {
    pub plane: Plane<u8>,
    pub kind: MaskKind,
    pub patch_box: PatchBox,
    pub source_of_ones: PatchSource,
}

impl MixMask {
    pub fn ones(&self) -> usize {
        self.plane.count_class(1)
    }

    /// `1 - mask` as a plane.
    pub fn complement(&self) -> Plane<u8> {
        self.plane.map(|v| 1 - v)
    }
}

/// A mask with exactly `m * m` ones forming one square placed uniformly
/// inside a `width x height` plane. Requires `0 < m < min(width, height)`.
pub fn make_cutmix_mask<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    m: usize,
    source_of_ones: PatchSource,
    rng: &mut R,
) -> Result<MixMask> {
    if m == 0 || m >= width.min(height) {
        return Err(IdaError::InvalidArgument(format!(
            "mini-patch size {m} must satisfy 0 < m < min({width}, {height})"
        )));
    }
    let x0 = rng.gen_range(0..=width - m);
    let y0 = rng.gen_range(0..=height - m);
    let plane = Plane::from_fn(width, height, |x, y| {
        (x >= x0 && x < x0 + m && y >= y0 && y < y0 + m) as u8
    });
    Ok(MixMask {
        plane,
        kind: MaskKind::CutMix,
        patch_box: PatchBox { x0, y0, size: m },
        source_of_ones,
    })
}

/// Restricts a CutMix square to the foreground of `labels` (the labels of
/// the image whose pixels get pasted).
pub fn make_classmix_mask(m_r: &MixMask, labels: &LabelPlane) -> Result<MixMask> {
    if m_r.kind != MaskKind::CutMix {
        return Err(IdaError::InvalidArgument(
            "ClassMix masks derive from a CutMix mask".into(),
        ));
    }
    m_r.plane.check_dims(labels, "ClassMix labels")?;
    let data = m_r
        .plane
        .as_slice()
        .iter()
        .zip(labels.as_slice())
        .map(|(&m, &y)| m * (y == FOREGROUND) as u8)
        .collect();
    Ok(MixMask {
        plane: Plane::from_vec(labels.width(), labels.height(), data)?,
        kind: MaskKind::ClassMix,
        patch_box: m_r.patch_box,
        source_of_ones: m_r.source_of_ones,
    })
}

fn select<T: Copy>(base: &Plane<T>, patch: &Plane<T>, mask: &MixMask) -> Result<Plane<T>> {
    base.check_dims(patch, "patch")?;
    base.check_dims(&mask.plane, "mask")?;
    let data = base
        .as_slice()
        .iter()
        .zip(patch.as_slice())
        .zip(mask.plane.as_slice())
        .map(|((&b, &p), &m)| if m == 1 { p } else { b })
        .collect();
    Plane::from_vec(base.width(), base.height(), data)
}

/// `patch * mask + base * (1 - mask)`, exact per pixel.
pub fn compose_image<T: Scalar>(base: &Plane<T>, patch: &Plane<T>, mask: &MixMask) -> Result<Plane<T>> {
    select(base, patch, mask)
}

/// Label analogue of [`compose_image`].
pub fn compose_label(base: &LabelPlane, patch: &LabelPlane, mask: &MixMask) -> Result<LabelPlane> {
    select(base, patch, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Target patch pasted onto the resized source image.
    T2s,
    /// Source patch pasted onto the resized target image.
    S2t,
}

/// Translation strategy: which direction(s) and which mask type per direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationStrategy {
    S2tCut,
    T2sCut,
    S2tClass,
    T2sClass,
    BiCut,
    BiClass,
    /// Source-to-target CutMix with target-to-source ClassMix.
    BatCutClass,
    /// Source-to-target ClassMix with target-to-source CutMix.
    #[default]
    BatClassCut,
}

impl TranslationStrategy {
    pub const ALL: [TranslationStrategy; 8] = [
        TranslationStrategy::S2tCut,
        TranslationStrategy::T2sCut,
        TranslationStrategy::S2tClass,
        TranslationStrategy::T2sClass,
        TranslationStrategy::BiCut,
        TranslationStrategy::BiClass,
        TranslationStrategy::BatCutClass,
        TranslationStrategy::BatClassCut,
    ];

    /// The two `(direction, mask kind)` streams the strategy produces.
    pub fn streams(self) -> [(Direction, MaskKind); 2] {
        use Direction::*;
        use MaskKind::*;
        match self {
            TranslationStrategy::S2tCut => [(S2t, CutMix), (S2t, CutMix)],
            TranslationStrategy::T2sCut => [(T2s, CutMix), (T2s, CutMix)],
            TranslationStrategy::S2tClass => [(S2t, ClassMix), (S2t, ClassMix)],
            TranslationStrategy::T2sClass => [(T2s, ClassMix), (T2s, ClassMix)],
            TranslationStrategy::BiCut => [(T2s, CutMix), (S2t, CutMix)],
            TranslationStrategy::BiClass => [(T2s, ClassMix), (S2t, ClassMix)],
            TranslationStrategy::BatCutClass => [(T2s, ClassMix), (S2t, CutMix)],
            TranslationStrategy::BatClassCut => [(T2s, CutMix), (S2t, ClassMix)],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TranslationStrategy::S2tCut => "s2t_cut",
            TranslationStrategy::T2sCut => "t2s_cut",
            TranslationStrategy::S2tClass => "s2t_class",
            TranslationStrategy::T2sClass => "t2s_class",
            TranslationStrategy::BiCut => "bi_cut",
            TranslationStrategy::BiClass => "bi_class",
            TranslationStrategy::BatCutClass => "bat_cut_class",
            TranslationStrategy::BatClassCut => "bat_class_cut",
        }
    }
}

impl fmt::Display for TranslationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TranslationStrategy {
    type Err = IdaError;

    fn from_str(s: &str) -> Result<Self> {
        TranslationStrategy::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| IdaError::Config(format!("unknown translation strategy {s:?}")))
    }
}

/// One intermediate image with its synthetic label and composition mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Intermediate<T> {
    pub direction: Direction,
    pub image: Plane<T>,
    pub label: LabelPlane,
    pub mask: MixMask,
}

impl<T> Intermediate<T> {
    /// Pixels whose label comes from source ground truth.
    pub fn supervised_region(&self) -> Plane<u8> {
        match self.direction {
            Direction::T2s => self.mask.complement(),
            Direction::S2t => self.mask.plane.clone(),
        }
    }

    /// Pixels whose content comes from the target image.
    pub fn consistency_region(&self) -> Plane<u8> {
        match self.direction {
            Direction::T2s => self.mask.plane.clone(),
            Direction::S2t => self.mask.complement(),
        }
    }
}

/// The two intermediate images of one quad, plus the square that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediatePair<T> {
    pub streams: [Intermediate<T>; 2],
    pub cutmix: MixMask,
}

impl<T> IntermediatePair<T> {
    pub fn by_direction(&self, d: Direction) -> Option<&Intermediate<T>> {
        self.streams.iter().find(|s| s.direction == d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MratOptions {
    pub m: usize,
    pub strategy: TranslationStrategy,
    /// Draw a fresh square for the second stream instead of sharing one.
    pub independent_squares: bool,
}

fn build_stream<T: Scalar>(
    q: &QuadBatch<T>,
    pseudo_tr: &LabelPlane,
    pseudo_tp: &LabelPlane,
    direction: Direction,
    kind: MaskKind,
    square: &MixMask,
) -> Result<Intermediate<T>> {
    let mut cut = square.clone();
    let (base, patch, base_label, patch_label) = match direction {
        Direction::T2s => {
            cut.source_of_ones = PatchSource::Tp;
            (q.sr.plane(), q.tp.plane(), q.y_sr(), pseudo_tp)
        }
        Direction::S2t => {
            cut.source_of_ones = PatchSource::Sp;
            (q.tr.plane(), q.sp.plane(), pseudo_tr, q.y_sp())
        }
    };
    let mask = match kind {
        MaskKind::CutMix => cut,
        MaskKind::ClassMix => make_classmix_mask(&cut, patch_label)?,
    };
    Ok(Intermediate {
        direction,
        image: compose_image(base, patch, &mask)?,
        label: compose_label(base_label, patch_label, &mask)?,
        mask,
    })
}

/// Builds both intermediate images of a quad.
///
/// `pseudo_tr` / `pseudo_tp` are teacher argmax labels of `q.tr` / `q.tp`.
/// With the default strategy this yields
/// `x_t2s = tp*M_R + sr*(1-M_R)`, `y_t2s = ŷ_tp*M_R + y_sr*(1-M_R)`,
/// `x_s2t = sp*M_C + tr*(1-M_C)`, `y_s2t = y_sp*M_C + ŷ_tr*(1-M_C)` where
/// `M_C = M_R * [y_sp = 1]`.
pub fn make_intermediate_batch<T: Scalar, R: Rng + ?Sized>(
    q: &QuadBatch<T>,
    pseudo_tr: &LabelPlane,
    pseudo_tp: &LabelPlane,
    opts: &MratOptions,
    rng: &mut R,
) -> Result<IntermediatePair<T>> {
    let (w, h) = q.sr.dims();
    for (name, dims) in [
        ("sp", q.sp.dims()),
        ("tr", q.tr.dims()),
        ("tp", q.tp.dims()),
        ("pseudo_tr", pseudo_tr.dims()),
        ("pseudo_tp", pseudo_tp.dims()),
    ] {
        if dims != (w, h) {
            return Err(IdaError::shape(format!("{name} {w}x{h}"), format!("{}x{}", dims.0, dims.1)));
        }
    }
    let [first, second] = opts.strategy.streams();
    let square = make_cutmix_mask(w, h, opts.m, PatchSource::Sp, rng)?;
    // Unidirectional strategies need two distinct draws of the same direction.
    let second_square = if opts.independent_squares || first.0 == second.0 {
        make_cutmix_mask(w, h, opts.m, PatchSource::Sp, rng)?
    } else {
        square.clone()
    };
    let a = build_stream(q, pseudo_tr, pseudo_tp, first.0, first.1, &square)?;
    let b = build_stream(q, pseudo_tr, pseudo_tp, second.0, second.1, &second_square)?;
    Ok(IntermediatePair {
        streams: [a, b],
        cutmix: square,
    })
}

/// Source-only multi-resolution CutMix used by Self-Cut pre-training:
/// `sp * M_R + sr * (1 - M_R)` with the matching label composition.
pub fn self_cut<T: Scalar, R: Rng + ?Sized>(
    sr: &Plane<T>,
    y_sr: &LabelPlane,
    sp: &Plane<T>,
    y_sp: &LabelPlane,
    m: usize,
    rng: &mut R,
) -> Result<(Plane<T>, LabelPlane, MixMask)> {
    let mask = make_cutmix_mask(sr.width(), sr.height(), m, PatchSource::Sp, rng)?;
    Ok((
        compose_image(sr, sp, &mask)?,
        compose_label(y_sr, y_sp, &mask)?,
        mask,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, ImageSample};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn cutmix_counts() {
        let m = make_cutmix_mask(384, 384, 128, PatchSource::Tp, &mut rng(0)).unwrap();
        assert_eq!(m.ones(), 16384);
        let one = make_cutmix_mask(10, 12, 1, PatchSource::Tp, &mut rng(1)).unwrap();
        assert_eq!(one.ones(), 1);
        let mut r = rng(2);
        let total: usize = (0..1000)
            .map(|_| make_cutmix_mask(40, 30, 7, PatchSource::Sp, &mut r).unwrap().ones())
            .sum();
        assert_eq!(total, 1000 * 49);
    }

    #[test]
    fn cutmix_rejects_bad_sizes() {
        assert!(make_cutmix_mask(16, 16, 0, PatchSource::Sp, &mut rng(0)).is_err());
        assert!(make_cutmix_mask(16, 20, 16, PatchSource::Sp, &mut rng(0)).is_err());
    }

    #[test]
    fn cutmix_square_is_contiguous() {
        let mut r = rng(3);
        for _ in 0..50 {
            let m = make_cutmix_mask(20, 15, 6, PatchSource::Sp, &mut r).unwrap();
            let b = m.patch_box;
            assert!(b.x0 + 6 <= 20 && b.y0 + 6 <= 15);
            for y in 0..15 {
                for x in 0..20 {
                    let inside = x >= b.x0 && x < b.x0 + 6 && y >= b.y0 && y < b.y0 + 6;
                    assert_eq!(m.plane.get(x, y), inside as u8);
                }
            }
        }
    }

    #[test]
    fn classmix_edge_cases_and_counting() {
        let m_r = make_cutmix_mask(24, 24, 10, PatchSource::Sp, &mut rng(4)).unwrap();
        let bg = Plane::filled(24, 24, 0u8);
        assert_eq!(make_classmix_mask(&m_r, &bg).unwrap().ones(), 0);
        let fg = Plane::filled(24, 24, 1u8);
        assert_eq!(make_classmix_mask(&m_r, &fg).unwrap().plane, m_r.plane);

        let mut r = rng(5);
        let y = Plane::from_fn(24, 24, |_, _| r.gen_bool(0.3) as u8);
        let m_c = make_classmix_mask(&m_r, &y).unwrap();
        let b = m_r.patch_box;
        let mut want = 0;
        for yy in b.y0..b.y0 + b.size {
            for xx in b.x0..b.x0 + b.size {
                want += (y.get(xx, yy) == 1) as usize;
            }
        }
        assert_eq!(m_c.ones(), want);
        assert!(make_classmix_mask(&m_r, &Plane::filled(23, 24, 0u8)).is_err());
        assert!(make_classmix_mask(&m_c, &y).is_err());
    }

    #[test]
    fn compose_extremes() {
        let base = Plane::from_fn(8, 8, |x, y| (x + y) as f64);
        let patch = Plane::from_fn(8, 8, |x, y| (x * y) as f64 + 100.0);
        let zeros = MixMask {
            plane: Plane::filled(8, 8, 0),
            kind: MaskKind::CutMix,
            patch_box: PatchBox { x0: 0, y0: 0, size: 0 },
            source_of_ones: PatchSource::Sp,
        };
        let ones = MixMask {
            plane: Plane::filled(8, 8, 1),
            ..zeros.clone()
        };
        assert_eq!(compose_image(&base, &patch, &zeros).unwrap(), base);
        assert_eq!(compose_image(&base, &patch, &ones).unwrap(), patch);
        let lb = Plane::filled(8, 8, 0u8);
        let lp = Plane::filled(8, 8, 1u8);
        assert_eq!(compose_label(&lb, &lp, &zeros).unwrap(), lb);
        assert_eq!(compose_label(&lb, &lp, &ones).unwrap(), lp);
        assert!(compose_image(&base, &Plane::filled(7, 8, 0.0), &zeros).is_err());
    }

    #[test]
    fn compose_label_counts_for_disjoint_foregrounds() {
        let base = Plane::from_fn(20, 20, |x, _| (x < 5) as u8);
        let patch = Plane::from_fn(20, 20, |x, _| (x >= 15) as u8);
        let mask = make_cutmix_mask(20, 20, 9, PatchSource::Sp, &mut rng(6)).unwrap();
        let out = compose_label(&base, &patch, &mask).unwrap();
        let mut want = 0;
        for y in 0..20 {
            for x in 0..20 {
                want += if mask.plane.get(x, y) == 1 { patch.get(x, y) } else { base.get(x, y) } as usize;
            }
        }
        assert_eq!(out.count_class(1), want);
    }

    fn quad(w: usize, seed: u64) -> QuadBatch<f64> {
        let mut r = rng(seed);
        let mut img = |domain, labeled: bool, id: &str| {
            let px = Plane::from_fn(w, w, |_, _| r.gen_range(0.0..1.0));
            let lb = labeled.then(|| Plane::from_fn(w, w, |_, _| r.gen_bool(0.25) as u8));
            ImageSample::gray(id, domain, px, lb).unwrap()
        };
        QuadBatch {
            sr: img(Domain::Source, true, "sr"),
            sp: img(Domain::Source, true, "sp"),
            tr: img(Domain::Target, false, "tr"),
            tp: img(Domain::Target, false, "tp"),
        }
    }

    #[test]
    fn default_strategy_builds_both_streams() {
        let q = quad(32, 7);
        let mut r = rng(8);
        let p_tr = Plane::from_fn(32, 32, |_, _| r.gen_bool(0.2) as u8);
        let p_tp = Plane::from_fn(32, 32, |_, _| r.gen_bool(0.2) as u8);
        let opts = MratOptions { m: 12, strategy: TranslationStrategy::default(), independent_squares: false };
        let pair = make_intermediate_batch(&q, &p_tr, &p_tp, &opts, &mut rng(9)).unwrap();
        let m_r = &pair.cutmix;
        let m_c = make_classmix_mask(m_r, q.y_sp()).unwrap();
        let t2s = pair.by_direction(Direction::T2s).unwrap();
        let s2t = pair.by_direction(Direction::S2t).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let r_on = m_r.plane.get(x, y) == 1;
                let c_on = m_c.plane.get(x, y) == 1;
                let want = if r_on { q.tp.plane().get(x, y) } else { q.sr.plane().get(x, y) };
                assert_eq!(t2s.image.get(x, y).to_bits(), want.to_bits());
                let want = if r_on { p_tp.get(x, y) } else { q.y_sr().get(x, y) };
                assert_eq!(t2s.label.get(x, y), want);
                let want = if c_on { q.sp.plane().get(x, y) } else { q.tr.plane().get(x, y) };
                assert_eq!(s2t.image.get(x, y).to_bits(), want.to_bits());
                let want = if c_on { q.y_sp().get(x, y) } else { p_tr.get(x, y) };
                assert_eq!(s2t.label.get(x, y), want);
            }
        }
        assert_eq!(t2s.mask.plane, m_r.plane);
        assert_eq!(s2t.mask.plane, m_c.plane);
    }

    #[test]
    fn bi_cut_uses_the_same_square_in_both_directions() {
        let q = quad(24, 10);
        let p = Plane::filled(24, 24, 0u8);
        let opts = MratOptions { m: 8, strategy: TranslationStrategy::BiCut, independent_squares: false };
        let pair = make_intermediate_batch(&q, &p, &p, &opts, &mut rng(11)).unwrap();
        for s in &pair.streams {
            assert_eq!(s.mask.plane, pair.cutmix.plane);
            assert_eq!(s.mask.kind, MaskKind::CutMix);
        }
        let s2t = pair.by_direction(Direction::S2t).unwrap();
        assert_eq!(s2t.image, compose_image(q.tr.plane(), q.sp.plane(), &pair.cutmix).unwrap());
    }

    #[test]
    fn every_strategy_builds_and_round_trips_its_name() {
        let q = quad(16, 12);
        let p = Plane::filled(16, 16, 1u8);
        for strategy in TranslationStrategy::ALL {
            assert_eq!(strategy.as_str().parse::<TranslationStrategy>().unwrap(), strategy);
            let opts = MratOptions { m: 5, strategy, independent_squares: false };
            let pair = make_intermediate_batch(&q, &p, &p, &opts, &mut rng(13)).unwrap();
            let want = strategy.streams();
            for (s, (d, k)) in pair.streams.iter().zip(want) {
                assert_eq!((s.direction, s.mask.kind), (d, k));
            }
        }
        assert!("bogus".parse::<TranslationStrategy>().is_err());
    }

    #[test]
    fn large_patch_makes_t2s_mostly_target() {
        let q = quad(32, 14);
        let p = Plane::filled(32, 32, 0u8);
        let opts = MratOptions { m: 31, strategy: TranslationStrategy::default(), independent_squares: false };
        let pair = make_intermediate_batch(&q, &p, &p, &opts, &mut rng(15)).unwrap();
        let t2s = pair.by_direction(Direction::T2s).unwrap();
        let from_target = t2s
            .image
            .as_slice()
            .iter()
            .zip(q.tp.plane().as_slice())
            .filter(|(a, b)| a.to_bits() == b.to_bits())
            .count();
        assert!(from_target as f64 / 1024.0 > 0.9);
    }

    proptest! {
        #[test]
        fn mask_algebra_and_partition(seed in 0u64..500, m in 1usize..15) {
            let q = quad(16, seed);
            let mut r = rng(seed + 1);
            let p_tr = Plane::from_fn(16, 16, |_, _| r.gen_bool(0.3) as u8);
            let p_tp = Plane::from_fn(16, 16, |_, _| r.gen_bool(0.3) as u8);
            let opts = MratOptions { m, strategy: TranslationStrategy::default(), independent_squares: false };
            let pair = make_intermediate_batch(&q, &p_tr, &p_tp, &opts, &mut r).unwrap();
            let s2t = pair.by_direction(Direction::S2t).unwrap();
            let t2s = pair.by_direction(Direction::T2s).unwrap();
            for i in 0..256 {
                let mc = s2t.mask.plane.as_slice()[i];
                let mr = pair.cutmix.plane.as_slice()[i];
                prop_assert_eq!(mc * mr, mc);
                if mc == 0 {
                    prop_assert_eq!(s2t.label.as_slice()[i], p_tr.as_slice()[i]);
                }
                if mr == 1 {
                    prop_assert_eq!(t2s.image.as_slice()[i].to_bits(), q.tp.plane().as_slice()[i].to_bits());
                }
                for s in &pair.streams {
                    prop_assert_eq!(s.supervised_region().as_slice()[i] + s.consistency_region().as_slice()[i], 1);
                }
            }
            // idempotent when base == patch
            let same = compose_image(q.sr.plane(), q.sr.plane(), &pair.cutmix).unwrap();
            prop_assert_eq!(&same, q.sr.plane());
        }
    }
}
