//! Pixel and topology metrics for binary vessel masks.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{IdaError, Result};
use crate::plane::{LabelPlane, Plane};
use crate::scalar::Scalar;
use crate::segnet::ops::Tensor;
use crate::segnet::{ModelState, WNet};

/// Probabilities strictly above this are foreground.
pub const THRESHOLD: f64 = 0.5;
/// Tile edge for the patch-wise Betti error.
pub const BETTI_PATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    /// `2tp / (2tp + fp + fn)`, 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

pub fn binarize<T: Scalar>(probs: &Plane<T>) -> LabelPlane {
    probs.map(|p| (p.as_f64() > THRESHOLD) as u8)
}

pub fn confusion(pred: &LabelPlane, gt: &LabelPlane) -> Result<ConfusionCounts> {
    pred.check_dims(gt, "ground truth")?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn dice(pred: &LabelPlane, gt: &LabelPlane) -> Result<f64> {
    Ok(confusion(pred, gt)?.dice())
}

/// Rank-based AUC with midranks for ties. `None` when `gt` has one class.
pub fn auc<T: Scalar>(scores: &Plane<T>, gt: &LabelPlane) -> Result<Option<f64>> {
    scores.check_dims(gt, "ground truth")?;
    let mut pairs: Vec<(f64, bool)> = scores
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .map(|(s, &g)| (s.as_f64(), g != 0))
        .collect();
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    if pairs.iter().any(|p| p.0.is_nan()) {
        return Err(IdaError::Numeric("NaN score in AUC".into()));
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j + 1 < pairs.len() && pairs[j + 1].0 == pairs[i].0 {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * pairs[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn)))
}

/// Zhang-Suen thinning to a one-pixel-wide skeleton.
pub fn skeletonize(mask: &LabelPlane) -> LabelPlane {
    let (w, h) = mask.dims();
    let mut img: Vec<u8> = mask.as_slice().iter().map(|&v| (v != 0) as u8).collect();
    let at = |img: &[u8], x: isize, y: isize| -> u8 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            img[y as usize * w + x as usize]
        }
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if at(&img, x, y) == 0 {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let n = [
                        at(&img, x, y - 1),
                        at(&img, x + 1, y - 1),
                        at(&img, x + 1, y),
                        at(&img, x + 1, y + 1),
                        at(&img, x, y + 1),
                        at(&img, x - 1, y + 1),
                        at(&img, x - 1, y),
                        at(&img, x - 1, y - 1),
                    ];
                    let b: u8 = n.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| n[i] == 0 && n[(i + 1) % 8] == 1).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let ok = if pass == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if ok {
                        remove.push(y as usize * w + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                img[i] = 0;
            }
        }
        if !changed {
            break;
        }
    }
    Plane::from_vec(w, h, img).expect("dims")
}

fn containment(skel: &LabelPlane, mask: &LabelPlane) -> Option<f64> {
    let n = skel.as_slice().iter().filter(|&&v| v != 0).count();
    if n == 0 {
        return None;
    }
    let hit = skel
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .filter(|(&s, &m)| s != 0 && m != 0)
        .count();
    Some(hit as f64 / n as f64)
}

/// Centerline Dice. A term whose skeleton is empty counts 1 when the other
/// skeleton is also empty and 0 otherwise.
pub fn cl_dice(pred: &LabelPlane, gt: &LabelPlane) -> Result<f64> {
    pred.check_dims(gt, "ground truth")?;
    let sp = skeletonize(pred);
    let sg = skeletonize(gt);
    let (tprec, tsens) = match (containment(&sp, gt), containment(&sg, pred)) {
        (None, None) => return Ok(1.0),
        (Some(a), Some(b)) => (a, b),
        _ => return Ok(0.0),
    };
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

/// Number of connected components of cells where `fg(x, y)` holds.
fn count_components(w: usize, h: usize, fg: impl Fn(usize, usize) -> bool, eight: bool) -> usize {
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut count = 0;
    let n4: &[(isize, isize)] = &[(1, 0), (-1, 0), (0, 1), (0, -1)];
    let n8: &[(isize, isize)] = &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
    let nbrs = if eight { n8 } else { n4 };
    for start in 0..w * h {
        if seen[start] || !fg(start % w, start / w) {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for &(dx, dy) in nbrs {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !seen[j] && fg(nx as usize, ny as usize) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    count
}

/// (components, holes): 8-connected foreground components and bounded
/// 4-connected background components.
pub fn betti_numbers(mask: &LabelPlane) -> (usize, usize) {
    let (w, h) = mask.dims();
    let b0 = count_components(w, h, |x, y| mask.get(x, y) != 0, true);
    // pad with one background ring so the outside is a single component
    let bg = count_components(
        w + 2,
        h + 2,
        |x, y| x == 0 || y == 0 || x == w + 1 || y == h + 1 || mask.get(x - 1, y - 1) == 0,
        false,
    );
    (b0, bg - 1)
}

/// Euler characteristic of the union of closed foreground pixels (V - E + F).
pub fn euler_number(mask: &LabelPlane) -> i64 {
    let (w, h) = mask.dims();
    let fg = |x: isize, y: isize| x >= 0 && y >= 0 && x < w as isize && y < h as isize && mask.get(x as usize, y as usize) != 0;
    let mut v = 0i64;
    let mut e = 0i64;
    let mut f = 0i64;
    // vertex (x, y) touches pixels (x-1..x, y-1..y)
    for y in 0..=h as isize {
        for x in 0..=w as isize {
            if fg(x - 1, y - 1) || fg(x, y - 1) || fg(x - 1, y) || fg(x, y) {
                v += 1;
            }
            // horizontal edge from (x, y) to (x+1, y) touches pixels (x, y-1), (x, y)
            if x < w as isize && (fg(x, y - 1) || fg(x, y)) {
                e += 1;
            }
            // vertical edge from (x, y) to (x, y+1) touches pixels (x-1, y), (x, y)
            if y < h as isize && (fg(x - 1, y) || fg(x, y)) {
                e += 1;
            }
            if fg(x, y) {
                f += 1;
            }
        }
    }
    v - e + f
}

/// Mean over `patch x patch` tiles of `|Δβ0| + |Δβ1|`. Edge tiles may be
/// smaller than `patch`.
pub fn betti_matching_error_with(pred: &LabelPlane, gt: &LabelPlane, patch: usize) -> Result<f64> {
    pred.check_dims(gt, "ground truth")?;
    if patch == 0 {
        return Err(IdaError::InvalidArgument("patch size must be positive".into()));
    }
    let (w, h) = pred.dims();
    if w == 0 || h == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut tiles = 0usize;
    for y0 in (0..h).step_by(patch) {
        for x0 in (0..w).step_by(patch) {
            let (pw, ph) = (patch.min(w - x0), patch.min(h - y0));
            let (a0, a1) = betti_numbers(&pred.crop(x0, y0, pw, ph));
            let (b0, b1) = betti_numbers(&gt.crop(x0, y0, pw, ph));
            total += (a0.abs_diff(b0) + a1.abs_diff(b1)) as f64;
            tiles += 1;
        }
    }
    Ok(total / tiles as f64)
}

pub fn betti_matching_error(pred: &LabelPlane, gt: &LabelPlane) -> Result<f64> {
    betti_matching_error_with(pred, gt, BETTI_PATCH)
}

/// Metric names in report order.
pub const METRIC_NAMES: [&str; 7] = ["auc", "acc", "se", "sp", "dice", "cl_dice", "bm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub dice: Option<f64>,
    pub cl_dice: Option<f64>,
    pub bm: Option<f64>,
}

impl ImageMetrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "auc" => self.auc,
            "acc" => self.acc,
            "se" => self.se,
            "sp" => self.sp,
            "dice" => self.dice,
            "cl_dice" => self.cl_dice,
            "bm" => self.bm,
            _ => None,
        }
    }
}

/// All seven metrics of one probability map against its mask.
pub fn image_metrics<T: Scalar>(id: &str, fg_probs: &Plane<T>, gt: &LabelPlane) -> Result<ImageMetrics> {
    let pred = binarize(fg_probs);
    let c = confusion(&pred, gt)?;
    Ok(ImageMetrics {
        id: id.to_string(),
        auc: auc(fg_probs, gt)?,
        acc: c.accuracy(),
        se: c.sensitivity(),
        sp: c.specificity(),
        dice: Some(c.dice()),
        cl_dice: Some(cl_dice(&pred, gt)?),
        bm: Some(betti_matching_error(&pred, gt)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    pub n: usize,
}

/// Mean and population std of the present values.
pub fn mean_std(values: impl IntoIterator<Item = Option<f64>>) -> Stat {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return Stat {
            mean: None,
            std: None,
            n: 0,
        };
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Stat {
        mean: Some(mean),
        std: Some(var.sqrt()),
        n: v.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageMetrics>,
    pub summary: BTreeMap<String, Stat>,
}

impl EvalReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let summary = METRIC_NAMES
            .iter()
            .map(|&m| (m.to_string(), mean_std(per_image.iter().map(|r| r.get(m)))))
            .collect();
        EvalReport { per_image, summary }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).and_then(|s| s.mean)
    }

    /// One row per image.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id");
        for m in METRIC_NAMES {
            out.push(',');
            out.push_str(m);
        }
        out.push('\n');
        for r in &self.per_image {
            out.push_str(&csv_field(&r.id));
            for m in METRIC_NAMES {
                out.push(',');
                if let Some(v) = r.get(m) {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| IdaError::io(path, e))
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        write_json(path, &SummaryFile::from_stats(&self.summary, self.per_image.len(), 1))
    }
}

/// `summary.json` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub num_images: usize,
    pub num_runs: usize,
    pub threshold: f64,
    pub metrics: BTreeMap<String, Stat>,
}

impl SummaryFile {
    pub fn from_stats(stats: &BTreeMap<String, Stat>, num_images: usize, num_runs: usize) -> Self {
        SummaryFile {
            num_images,
            num_runs,
            threshold: THRESHOLD,
            metrics: stats.clone(),
        }
    }
}

/// Mean ± std across runs of each run's per-metric mean.
pub fn aggregate_runs(reports: &[EvalReport]) -> BTreeMap<String, Stat> {
    METRIC_NAMES
        .iter()
        .map(|&m| (m.to_string(), mean_std(reports.iter().map(|r| r.mean(m)))))
        .collect()
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| IdaError::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| IdaError::io(path, e))
}

/// Foreground probability maps at original resolution for `samples`.
pub fn predict_foreground<T: Scalar>(
    net: &WNet,
    state: &ModelState<T>,
    samples: &[ImageSample<T>],
) -> Result<Vec<Plane<T>>> {
    let probs = net.predict_dataset(state, samples)?;
    Ok(probs.iter().map(foreground_plane).collect())
}

pub fn foreground_plane<T: Scalar>(p: &Tensor<T>) -> Plane<T> {
    Plane::from_vec(p.w, p.h, p.channel(1).to_vec()).expect("dims")
}

/// Predicts every labelled sample and scores it.
pub fn evaluate_dataset<T: Scalar>(net: &WNet, state: &ModelState<T>, samples: &[ImageSample<T>]) -> Result<EvalReport> {
    let fg = predict_foreground(net, state, samples)?;
    let rows = samples
        .iter()
        .zip(&fg)
        .map(|(s, p)| {
            let gt = s
                .label
                .as_ref()
                .ok_or_else(|| IdaError::InvalidArgument(format!("sample {} has no label", s.id)))?;
            image_metrics(&s.id, p, gt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_images(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mask(w: usize, h: usize, rng: &mut ChaCha8Rng) -> LabelPlane {
        Plane::from_fn(w, h, |_, _| rng.gen_range(0..2u8))
    }

    fn from_rows(rows: &[&str]) -> LabelPlane {
        let h = rows.len();
        let w = rows[0].len();
        Plane::from_fn(w, h, |x, y| (rows[y].as_bytes()[x] == b'#') as u8)
    }

    #[test]
    fn confusion_matches_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let p = rand_mask(16, 16, &mut rng);
            let g = rand_mask(16, 16, &mut rng);
            let c = confusion(&p, &g).unwrap();
            let mut t = [0u64; 4];
            for y in 0..16 {
                for x in 0..16 {
                    t[(p.get(x, y) * 2 + g.get(x, y)) as usize] += 1;
                }
            }
            assert_eq!((c.tn, c.fn_, c.fp, c.tp), (t[0], t[1], t[2], t[3]));
            assert_eq!(c.total(), 256);
            assert_eq!(c.accuracy(), Some((c.tp + c.tn) as f64 / 256.0));
        }
        let g = rand_mask(8, 8, &mut rng);
        let c = confusion(&g, &g).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv = g.map(|v| 1 - v);
        let c = confusion(&inv, &g).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn dice_conventions() {
        let z = Plane::filled(4, 4, 0u8);
        assert_eq!(dice(&z, &z).unwrap(), 1.0);
        let a = from_rows(&["##..", "...."]);
        let b = from_rows(&["..##", "...."]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
    }

    fn auc_oracle(s: &[f64], g: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if g[i] == 1 && g[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_cases() {
        let g = Plane::from_vec(4, 1, vec![0u8, 0, 1, 1]).unwrap();
        let s = Plane::from_vec(4, 1, vec![0.1, 0.2, 0.8, 0.9]).unwrap();
        assert_eq!(auc(&s, &g).unwrap(), Some(1.0));
        assert_eq!(auc(&Plane::filled(4, 1, 0.3), &g).unwrap(), Some(0.5));
        assert_eq!(auc(&s, &Plane::filled(4, 1, 1u8)).unwrap(), None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let g = rand_mask(7, 5, &mut rng);
            let s = Plane::from_fn(7, 5, |_, _| (rng.gen_range(0..6) as f64) / 5.0);
            let want = auc_oracle(s.as_slice(), g.as_slice());
            assert!((auc(&s, &g).unwrap().unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn skeleton_of_thick_line_is_thin_and_inside() {
        let mut m = Plane::filled(20, 9, 0u8);
        for y in 3..6 {
            for x in 2..18 {
                m.set(x, y, 1);
            }
        }
        let s = skeletonize(&m);
        assert!(s.count_class(1) > 0);
        for x in 0..20 {
            assert!((0..9).filter(|&y| s.get(x, y) == 1).count() <= 1);
        }
        for (a, b) in s.as_slice().iter().zip(m.as_slice()) {
            assert!(*a <= *b);
        }
    }

    #[test]
    fn cl_dice_cases() {
        let mut line = Plane::filled(20, 11, 0u8);
        for x in 2..18 {
            line.set(x, 5, 1);
        }
        assert_eq!(cl_dice(&line, &line).unwrap(), 1.0);
        // dilate by one pixel: skeletons stay inside the other mask
        let dil = Plane::from_fn(20, 11, |x, y| {
            let mut v = 0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                    if nx >= 0 && ny >= 0 && nx < 20 && ny < 11 && line.get(nx as usize, ny as usize) == 1 {
                        v = 1;
                    }
                }
            }
            v
        });
        assert!(skeletonize(&dil).as_slice().iter().zip(line.as_slice()).all(|(s, _)| *s <= 1));
        let sd = skeletonize(&dil);
        assert!(sd
            .as_slice()
            .iter()
            .enumerate()
            .all(|(i, &s)| s == 0 || dil.as_slice()[i] == 1));
        assert_eq!(cl_dice(&dil, &line).unwrap(), 1.0);
        let mut other = Plane::filled(20, 11, 0u8);
        for x in 2..18 {
            other.set(x, 1, 1);
        }
        assert_eq!(cl_dice(&other, &line).unwrap(), 0.0);
        let z = Plane::filled(5, 5, 0u8);
        assert_eq!(cl_dice(&z, &z).unwrap(), 1.0);
        assert_eq!(cl_dice(&z, &line.crop(0, 3, 5, 5)).unwrap(), 0.0);
    }

    #[test]
    fn betti_numbers_of_shapes() {
        let ring = from_rows(&[".....", ".###.", ".#.#.", ".###.", "....."]);
        assert_eq!(betti_numbers(&ring), (1, 1));
        let disc = from_rows(&[".....", ".###.", ".###.", ".###.", "....."]);
        assert_eq!(betti_numbers(&disc), (1, 0));
        // diagonal touch joins foreground (8-conn) and does not close a hole
        let diag = from_rows(&["#..", ".#.", "..#"]);
        assert_eq!(betti_numbers(&diag), (1, 0));
        // the centre is 4-enclosed, so it counts as a hole
        let diamond = from_rows(&[".#.", "#.#", ".#."]);
        assert_eq!(betti_numbers(&diamond), (1, 1));
        // hole touching the border is not bounded
        let cup = from_rows(&["#.#", "#.#", "###"]);
        assert_eq!(betti_numbers(&cup), (1, 0));
    }

    #[test]
    fn planted_component_and_hole() {
        let gt = Plane::from_fn(128, 128, |x, y| (y == 20 && x < 128) as u8);
        let mut pred = gt.clone();
        pred.set(100, 100, 1);
        assert_eq!(betti_matching_error(&gt, &gt).unwrap(), 0.0);
        // one extra blob in one of four tiles
        assert_eq!(betti_matching_error(&pred, &gt).unwrap() * 4.0, 1.0);
        let disc = Plane::from_fn(64, 64, |x, y| ((x as i32 - 32).pow(2) + (y as i32 - 32).pow(2) <= 100) as u8);
        let mut annulus = disc.clone();
        for y in 30..35 {
            for x in 30..35 {
                annulus.set(x, y, 0);
            }
        }
        assert_eq!(betti_matching_error(&annulus, &disc).unwrap(), 1.0);
    }

    #[test]
    fn aggregation() {
        let rows = vec![
            ImageMetrics {
                id: "a".into(),
                auc: Some(0.8),
                acc: Some(0.9),
                se: None,
                sp: Some(1.0),
                dice: Some(0.5),
                cl_dice: Some(0.6),
                bm: Some(1.0),
            },
            ImageMetrics {
                id: "b".into(),
                auc: Some(0.6),
                acc: Some(0.7),
                se: Some(0.4),
                sp: Some(0.8),
                dice: Some(0.7),
                cl_dice: Some(0.2),
                bm: Some(3.0),
            },
        ];
        let r = EvalReport::from_images(rows.clone());
        assert!((r.mean("dice").unwrap() - 0.6).abs() < 1e-12);
        assert!((r.summary["dice"].std.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(r.summary["se"].n, 1);
        let one = EvalReport::from_images(rows[..1].to_vec());
        assert_eq!(one.summary["auc"].std, Some(0.0));
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = EvalReport::from_images(vec![ImageMetrics {
            id: "x,1".into(),
            auc: None,
            acc: Some(1.0),
            se: Some(1.0),
            sp: Some(1.0),
            dice: Some(1.0),
            cl_dice: Some(1.0),
            bm: Some(0.0),
        }]);
        r.write_csv(&dir.path().join("metrics.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "id,auc,acc,se,sp,dice,cl_dice,bm");
        assert_eq!(csv.lines().nth(1).unwrap(), "\"x,1\",,1,1,1,1,1,0");
        r.write_summary_json(&dir.path().join("summary.json")).unwrap();
        let s: SummaryFile = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(s.metrics["auc"].mean, None);
        assert_eq!(s.metrics["dice"].mean, Some(1.0));
    }

    proptest! {
        #[test]
        fn euler_matches_betti(bits in proptest::collection::vec(0u8..2, 64)) {
            let m = Plane::from_vec(8, 8, bits).unwrap();
            let (b0, b1) = betti_numbers(&m);
            prop_assert_eq!(euler_number(&m), b0 as i64 - b1 as i64);
        }

        #[test]
        fn self_comparisons(bits in proptest::collection::vec(0u8..2, 100), other in proptest::collection::vec(0u8..2, 100)) {
            let a = Plane::from_vec(10, 10, bits).unwrap();
            let b = Plane::from_vec(10, 10, other).unwrap();
            prop_assert_eq!(betti_matching_error_with(&a, &a, 4).unwrap(), 0.0);
            prop_assert_eq!(cl_dice(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            let c = confusion(&a, &b).unwrap();
            if let Some(se) = c.sensitivity() { prop_assert_eq!(se, c.tp as f64 / (c.tp + c.fn_) as f64); }
        }

        #[test]
        fn auc_monotone_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = rand_mask(6, 6, &mut rng);
            let s = Plane::from_fn(6, 6, |_, _| rng.gen_range(0.0..1.0f64));
            let t = s.map(|v| (3.0 * v).exp() + 1.0);
            prop_assert_eq!(auc(&s, &g).unwrap(), auc(&t, &g).unwrap());
        }
    }
}
