//! Source-image annotation: from one click to positive/negative part descriptors.
//!
//! The DINO map localizes every instance of the clicked part (cosine map,
//! min-max, top decile, closing, connected components). The component nearest
//! the click is the positive instance, the rest are negatives. Descriptors for
//! both families are read at the component centroids.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{FeatureFamily, FeatureMap, RgbImage, SourceBundle};
use crate::field::cosine;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("click ({u}, {v}) outside the {width}x{height} source image")]
    ClickOutside {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("no part instances found")]
    NoInstances,
    #[error("no coherent part at the click: {0}")]
    Incoherent(String),
    #[error("zero-norm {family} feature at centroid ({u}, {v})")]
    ZeroFeature { family: &'static str, u: usize, v: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorConfig {
    /// Closing radius on the feature grid (square element of side `2r+1`).
    pub closing_radius: usize,
    /// Components smaller than this many feature pixels are dropped.
    pub min_area: usize,
    /// At most this fraction of the grid may reach half the normalized
    /// similarity of the click; more means the click hit something ubiquitous
    /// such as background.
    pub max_match_fraction: f64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            closing_radius: 2,
            min_area: 4,
            max_match_fraction: 0.2,
        }
    }
}

/// Scalar raster over a feature grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SimMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub family: FeatureFamily,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        self.bits[v * self.width + u] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Per-pixel cosine similarity to `d`; zero-norm pixels score 0.
pub fn similarity_map(features: &FeatureMap, d: &[f64], family: FeatureFamily) -> Result<SimMap, AnnotationError> {
    if d.len() != features.channels {
        return Err(AnnotationError::Argument(format!(
            "descriptor has {} channels, feature map {}",
            d.len(),
            features.channels
        )));
    }
    if d.iter().all(|&x| x == 0.0) {
        return Err(AnnotationError::Argument("zero-norm descriptor".into()));
    }
    let mut values = Vec::with_capacity(features.width * features.height);
    let mut buf = vec![0.0; features.channels];
    for v in 0..features.height {
        for u in 0..features.width {
            for (b, &p) in buf.iter_mut().zip(features.pixel(u, v)) {
                *b = p as f64;
            }
            values.push(cosine(&buf, d));
        }
    }
    Ok(SimMap {
        width: features.width,
        height: features.height,
        values,
        family,
    })
}

/// `(v - min) / (max - min)`; a constant input maps to all zeros.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Percentile cutoff: the sorted value at rank `min(⌊N·num/den⌋, N-1)`.
/// Keeping everything `≥` the cutoff retains `⌈N·(den-num)/den⌉` entries
/// when values are distinct.
pub fn percentile_cutoff(values: &[f64], num: usize, den: usize) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (values.len() * num / den).min(values.len() - 1);
    Some(sorted[rank])
}

pub fn top_decile_mask(m: &SimMap) -> Mask {
    let cut = percentile_cutoff(&m.values, 9, 10).unwrap_or(f64::INFINITY);
    Mask {
        width: m.width,
        height: m.height,
        bits: m.values.iter().map(|&v| v >= cut).collect(),
    }
}

/// Separable square max (dilate) or min (erode) filter. Out-of-grid pixels
/// count as unset for dilation and are ignored for erosion, which makes the
/// two operators an adjunction on the finite grid.
fn square_filter(mask: &Mask, radius: usize, dilate: bool) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let pass = |src: &[bool], along_rows: bool| -> Vec<bool> {
        let mut out = vec![false; w * h];
        for v in 0..h {
            for u in 0..w {
                let (pos, len) = if along_rows { (u, w) } else { (v, h) };
                let lo = pos.saturating_sub(radius);
                let hi = (pos + radius).min(len - 1);
                let mut hit = !dilate;
                for q in lo..=hi {
                    let b = if along_rows { src[v * w + q] } else { src[q * w + u] };
                    if dilate && b {
                        hit = true;
                        break;
                    }
                    if !dilate && !b {
                        hit = false;
                        break;
                    }
                }
                out[v * w + u] = hit;
            }
        }
        out
    };
    let rows = pass(&mask.bits, true);
    Mask {
        width: w,
        height: h,
        bits: pass(&rows, false),
    }
}

/// Morphological closing with a `(2r+1)²` square.
pub fn clean_mask(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 || mask.bits.is_empty() {
        return mask.clone();
    }
    square_filter(&square_filter(mask, radius, true), radius, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Centroid {
    pub u: usize,
    pub v: usize,
    pub area: usize,
}

/// 4-connected components in raster discovery order, with their centroids.
pub fn extract_centroids(mask: &Mask, min_area: usize) -> Vec<Centroid> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (u, v) = (p % w, p / w);
            let mut visit = |q: usize| {
                if mask.bits[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if u > 0 {
                visit(p - 1);
            }
            if u + 1 < w {
                visit(p + 1);
            }
            if v > 0 {
                visit(p - w);
            }
            if v + 1 < h {
                visit(p + w);
            }
        }
        if pixels.len() < min_area.max(1) {
            continue;
        }
        let n = pixels.len() as f64;
        let mu = pixels.iter().map(|p| (p % w) as f64).sum::<f64>() / n;
        let mv = pixels.iter().map(|p| (p / w) as f64).sum::<f64>() / n;
        let (ru, rv) = (mu.round() as usize, mv.round() as usize);
        let (u, v) = if ru < w && rv < h && pixels.contains(&(rv * w + ru)) {
            (ru, rv)
        } else {
            let best = pixels
                .iter()
                .map(|&p| {
                    let (pu, pv) = ((p % w) as f64, (p / w) as f64);
                    ((pu - mu).powi(2) + (pv - mv).powi(2), p / w, p % w)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
                .unwrap();
            (best.2, best.1)
        };
        out.push(Centroid {
            u,
            v,
            area: pixels.len(),
        });
    }
    out
}

/// Index of the centroid nearest to `click` (feature-grid coordinates),
/// ties broken by smallest `(v, u)`.
pub fn assign_polarity(centroids: &[Centroid], click: (f64, f64)) -> Result<usize, AnnotationError> {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| {
            (
                (c.u as f64 - click.0).powi(2) + (c.v as f64 - click.1).powi(2),
                c.v,
                c.u,
                i,
            )
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
        .map(|t| t.3)
        .ok_or(AnnotationError::NoInstances)
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-12).then(|| v.iter().map(|x| x / n).collect())
}

/// Mean of unit vectors, renormalized.
pub fn aggregate_negatives(vectors: &[Vec<f64>]) -> Option<Vec<f64>> {
    let first = vectors.first()?;
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(unit(v)?) {
            *a += x;
        }
    }
    unit(&acc)
}

/// Proportional mapping of a coordinate on a grid of `from` samples onto one of `to`.
fn rescale(x: f64, from: usize, to: usize) -> f64 {
    x * to as f64 / from as f64
}

fn nearest_cell(x: f64, n: usize) -> usize {
    (x.round().max(0.0) as usize).min(n - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceDescriptor {
    /// Centroid on the DINO grid.
    pub dino_cell: [usize; 2],
    /// Centroid on the SD grid.
    pub sd_cell: [usize; 2],
    pub area: usize,
    pub positive: bool,
    pub dino: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceAnnotation {
    /// Click in source image pixels.
    pub click: [f64; 2],
    /// Click on the DINO feature grid.
    pub click_feature: [f64; 2],
    pub instances: Vec<InstanceDescriptor>,
    pub d_dino_pos: Vec<f64>,
    pub d_dino_neg: Option<Vec<f64>>,
    pub d_sd_pos: Vec<f64>,
    pub d_sd_neg: Option<Vec<f64>>,
    /// Set when no negative instance was found.
    pub degenerate: bool,
}

impl SourceAnnotation {
    pub fn positive(&self) -> &InstanceDescriptor {
        self.instances
            .iter()
            .find(|i| i.positive)
            .expect("one positive instance")
    }

    pub fn negatives(&self) -> impl Iterator<Item = &InstanceDescriptor> {
        self.instances.iter().filter(|i| !i.positive)
    }

    pub fn descriptors(&self, family: FeatureFamily) -> (&[f64], Option<&[f64]>) {
        match family {
            FeatureFamily::Dino => (&self.d_dino_pos, self.d_dino_neg.as_deref()),
            FeatureFamily::Sd => (&self.d_sd_pos, self.d_sd_neg.as_deref()),
        }
    }

    /// `{"positive":[u,v], "negatives":[[u,v]...]}` on the DINO grid.
    pub fn centroid_json(&self) -> serde_json::Value {
        let p = self.positive();
        serde_json::json!({
            "positive": p.dino_cell,
            "negatives": self.negatives().map(|n| n.dino_cell).collect::<Vec<_>>(),
        })
    }
}

/// Annotation plus the intermediate rasters, for debugging and the UI.
#[derive(Clone, Debug)]
pub struct AnnotationTrace {
    pub annotation: SourceAnnotation,
    pub heatmap: SimMap,
    pub mask: Mask,
}

pub fn annotate(
    source: &SourceBundle,
    click: (f64, f64),
    cfg: &AnnotatorConfig,
) -> Result<SourceAnnotation, AnnotationError> {
    annotate_traced(source, click, cfg).map(|t| t.annotation)
}

pub fn annotate_traced(
    source: &SourceBundle,
    click: (f64, f64),
    cfg: &AnnotatorConfig,
) -> Result<AnnotationTrace, AnnotationError> {
    let (w, h) = (source.image.width, source.image.height);
    let (u, v) = click;
    if !(u.is_finite() && v.is_finite() && u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return Err(AnnotationError::ClickOutside {
            u,
            v,
            width: w,
            height: h,
        });
    }
    let dino = &source.dino;
    let sd = &source.sd;
    let cu = rescale(u, w, dino.width);
    let cv = rescale(v, h, dino.height);
    let seed = dino.pixel_f64(nearest_cell(cu, dino.width), nearest_cell(cv, dino.height));
    if unit(&seed).is_none() {
        return Err(AnnotationError::Incoherent("zero-norm feature at the click".into()));
    }

    let raw = similarity_map(dino, &seed, FeatureFamily::Dino)?;
    let heatmap = SimMap {
        values: minmax_normalize(&raw.values),
        ..raw
    };
    let matches = heatmap.values.iter().filter(|&&x| x >= 0.5).count();
    let cells = dino.width * dino.height;
    if matches as f64 > cfg.max_match_fraction * cells as f64 {
        return Err(AnnotationError::Incoherent(format!(
            "clicked feature matches {matches} of {cells} feature pixels"
        )));
    }
    let mask = clean_mask(&top_decile_mask(&heatmap), cfg.closing_radius);
    let centroids = extract_centroids(&mask, cfg.min_area);
    let pos = assign_polarity(&centroids, (cu, cv))?;

    let mut instances = Vec::with_capacity(centroids.len());
    for (i, c) in centroids.iter().enumerate() {
        let su = nearest_cell(rescale(c.u as f64, dino.width, sd.width), sd.width);
        let sv = nearest_cell(rescale(c.v as f64, dino.height, sd.height), sd.height);
        let d = unit(&dino.pixel_f64(c.u, c.v)).ok_or(AnnotationError::ZeroFeature {
            family: "dino",
            u: c.u,
            v: c.v,
        })?;
        let s = unit(&sd.pixel_f64(su, sv)).ok_or(AnnotationError::ZeroFeature {
            family: "sd",
            u: su,
            v: sv,
        })?;
        instances.push(InstanceDescriptor {
            dino_cell: [c.u, c.v],
            sd_cell: [su, sv],
            area: c.area,
            positive: i == pos,
            dino: d,
            sd: s,
        });
    }
    let negatives: Vec<&InstanceDescriptor> = instances.iter().filter(|i| !i.positive).collect();
    let neg = |f: fn(&InstanceDescriptor) -> &Vec<f64>| {
        aggregate_negatives(&negatives.iter().map(|i| f(i).clone()).collect::<Vec<_>>())
    };
    let annotation = SourceAnnotation {
        click: [u, v],
        click_feature: [cu, cv],
        d_dino_pos: instances[pos].dino.clone(),
        d_sd_pos: instances[pos].sd.clone(),
        d_dino_neg: neg(|i| &i.dino),
        d_sd_neg: neg(|i| &i.sd),
        degenerate: negatives.is_empty(),
        instances,
    };
    Ok(AnnotationTrace {
        annotation,
        heatmap,
        mask,
    })
}

/// Blue-to-red ramp for values in `[0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t.min(0.5) * 2.0) as u8;
    let b = (255.0 * (1.0 - t).min(0.5) * 2.0) as u8;
    let g = (255.0 * (1.0 - (2.0 * t - 1.0).abs()) * 0.6) as u8;
    [r, g, b]
}

/// Source image blended half-and-half with the normalized similarity map.
pub fn heatmap_overlay(image: &RgbImage, heatmap: &SimMap) -> RgbImage {
    let mut out = RgbImage::new(image.width, image.height);
    for v in 0..image.height {
        for u in 0..image.width {
            let fu = nearest_cell(rescale(u as f64, image.width, heatmap.width), heatmap.width);
            let fv = nearest_cell(rescale(v as f64, image.height, heatmap.height), heatmap.height);
            let c = colormap(heatmap.values[fv * heatmap.width + fu]);
            let p = image.get(u, v);
            let mix = |a: u8, b: u8| ((a as u16 + b as u16) / 2) as u8;
            out.put(u, v, [mix(p[0], c[0]), mix(p[1], c[1]), mix(p[2], c[2])]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fmap(w: usize, h: usize, c: usize, f: impl Fn(usize, usize) -> Vec<f32>) -> FeatureMap {
        let data = (0..h)
            .flat_map(|v| (0..w).flat_map(|u| f(u, v)).collect::<Vec<_>>())
            .collect();
        FeatureMap::new(h, w, c, data).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let m = fmap(3, 1, 2, |u, _| match u {
            0 => vec![1.0, 0.0],
            1 => vec![0.0, 1.0],
            _ => vec![1.0, 1.0],
        });
        let s = similarity_map(&m, &[1.0, 0.0], FeatureFamily::Dino).unwrap();
        assert_relative_eq!(s.values[0], 1.0);
        assert_relative_eq!(s.values[1], 0.0);
        assert_relative_eq!(s.values[2], 0.70711, epsilon = 1e-5);
        assert!(similarity_map(&m, &[0.0, 0.0], FeatureFamily::Dino).is_err());
        assert!(similarity_map(&m, &[1.0], FeatureFamily::Dino).is_err());
        let z = fmap(1, 1, 2, |_, _| vec![0.0, 0.0]);
        assert_eq!(
            similarity_map(&z, &[1.0, 0.0], FeatureFamily::Sd).unwrap().values,
            vec![0.0]
        );
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[0.0, 5.0, 10.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[3.0, 3.0, 3.0]), vec![0.0; 3]);
        assert_eq!(minmax_normalize(&[0.0, 0.3, 1.0]), vec![0.0, 0.3, 1.0]);
    }

    fn map(values: Vec<f64>) -> SimMap {
        SimMap {
            width: values.len(),
            height: 1,
            values,
            family: FeatureFamily::Dino,
        }
    }

    #[test]
    fn decile_examples() {
        let m = top_decile_mask(&map((0..100).map(|v| v as f64).collect()));
        assert_eq!(m.count(), 10);
        assert!((90..100).all(|u| m.get(u, 0)));
        let m = top_decile_mask(&map(vec![0.4; 17]));
        assert_eq!(m.count(), 17);
        let m = top_decile_mask(&map((0..10).map(|v| v as f64).collect()));
        assert_eq!(m.bits.iter().position(|&b| b), Some(9));
        assert_eq!(m.count(), 1);
    }

    #[test]
    fn closing_examples() {
        let mut m = Mask::new(9, 5);
        m.set(3, 2, true);
        m.set(5, 2, true);
        let c = clean_mask(&m, 1);
        assert!(c.get(3, 2) && c.get(4, 2) && c.get(5, 2));
        assert_eq!(extract_centroids(&c, 1).len(), 1);

        assert_eq!(clean_mask(&Mask::new(6, 6), 2).count(), 0);

        let mut r = Mask::new(16, 14);
        for v in 5..9 {
            for u in 5..11 {
                r.set(u, v, true);
            }
        }
        assert_eq!(clean_mask(&r, 2), r);
    }

    #[test]
    fn centroid_examples() {
        let mut m = Mask::new(50, 20);
        for (ou, ov) in [(10, 10), (40, 10)] {
            for v in ov..ov + 3 {
                for u in ou..ou + 3 {
                    m.set(u, v, true);
                }
            }
        }
        let c = extract_centroids(&m, 4);
        assert_eq!(
            c.iter().map(|c| (c.u, c.v)).collect::<Vec<_>>(),
            vec![(11, 11), (41, 11)]
        );

        let mut one = Mask::new(5, 5);
        one.set(2, 3, true);
        assert_eq!(extract_centroids(&one, 1), vec![Centroid { u: 2, v: 3, area: 1 }]);
        assert!(extract_centroids(&one, 4).is_empty());

        // C shape: columns 0..5 on rows 0 and 4, column 0 in between; mean (1.54, 2)
        let mut cm = Mask::new(6, 5);
        for u in 0..5 {
            cm.set(u, 0, true);
            cm.set(u, 4, true);
        }
        for v in 1..4 {
            cm.set(0, v, true);
        }
        let c = extract_centroids(&cm, 1);
        assert_eq!(c.len(), 1);
        assert!(cm.get(c[0].u, c[0].v));
        assert_eq!((c[0].u, c[0].v), (0, 2));
    }

    #[test]
    fn polarity_examples() {
        let cs = [Centroid { u: 10, v: 10, area: 9 }, Centroid { u: 40, v: 10, area: 9 }];
        assert_eq!(assign_polarity(&cs, (12.0, 9.0)).unwrap(), 0);
        assert_eq!(assign_polarity(&cs, (38.0, 9.0)).unwrap(), 1);
        assert_eq!(assign_polarity(&cs[..1], (38.0, 9.0)).unwrap(), 0);
        assert_eq!(assign_polarity(&[], (0.0, 0.0)), Err(AnnotationError::NoInstances));
        let tie = [Centroid { u: 5, v: 8, area: 9 }, Centroid { u: 8, v: 5, area: 9 }];
        assert_eq!(assign_polarity(&tie, (5.0, 5.0)).unwrap(), 1);
        let tie = [Centroid { u: 7, v: 5, area: 9 }, Centroid { u: 3, v: 5, area: 9 }];
        assert_eq!(assign_polarity(&tie, (5.0, 5.0)).unwrap(), 1);
    }

    #[test]
    fn negative_aggregation() {
        let d = aggregate_negatives(&[vec![0.0, 1.0], vec![3.0, 0.0]]).unwrap();
        assert_relative_eq!(d[0], 0.70711, epsilon = 1e-5);
        assert_relative_eq!(d[1], 0.70711, epsilon = 1e-5);
    }

    /// Two 6×6 "arm" patches with code a on a background of code b.
    fn two_blob_source() -> SourceBundle {
        let (w, h) = (32, 16);
        let inside = |u: usize, v: usize| (5..11).contains(&v) && ((3..9).contains(&u) || (23..29).contains(&u));
        let dino = fmap(
            w,
            h,
            2,
            |u, v| if inside(u, v) { vec![2.0, 0.0] } else { vec![0.1, 1.0] },
        );
        let sd = fmap(w / 2, h / 2, 3, |u, _| {
            if u < 8 {
                vec![1.0, 0.0, 0.2]
            } else {
                vec![0.0, 1.0, 0.2]
            }
        });
        SourceBundle::new(RgbImage::new(w * 4, h * 4), dino, sd).unwrap()
    }

    #[test]
    fn annotate_two_instances() {
        let src = two_blob_source();
        let cfg = AnnotatorConfig {
            max_match_fraction: 0.5,
            ..Default::default()
        };
        let a = annotate(&src, (22.0, 30.0), &cfg).unwrap();
        assert_eq!(a.instances.len(), 2);
        assert!(!a.degenerate);
        assert_eq!(a.positive().dino_cell, [6, 8]);
        assert_relative_eq!(a.d_dino_pos[0], 1.0, epsilon = 1e-12);
        assert!(a.d_sd_pos[0] > 0.9);
        assert!(a.d_sd_neg.as_ref().unwrap()[1] > 0.9);
        for d in [
            &a.d_dino_pos,
            &a.d_sd_pos,
            a.d_dino_neg.as_ref().unwrap(),
            a.d_sd_neg.as_ref().unwrap(),
        ] {
            assert_relative_eq!(d.iter().map(|x| x * x).sum::<f64>().sqrt(), 1.0, epsilon = 1e-6);
        }
        let j = a.centroid_json();
        assert_eq!(j["positive"], serde_json::json!([6, 8]));
        assert_eq!(j["negatives"], serde_json::json!([[26, 8]]));

        let m = annotate(&src.mirrored(), (127.0 - 22.0, 30.0), &cfg).unwrap();
        // same physical instance, mirrored location (up to centroid rounding)
        let [mu, mv] = m.positive().dino_cell;
        assert!((mu as i64 - (31 - 6)).abs() <= 1 && mv == 8);
        assert_eq!(m.d_sd_pos, a.d_sd_pos);
        assert_eq!(m.d_sd_neg, a.d_sd_neg);
    }

    #[test]
    fn click_outside_rejected() {
        let src = two_blob_source();
        assert!(matches!(
            annotate(&src, (500.0, 3.0), &AnnotatorConfig::default()),
            Err(AnnotationError::ClickOutside { .. })
        ));
        assert!(annotate(&src, (f64::NAN, 3.0), &AnnotatorConfig::default()).is_err());
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1usize..14, 1usize..14).prop_flat_map(|(w, h)| {
            prop::collection::vec(prop::bool::weighted(0.3), w * h).prop_map(move |bits| Mask {
                width: w,
                height: h,
                bits,
            })
        })
    }

    proptest! {
        #[test]
        fn closing_is_extensive_and_idempotent(m in arb_mask(), r in 0usize..4) {
            let c = clean_mask(&m, r);
            prop_assert!(m.bits.iter().zip(&c.bits).all(|(a, b)| !a || *b));
            prop_assert_eq!(clean_mask(&c, r), c);
        }

        #[test]
        fn minmax_idempotent(values in prop::collection::vec(-5.0f64..5.0, 1..50)) {
            let once = minmax_normalize(&values);
            prop_assert!(once.iter().all(|v| (0.0..=1.0).contains(v)));
            let twice = minmax_normalize(&once);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn decile_count_for_distinct_values(n in 1usize..400) {
            let m = top_decile_mask(&map((0..n).map(|v| ((v * 7919) % n) as f64).collect()));
            prop_assert_eq!(m.count(), n.div_ceil(10));
        }

        #[test]
        fn positive_is_nearest(cs in prop::collection::vec((0usize..30, 0usize..30), 1..6), cu in 0.0f64..30.0, cv in 0.0f64..30.0) {
            let cs: Vec<Centroid> = cs.into_iter().map(|(u, v)| Centroid { u, v, area: 4 }).collect();
            let i = assign_polarity(&cs, (cu, cv)).unwrap();
            let d = |c: &Centroid| (c.u as f64 - cu).powi(2) + (c.v as f64 - cv).powi(2);
            prop_assert!(cs.iter().all(|c| d(&cs[i]) <= d(c)));
        }
    }
}
