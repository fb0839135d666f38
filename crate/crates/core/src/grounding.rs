//! Part grounding: from source descriptors to a voxel area of interaction.
//!
//! DINO finds every instance of the part (product of the positive and negative
//! similarities is high on both instances), SD separates the instances
//! (difference of similarities). Both maps are min-max normalized over the
//! eligible voxels, the DINO one thresholded, and their product kept at its
//! top quartile.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{minmax_normalize, percentile_cutoff, SourceAnnotation};
use crate::bundle::FeatureFamily;
use crate::field::{cosine, VoxelGrid};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundingError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("no interaction area: {0}")]
    Empty(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    C2g,
    DinoOnly,
    SdOnly,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::C2g, Method::DinoOnly, Method::SdOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::C2g => "c2g",
            Method::DinoOnly => "dino_only",
            Method::SdOnly => "sd_only",
        }
    }

    /// Accepts the full names and the short forms `dino` and `sd`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dino" => Some(Method::DinoOnly),
            "sd" => Some(Method::SdOnly),
            _ => Self::ALL.into_iter().find(|m| m.name() == s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingConfig {
    /// Threshold on the normalized DINO similarity.
    pub theta_dino: f64,
    /// Voxels farther than this from the fused surface are ignored; `None` means one voxel.
    pub surface_band: Option<f64>,
    /// Use `max(norm_dino, θ)` instead of zeroing below θ.
    pub literal_max: bool,
    /// Keep only the top quartile of surviving scores.
    pub top_quartile: bool,
    /// Cosine threshold of the single-descriptor baselines (strict).
    pub baseline_threshold: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            theta_dino: 0.5,
            surface_band: None,
            literal_max: false,
            top_quartile: true,
            baseline_threshold: 0.85,
        }
    }
}

impl GroundingConfig {
    pub fn band_for(&self, voxel_size: f64) -> f64 {
        self.surface_band.unwrap_or(voxel_size)
    }

    pub fn validate(&self) -> Result<(), GroundingError> {
        if !(self.theta_dino > 0.0 && self.theta_dino < 1.0) {
            return Err(GroundingError::Argument(format!(
                "theta_dino must lie in (0, 1), got {}",
                self.theta_dino
            )));
        }
        if let Some(b) = self.surface_band {
            if !(b > 0.0 && b.is_finite()) {
                return Err(GroundingError::Argument(format!(
                    "surface band must be positive, got {b}"
                )));
            }
        }
        if !(self.baseline_threshold > -1.0 && self.baseline_threshold < 1.0) {
            return Err(GroundingError::Argument(format!(
                "baseline threshold must lie in (-1, 1), got {}",
                self.baseline_threshold
            )));
        }
        Ok(())
    }
}

/// Per-voxel score aligned with a [`VoxelGrid`]; invalid voxels hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SimGrid {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl SimGrid {
    fn valid_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(&v, _)| v)
            .collect()
    }

    /// Min-max over valid entries, scattered back; invalid entries stay 0.
    pub fn normalized(&self) -> SimGrid {
        let norm = minmax_normalize(&self.valid_values());
        let mut it = norm.into_iter();
        let values = self
            .valid
            .iter()
            .map(|&ok| if ok { it.next().unwrap() } else { 0.0 })
            .collect();
        SimGrid {
            values,
            valid: self.valid.clone(),
        }
    }
}

/// Voxels with a valid sample lying within `band` of the fused surface.
pub fn surface_voxels(grid: &VoxelGrid, band: f64) -> Vec<bool> {
    grid.samples.iter().map(|s| s.valid && s.s.abs() <= band).collect()
}

fn check_unit(d: &[f64], channels: usize, what: &str) -> Result<(), GroundingError> {
    if d.len() != channels {
        return Err(GroundingError::Argument(format!(
            "{what} has {} channels, grid {channels}",
            d.len()
        )));
    }
    if d.iter().map(|x| x * x).sum::<f64>() < 1e-24 {
        return Err(GroundingError::Argument(format!("zero-norm {what}")));
    }
    Ok(())
}

fn per_voxel(grid: &VoxelGrid, eligible: &[bool], family: FeatureFamily, f: impl Fn(&[f64]) -> f64) -> SimGrid {
    let values = grid
        .samples
        .iter()
        .zip(eligible)
        .map(|(s, &ok)| if ok { f(s.features(family)) } else { 0.0 })
        .collect();
    SimGrid {
        values,
        valid: eligible.to_vec(),
    }
}

fn channels(grid: &VoxelGrid, family: FeatureFamily) -> usize {
    grid.samples.first().map_or(0, |s| s.features(family).len())
}

/// `cos(f, d⁺)·cos(f, d⁻)` on the DINO features.
pub fn sim_dino(grid: &VoxelGrid, eligible: &[bool], pos: &[f64], neg: &[f64]) -> Result<SimGrid, GroundingError> {
    let c = channels(grid, FeatureFamily::Dino);
    check_unit(pos, c, "positive descriptor")?;
    check_unit(neg, c, "negative descriptor")?;
    Ok(per_voxel(grid, eligible, FeatureFamily::Dino, |f| {
        cosine(f, pos) * cosine(f, neg)
    }))
}

/// `cos(f, d⁺) - cos(f, d⁻)` on the SD features.
pub fn sim_sd(grid: &VoxelGrid, eligible: &[bool], pos: &[f64], neg: &[f64]) -> Result<SimGrid, GroundingError> {
    let c = channels(grid, FeatureFamily::Sd);
    check_unit(pos, c, "positive descriptor")?;
    check_unit(neg, c, "negative descriptor")?;
    Ok(per_voxel(grid, eligible, FeatureFamily::Sd, |f| {
        cosine(f, pos) - cosine(f, neg)
    }))
}

/// Selected voxels with their final scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionArea {
    pub voxels: Vec<usize>,
    pub centers: Vec<[f64; 3]>,
    pub scores: Vec<f64>,
    pub origin: [f64; 3],
    pub dims: [usize; 3],
    pub voxel_size: f64,
}

impl InteractionArea {
    fn from_scores(grid: &VoxelGrid, picked: Vec<(usize, f64)>) -> Self {
        Self {
            centers: picked.iter().map(|&(i, _)| grid.center(i).into()).collect(),
            scores: picked.iter().map(|&(_, s)| s).collect(),
            voxels: picked.into_iter().map(|(i, _)| i).collect(),
            origin: grid.origin.into(),
            dims: grid.dims,
            voxel_size: grid.voxel_size,
        }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.centers.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.centers {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        c
    }
}

/// Intermediate grids of the combined rule.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaStages {
    pub dino_thresholded: SimGrid,
    pub sd_normalized: SimGrid,
    pub product: SimGrid,
    pub survivors: usize,
}

pub fn area_of_interaction(
    grid: &VoxelGrid,
    sim_dino: &SimGrid,
    sim_sd: &SimGrid,
    cfg: &GroundingConfig,
) -> Result<(InteractionArea, AreaStages), GroundingError> {
    cfg.validate()?;
    if sim_dino.values.len() != grid.len() || sim_sd.values.len() != grid.len() {
        return Err(GroundingError::Argument(
            "similarity grids do not match the voxel grid".into(),
        ));
    }
    let mut nd = sim_dino.normalized();
    for v in nd.values.iter_mut() {
        *v = if cfg.literal_max {
            v.max(cfg.theta_dino)
        } else if *v < cfg.theta_dino {
            0.0
        } else {
            *v
        };
    }
    let ns = sim_sd.normalized();
    let valid: Vec<bool> = sim_dino
        .valid
        .iter()
        .zip(&sim_sd.valid)
        .map(|(a, b)| *a && *b)
        .collect();
    let product: Vec<f64> = (0..grid.len())
        .map(|i| if valid[i] { nd.values[i] * ns.values[i] } else { 0.0 })
        .collect();
    let survivors: Vec<usize> = (0..grid.len()).filter(|&i| valid[i] && product[i] > 0.0).collect();
    let stages = AreaStages {
        dino_thresholded: nd,
        sd_normalized: ns,
        product: SimGrid {
            values: product.clone(),
            valid,
        },
        survivors: survivors.len(),
    };
    if survivors.is_empty() {
        return Err(GroundingError::Empty("every voxel scored zero".into()));
    }
    let scores = minmax_normalize(&survivors.iter().map(|&i| product[i]).collect::<Vec<_>>());
    let cut = if cfg.top_quartile {
        percentile_cutoff(&scores, 3, 4).unwrap()
    } else {
        f64::NEG_INFINITY
    };
    let picked = survivors.into_iter().zip(scores).filter(|&(_, s)| s >= cut).collect();
    Ok((InteractionArea::from_scores(grid, picked), stages))
}

/// Single-descriptor baseline: voxels with `cos(f, d⁺) > threshold`.
pub fn baseline_area(
    grid: &VoxelGrid,
    eligible: &[bool],
    pos: &[f64],
    family: FeatureFamily,
    threshold: f64,
) -> Result<(InteractionArea, SimGrid), GroundingError> {
    check_unit(pos, channels(grid, family), "positive descriptor")?;
    let sim = per_voxel(grid, eligible, family, |f| cosine(f, pos));
    let picked: Vec<(usize, f64)> = (0..grid.len())
        .filter(|&i| sim.valid[i] && sim.values[i] > threshold)
        .map(|i| (i, sim.values[i]))
        .collect();
    if picked.is_empty() {
        return Err(GroundingError::Empty(format!(
            "no voxel has {} similarity above {threshold}",
            family.name()
        )));
    }
    Ok((InteractionArea::from_scores(grid, picked), sim))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingSummary {
    pub method: Method,
    pub theta: f64,
    pub eligible: usize,
    pub survivors: usize,
    pub area_size: usize,
    /// Set when the combined rule fell back to the DINO baseline.
    pub fallback: bool,
}

/// Area plus named per-voxel channels for debugging.
#[derive(Clone, Debug)]
pub struct Grounding {
    pub area: InteractionArea,
    pub summary: GroundingSummary,
    pub channels: Vec<(String, Vec<f64>)>,
}

impl Grounding {
    /// Channels stacked as `[K, nz, ny, nx]`.
    pub fn to_tensor(&self) -> Option<Tensor> {
        let [nx, ny, nz] = self.area.dims;
        let data = self
            .channels
            .iter()
            .flat_map(|(_, v)| v.iter().map(|&x| x as f32))
            .collect();
        Tensor::new(vec![self.channels.len(), nz, ny, nx], data).ok()
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

pub fn ground(
    grid: &VoxelGrid,
    annotation: &SourceAnnotation,
    method: Method,
    cfg: &GroundingConfig,
) -> Result<Grounding, GroundingError> {
    cfg.validate()?;
    let eligible = surface_voxels(grid, cfg.band_for(grid.voxel_size));
    let n_eligible = eligible.iter().filter(|&&b| b).count();
    if n_eligible == 0 {
        return Err(GroundingError::Empty("no voxel near an observed surface".into()));
    }
    let mask_channel = |area: &InteractionArea| {
        let mut m = vec![0.0; grid.len()];
        for (&i, &s) in area.voxels.iter().zip(&area.scores) {
            m[i] = s.max(1e-6);
        }
        m
    };
    let baseline = |family: FeatureFamily, fallback: bool| -> Result<Grounding, GroundingError> {
        let (pos, _) = annotation.descriptors(family);
        let (area, sim) = baseline_area(grid, &eligible, pos, family, cfg.baseline_threshold)?;
        Ok(Grounding {
            summary: GroundingSummary {
                method,
                theta: cfg.baseline_threshold,
                eligible: n_eligible,
                survivors: area.len(),
                area_size: area.len(),
                fallback,
            },
            channels: vec![
                (format!("cos_{}", family.name()), sim.values),
                ("area".into(), mask_channel(&area)),
            ],
            area,
        })
    };
    match method {
        Method::DinoOnly => baseline(FeatureFamily::Dino, false),
        Method::SdOnly => baseline(FeatureFamily::Sd, false),
        Method::C2g => {
            let (Some(dneg), Some(sneg)) = (&annotation.d_dino_neg, &annotation.d_sd_neg) else {
                return baseline(FeatureFamily::Dino, true);
            };
            let sd_grid = sim_dino(grid, &eligible, &annotation.d_dino_pos, dneg)?;
            let ss_grid = sim_sd(grid, &eligible, &annotation.d_sd_pos, sneg)?;
            let (area, stages) = area_of_interaction(grid, &sd_grid, &ss_grid, cfg)?;
            Ok(Grounding {
                summary: GroundingSummary {
                    method,
                    theta: cfg.theta_dino,
                    eligible: n_eligible,
                    survivors: stages.survivors,
                    area_size: area.len(),
                    fallback: false,
                },
                channels: vec![
                    ("sim_dino".into(), sd_grid.values),
                    ("sim_sd".into(), ss_grid.values),
                    ("dino_thresholded".into(), stages.dino_thresholded.values),
                    ("sd_normalized".into(), stages.sd_normalized.values),
                    ("product".into(), stages.product.values),
                    ("area".into(), mask_channel(&area)),
                ],
                area,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldSample;
    use crate::geometry::Vec3;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid_of(dino: Vec<Vec<f64>>, sd: Vec<Vec<f64>>) -> VoxelGrid {
        let n = dino.len();
        VoxelGrid {
            origin: Vec3::zeros(),
            dims: [n, 1, 1],
            voxel_size: 0.01,
            samples: dino
                .into_iter()
                .zip(sd)
                .map(|(dino, sd)| FieldSample {
                    s: 0.0,
                    dino,
                    sd,
                    weight_sum: 1.0,
                    valid: true,
                })
                .collect(),
        }
    }

    const R: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn sim_dino_examples() {
        let g = grid_of(vec![vec![R, R], vec![1.0, 0.0]], vec![vec![1.0]; 2]);
        let mut ok = vec![true; 2];
        let s = sim_dino(&g, &ok, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_relative_eq!(s.values[0], 0.5, epsilon = 1e-12);
        assert_eq!(s.values[1], 0.0);
        ok[0] = false;
        assert_eq!(sim_dino(&g, &ok, &[1.0, 0.0], &[0.0, 1.0]).unwrap().values[0], 0.0);
        assert!(sim_dino(&g, &ok, &[0.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn sim_sd_examples() {
        let g = grid_of(vec![vec![1.0]; 3], vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let s = sim_sd(&g, &[true; 3], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_relative_eq!(s.values[0], 1.0);
        assert_relative_eq!(s.values[1], -1.0);
        assert_relative_eq!(s.values[2], 0.0, epsilon = 1e-12);
    }

    fn sims(values: Vec<f64>) -> SimGrid {
        SimGrid {
            valid: vec![true; values.len()],
            values,
        }
    }

    #[test]
    fn hand_traced_area() {
        let g = grid_of(vec![vec![1.0]; 4], vec![vec![1.0]; 4]);
        let (a, st) = area_of_interaction(
            &g,
            &sims(vec![1.0, 0.875, 0.125, 0.0]),
            &sims(vec![1.0, 0.0, 0.5, 0.2]),
            &GroundingConfig::default(),
        )
        .unwrap();
        assert_eq!(st.dino_thresholded.values, vec![1.0, 0.875, 0.0, 0.0]);
        assert_eq!(st.product.values, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(a.voxels, vec![0]);

        // literal max keeps every voxel with a non-zero SD score
        let cfg = GroundingConfig {
            literal_max: true,
            top_quartile: false,
            ..Default::default()
        };
        let (a, _) = area_of_interaction(
            &g,
            &sims(vec![1.0, 0.875, 0.125, 0.0]),
            &sims(vec![1.0, 0.0, 0.5, 0.2]),
            &cfg,
        )
        .unwrap();
        assert_eq!(a.voxels, vec![0, 2, 3]);
    }

    #[test]
    fn single_sd_voxel() {
        let g = grid_of(vec![vec![1.0]; 3], vec![vec![1.0]; 3]);
        let cfg = GroundingConfig::default();
        let (a, _) = area_of_interaction(&g, &sims(vec![0.0, 0.6, 1.0]), &sims(vec![0.0, 0.0, 1.0]), &cfg).unwrap();
        assert_eq!(a.voxels, vec![2]);
        assert!(area_of_interaction(&g, &sims(vec![0.0, 1.0, 0.2]), &sims(vec![0.0, 0.0, 1.0]), &cfg).is_err());
    }

    #[test]
    fn baseline_is_strict() {
        let c = 0.85f64;
        let g = grid_of(
            vec![vec![1.0, 0.0], vec![c, (1.0 - c * c).sqrt()], vec![0.0, 1.0]],
            vec![vec![1.0]; 3],
        );
        let (a, _) = baseline_area(&g, &[true; 3], &[1.0, 0.0], FeatureFamily::Dino, 0.85).unwrap();
        assert_eq!(a.voxels, vec![0]);
        assert!(baseline_area(&g, &[false; 3], &[1.0, 0.0], FeatureFamily::Dino, 0.85).is_err());
    }

    #[test]
    fn invalid_voxels_never_selected() {
        let g = grid_of(vec![vec![1.0]; 4], vec![vec![1.0]; 4]);
        let mut d = sims(vec![1.0, 0.9, 0.8, 0.0]);
        let s = sims(vec![1.0, 0.9, 0.8, 0.0]);
        d.valid[0] = false;
        d.values[0] = 0.0;
        let (a, _) = area_of_interaction(&g, &d, &s, &GroundingConfig::default()).unwrap();
        assert!(!a.voxels.contains(&0));
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    proptest! {
        #[test]
        fn sim_symmetries(
            feats in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..20),
            p in prop::collection::vec(0.1f64..1.0, 3),
            q in prop::collection::vec(-1.0f64..-0.1, 3),
        ) {
            let (p, q) = (unit(p), unit(q));
            let g = grid_of(feats.clone(), feats);
            let ok = vec![true; g.len()];
            let a = sim_dino(&g, &ok, &p, &q).unwrap();
            let b = sim_dino(&g, &ok, &q, &p).unwrap();
            prop_assert_eq!(a.values, b.values);
            let a = sim_sd(&g, &ok, &p, &q).unwrap();
            let b = sim_sd(&g, &ok, &q, &p).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert_eq!(*x, -*y);
            }
        }

        #[test]
        fn quartile_cardinality(n in 1usize..300, seed in 0usize..1000) {
            // distinct positive scores: every voxel survives
            let vals: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919 + seed) % 100_003) as f64 / 100_003.0 + i as f64 * 1e-9).collect();
            let mut dino = vals.clone();
            dino.push(0.0);
            let mut sd = vals;
            sd.push(0.0);
            let g2 = grid_of(vec![vec![1.0]; n + 1], vec![vec![1.0]; n + 1]);
            let cfg = GroundingConfig { theta_dino: 1e-12, ..Default::default() };
            let (a, st) = area_of_interaction(&g2, &sims(dino), &sims(sd), &cfg).unwrap();
            prop_assert_eq!(st.survivors, n);
            prop_assert_eq!(a.len(), n.div_ceil(4));
        }
    }
}
