//! Dataset simulation and on-disk layout.
//!
//! A dataset is one scene captured under one protocol: every frame as an
//! 8-bit PNG, per-group ground-truth radiance as PFM, and a JSON manifest
//! tying them together. The manifest is written last and atomically, so a
//! readable manifest implies a complete dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::capture::{
    ae_group_frames, apply_parallax, group_frames, run_schedule, CameraId, CaptureMode,
    CaptureSchedule, FusionGroup, LdrFrame, NoiseModel,
};
use crate::io::{pfm, pngio, write_atomic, IoError};
use crate::radiometry::{ExposureMeta, HdrImage};
use crate::scalar::Scalar;
use crate::scene::Scene;

pub const DATASET_FORMAT: &str = "hdr-fusion/dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Single camera cycling low/mid/high exposures.
    Ae,
    /// Reference camera at constant mid exposure plus a second camera
    /// alternating low/high.
    Dcs,
}

/// Capture-side knobs shared by both protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureParams {
    pub ev_low: i32,
    pub ev_high: i32,
    pub base_exposure_s: f64,
    /// Frame rate of the reference stream (and of the AE stream).
    pub reference_rate_hz: f64,
    /// Frame rate of the secondary low/high stream (DCS only).
    pub secondary_rate_hz: f64,
    pub duration_s: f64,
    /// Phase shift of the secondary stream relative to the reference.
    pub secondary_offset_s: f64,
    /// Horizontal baseline between the two cameras, in pixels.
    pub disparity_px: f64,
    pub noise: NoiseModel,
    pub bit_depth: Option<u8>,
    pub gamma: f64,
}

impl Default for CaptureParams {
    fn default() -> Self {
        CaptureParams {
            ev_low: -2,
            ev_high: 2,
            base_exposure_s: 0.02,
            reference_rate_hz: 8.0,
            secondary_rate_hz: 4.0,
            duration_s: 8.0,
            secondary_offset_s: 0.0625,
            disparity_px: 0.0,
            noise: NoiseModel::constant(0.005),
            bit_depth: Some(8),
            gamma: 2.2,
        }
    }
}

impl CaptureParams {
    fn ev_cycle(&self) -> Vec<i32> {
        vec![self.ev_low, 0, self.ev_high]
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if self.ev_low >= 0 || self.ev_high <= 0 {
            return Err(IoError::Dataset(format!(
                "EV bracket must straddle 0, got [{}, {}]",
                self.ev_low, self.ev_high
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupIndices {
    pub reference: usize,
    pub low: usize,
    pub high: usize,
}

/// In-memory dataset: frames, grouping, and per-group ground truth
/// (raw scene radiance; divide by `white_point` for the normalized scale).
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub kind: DatasetKind,
    pub scene: Scene,
    pub white_point: f64,
    pub frames: Vec<LdrFrame<T>>,
    pub groups: Vec<GroupIndices>,
    pub ground_truths: Vec<Option<HdrImage<T>>>,
}

impl<T: Scalar> Dataset<T> {
    /// All frames of one camera, in capture order.
    pub fn stream(&self, camera: CameraId) -> Vec<&LdrFrame<T>> {
        self.frames.iter().filter(|f| f.camera == camera).collect()
    }

    /// Materializes fusion groups with ground truth attached.
    pub fn fusion_groups(&self) -> Result<Vec<FusionGroup<T>>, IoError> {
        self.groups
            .iter()
            .zip(&self.ground_truths)
            .map(|(g, gt)| {
                let frame = |i: usize| {
                    self.frames
                        .get(i)
                        .cloned()
                        .ok_or_else(|| IoError::Dataset(format!("frame index {i} out of range")))
                };
                let mut group =
                    FusionGroup::new(frame(g.reference)?, frame(g.low)?, frame(g.high)?)?;
                if let Some(gt) = gt {
                    group = group.with_ground_truth(gt.clone())?;
                }
                Ok(group)
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, IoError> {
        fs::create_dir_all(dir.join("frames"))?;
        fs::create_dir_all(dir.join("gt"))?;
        let mut frames = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            let rel = format!("frames/{}_{:04}.png", f.camera.label(), f.frame_index);
            pngio::save(&dir.join(&rel), &f.image)?;
            frames.push(FrameRecord {
                path: rel,
                camera: f.camera,
                frame_index: f.frame_index,
                ev: f.meta.ev,
                exposure_time_s: f.meta.exposure_time_s,
                gamma: f.meta.gamma,
                timestamp_us: f.timestamp_us,
                bit_depth: f.image.bit_depth(),
            });
        }
        let mut groups = Vec::with_capacity(self.groups.len());
        for (i, (g, gt)) in self.groups.iter().zip(&self.ground_truths).enumerate() {
            let ground_truth = match gt {
                Some(gt) => {
                    let rel = format!("gt/group_{i:04}.pfm");
                    pfm::save(&dir.join(&rel), gt)?;
                    Some(rel)
                }
                None => None,
            };
            groups.push(GroupRecord {
                reference: g.reference,
                low: g.low,
                high: g.high,
                ground_truth,
            });
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            kind: self.kind,
            scene: self.scene.clone(),
            white_point: self.white_point,
            frames,
            groups,
        };
        let path = dir.join("manifest.json");
        write_atomic(&path, &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Dataset<T>, IoError> {
        let manifest: DatasetManifest =
            serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != DATASET_FORMAT {
            return Err(IoError::Format(format!(
                "expected {DATASET_FORMAT} manifest, got {:?}",
                manifest.format
            )));
        }
        if manifest.version != DATASET_VERSION {
            return Err(IoError::Format(format!(
                "unsupported dataset version {}",
                manifest.version
            )));
        }
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for rec in &manifest.frames {
            let image = pngio::load::<T>(&dir.join(&rec.path))?;
            frames.push(LdrFrame {
                image,
                meta: ExposureMeta::new(rec.exposure_time_s, rec.ev, rec.gamma)?,
                timestamp_us: rec.timestamp_us,
                camera: rec.camera,
                frame_index: rec.frame_index,
            });
        }
        let mut groups = Vec::with_capacity(manifest.groups.len());
        let mut ground_truths = Vec::with_capacity(manifest.groups.len());
        for rec in &manifest.groups {
            for idx in [rec.reference, rec.low, rec.high] {
                if idx >= frames.len() {
                    return Err(IoError::Dataset(format!(
                        "group references frame {idx}, but only {} frames exist",
                        frames.len()
                    )));
                }
            }
            groups.push(GroupIndices { reference: rec.reference, low: rec.low, high: rec.high });
            ground_truths.push(match &rec.ground_truth {
                Some(rel) => Some(pfm::load(&dir.join(rel))?.convert::<T>()),
                None => None,
            });
        }
        Ok(Dataset {
            kind: manifest.kind,
            scene: manifest.scene,
            white_point: manifest.white_point,
            frames,
            groups,
            ground_truths,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameRecord {
    path: String,
    camera: CameraId,
    frame_index: usize,
    ev: i32,
    exposure_time_s: f64,
    gamma: f64,
    timestamp_us: u64,
    bit_depth: Option<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupRecord {
    reference: usize,
    low: usize,
    high: usize,
    ground_truth: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    kind: DatasetKind,
    scene: Scene,
    white_point: f64,
    frames: Vec<FrameRecord>,
    groups: Vec<GroupRecord>,
}

/// Renders ground truth at each group's reference instant. Grouped frames
/// are located in the flat frame list by their (camera, index) identity.
fn attach_ground_truth<T: Scalar>(
    scene: &Scene,
    frames: &[LdrFrame<T>],
    groups: &[FusionGroup<T>],
) -> Result<(Vec<GroupIndices>, Vec<Option<HdrImage<T>>>), IoError> {
    let by_key: BTreeMap<(CameraId, usize), usize> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| ((f.camera, f.frame_index), i))
        .collect();
    let index_of = |needle: &LdrFrame<T>| {
        by_key
            .get(&(needle.camera, needle.frame_index))
            .copied()
            .ok_or_else(|| IoError::Dataset("grouped frame missing from dataset".into()))
    };
    let mut indices = Vec::with_capacity(groups.len());
    let mut gts = Vec::with_capacity(groups.len());
    for g in groups {
        indices.push(GroupIndices {
            reference: index_of(&g.reference)?,
            low: index_of(&g.low)?,
            high: index_of(&g.high)?,
        });
        gts.push(Some(scene.render(g.reference.timestamp_s())));
    }
    Ok((indices, gts))
}

/// Simulates one dataset: captures the stream(s), groups frames into
/// exposure triplets, and renders ground-truth radiance at every reference
/// instant. Identical (scene, kind, params, seed) inputs produce identical
/// datasets.
pub fn simulate_dataset<T: Scalar>(
    scene: &Scene,
    kind: DatasetKind,
    params: &CaptureParams,
    master_seed: u64,
) -> Result<Dataset<T>, IoError> {
    params.validate()?;
    let schedule = |mode: CaptureMode, rate: f64, offset: f64| CaptureSchedule {
        mode,
        ev_cycle: params.ev_cycle(),
        base_exposure_s: params.base_exposure_s,
        frame_rate_hz: rate,
        duration_s: params.duration_s,
        start_offset_s: offset,
        gamma: params.gamma,
    };
    let (frames, groups) = match kind {
        DatasetKind::Ae => {
            let sched = schedule(CaptureMode::Ae, params.reference_rate_hz, 0.0);
            let frames =
                run_schedule::<T>(scene, &sched, &params.noise, params.bit_depth, master_seed)?;
            let groups = ae_group_frames(&frames)?;
            (frames, groups)
        }
        DatasetKind::Dcs => {
            let primary = run_schedule::<T>(
                scene,
                &schedule(CaptureMode::DcsPrimary, params.reference_rate_hz, 0.0),
                &params.noise,
                params.bit_depth,
                master_seed,
            )?;
            let secondary_sched = schedule(
                CaptureMode::DcsSecondary,
                params.secondary_rate_hz,
                params.secondary_offset_s,
            );
            let mut secondary = run_schedule::<T>(
                scene,
                &secondary_sched,
                &params.noise,
                params.bit_depth,
                master_seed,
            )?;
            if params.disparity_px != 0.0 {
                secondary =
                    secondary.iter().map(|f| apply_parallax(f, params.disparity_px)).collect();
            }
            let groups = group_frames(&primary, &secondary)?;
            let mut frames = primary;
            frames.extend(secondary);
            (frames, groups)
        }
    };
    let (indices, gts) = attach_ground_truth(scene, &frames, &groups)?;
    Ok(Dataset {
        kind,
        scene: scene.clone(),
        white_point: scene.peak_radiance,
        frames,
        groups: indices,
        ground_truths: gts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn short_params() -> CaptureParams {
        CaptureParams { duration_s: 1.5, ..CaptureParams::default() }
    }

    #[test]
    fn dcs_quarter_rate_pairing_matches_expected_counts() {
        let scene = Scene::default_dynamic(0);
        let ds = simulate_dataset::<f32>(&scene, DatasetKind::Dcs, &short_params(), 1).unwrap();
        // 12 reference frames, 6 secondary frames -> 3 pairs, 12 groups.
        assert_eq!(ds.stream(CameraId::Primary).len(), 12);
        assert_eq!(ds.stream(CameraId::Secondary).len(), 6);
        assert_eq!(ds.groups.len(), 12);
        let pairs: BTreeSet<(usize, usize)> =
            ds.groups.iter().map(|g| (g.low, g.high)).collect();
        assert_eq!(pairs.len(), 3);
        assert!(ds.ground_truths.iter().all(Option::is_some));
    }

    #[test]
    fn ae_cycle_of_twelve_frames_yields_four_groups() {
        let scene = Scene::default_dynamic(0);
        let ds = simulate_dataset::<f32>(&scene, DatasetKind::Ae, &short_params(), 1).unwrap();
        assert_eq!(ds.frames.len(), 12);
        assert_eq!(ds.groups.len(), 4);
        for g in ds.fusion_groups().unwrap() {
            assert_eq!(g.reference.ev(), 0);
            assert!(g.low.ev() < 0 && g.high.ev() > 0);
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let scene = Scene::default_dynamic(2);
        let ds = simulate_dataset::<f32>(&scene, DatasetKind::Dcs, &short_params(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.kind, ds.kind);
        assert_eq!(back.scene, ds.scene);
        assert_eq!(back.white_point, ds.white_point);
        assert_eq!(back.groups, ds.groups);
        assert_eq!(back.frames.len(), ds.frames.len());
        for (a, b) in ds.frames.iter().zip(&back.frames) {
            assert_eq!(a.image.buf().data(), b.image.buf().data());
            assert_eq!(a.meta, b.meta);
            assert_eq!(a.timestamp_us, b.timestamp_us);
        }
        for (a, b) in ds.ground_truths.iter().zip(&back.ground_truths) {
            assert_eq!(
                a.as_ref().unwrap().buf().data(),
                b.as_ref().unwrap().buf().data()
            );
        }
    }

    #[test]
    fn same_seed_writes_byte_identical_datasets() {
        let scene = Scene::default_dynamic(4);
        let params = short_params();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        simulate_dataset::<f32>(&scene, DatasetKind::Dcs, &params, 5)
            .unwrap()
            .save(d1.path())
            .unwrap();
        simulate_dataset::<f32>(&scene, DatasetKind::Dcs, &params, 5)
            .unwrap()
            .save(d2.path())
            .unwrap();
        for rel in ["manifest.json", "frames/primary_0000.png", "gt/group_0003.pfm"] {
            let a = fs::read(d1.path().join(rel)).unwrap();
            let b = fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identical runs");
        }
    }

    #[test]
    fn disparity_shifts_only_the_secondary_stream() {
        let scene = Scene::default_dynamic(0);
        let base = simulate_dataset::<f32>(&scene, DatasetKind::Dcs, &short_params(), 3).unwrap();
        let shifted_params = CaptureParams { disparity_px: 2.0, ..short_params() };
        let shifted =
            simulate_dataset::<f32>(&scene, DatasetKind::Dcs, &shifted_params, 3).unwrap();
        let (p0, p1) = (base.stream(CameraId::Primary), shifted.stream(CameraId::Primary));
        assert_eq!(p0[0].image.buf().data(), p1[0].image.buf().data());
        let (s0, s1) = (base.stream(CameraId::Secondary), shifted.stream(CameraId::Secondary));
        assert_ne!(s0[0].image.buf().data(), s1[0].image.buf().data());
    }
}
