//! Deterministic synthetic multi-camera scenes.
//!
//! Each scene holds two frames of boxes seen by a ring of outward-facing
//! cameras, the ego motion between them, and per-camera feature maps that
//! stand in for an image encoder: every visible object leaves a Gaussian
//! splat at the projection of its center whose channels describe it.

mod io;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{generate_prev_gt, wrap_angle, Box3D, SceneBounds};
use crate::geometry::{self, Camera, CameraRig, DepthSpacing, EgoMotion, Extrinsics, GeometryError, Intrinsics};
use crate::tensor::Tensor;

pub use io::{load_scene, read_blob, save_scene, write_blob, BLOB_MAGIC, BLOB_VERSION, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum ScenegenError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: unsupported schema version {found} (expected {expected})")]
    Schema { path: String, found: u32, expected: u32 },
    #[error("{path}: {message}")]
    Blob { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ScenegenError> = std::result::Result<T, E>;

/// Nominal (w, l, h) per class; sampled sizes jitter around these.
const CLASS_SIZES: [[f64; 3]; 4] = [[1.0, 2.0, 1.0], [0.5, 0.5, 1.2], [0.6, 1.4, 0.9], [1.2, 1.2, 0.6]];
/// Inverse-depth amplitude is `DEPTH_GAIN / depth`.
const DEPTH_GAIN: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub bounds: SceneBounds,
    /// Objects keep at least this planar distance from the ego origin.
    pub min_range: f64,
    /// Allowed object center heights.
    pub object_z: [f64; 2],
    pub cameras: usize,
    pub ring_radius: f64,
    pub camera_height: f64,
    pub hfov_deg: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub depth_range: [f64; 2],
    pub depth_bins: usize,
    pub depth_spacing: DepthSpacing,
    /// Inclusive object count range.
    pub objects: [usize; 2],
    pub classes: usize,
    /// Maximum object speed, m/s.
    pub max_speed: f64,
    /// Maximum ego speed, m/s, and yaw rate, rad/s.
    pub max_ego_speed: f64,
    pub max_ego_yaw_rate: f64,
    /// Seconds between the two frames.
    pub dt: f64,
    pub background_noise: f64,
    /// Splat standard deviation in pixels.
    pub splat_sigma: f64,
    /// Pixels whose splat weight reaches this value carry the object code.
    pub splat_cutoff: f64,
    /// Noise on the velocity channels, m/s.
    pub velocity_code_noise: f64,
    /// Noise on the center channels, meters.
    pub center_code_noise: f64,
    /// First scene seed of a dataset; scene `i` uses `seed + i`.
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            bounds: SceneBounds {
                min: [-10.0, -10.0, 0.0],
                max: [10.0, 10.0, 2.0],
            },
            min_range: 2.5,
            object_z: [0.5, 1.5],
            cameras: 4,
            ring_radius: 0.5,
            camera_height: 1.0,
            hfov_deg: 100.0,
            height: 4,
            width: 16,
            channels: 32,
            depth_range: [1.0, 15.0],
            depth_bins: 8,
            depth_spacing: DepthSpacing::LinearIncreasing,
            objects: [1, 4],
            classes: 3,
            max_speed: 2.0,
            max_ego_speed: 3.0,
            max_ego_yaw_rate: 0.3,
            dt: 0.5,
            background_noise: 0.05,
            splat_sigma: 0.8,
            splat_cutoff: 0.3,
            velocity_code_noise: 0.5,
            center_code_noise: 0.3,
            seed: 0,
        }
    }
}

/// Channel offsets of the splat code.
pub struct CodeLayout {
    pub classes: usize,
}

impl CodeLayout {
    pub const INVERSE_DEPTH: usize = 0;
    pub fn class(&self, k: usize) -> usize {
        1 + k
    }
    pub fn log_size(&self) -> usize {
        1 + self.classes
    }
    pub fn heading(&self) -> usize {
        self.log_size() + 3
    }
    pub fn velocity(&self) -> usize {
        self.heading() + 2
    }
    pub fn center(&self) -> usize {
        self.velocity() + 2
    }
    /// Splat weight of the strongest object at the pixel.
    pub fn presence(&self) -> usize {
        self.center() + 3
    }
    pub fn len(&self) -> usize {
        self.presence() + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ScenegenError::Config(m));
        SceneBounds::new(self.bounds.min, self.bounds.max).map_err(|e| ScenegenError::Config(e.to_string()))?;
        if self.cameras == 0 {
            return fail("at least one camera is required".into());
        }
        if self.height == 0 || self.width == 0 {
            return fail("feature extent must be nonempty".into());
        }
        if self.classes == 0 || self.classes > CLASS_SIZES.len() {
            return fail(format!("classes must be in 1..={}", CLASS_SIZES.len()));
        }
        let needed = CodeLayout { classes: self.classes }.len();
        if self.channels < needed {
            return fail(format!(
                "{} channels cannot hold the {needed}-channel object code",
                self.channels
            ));
        }
        if self.objects[0] > self.objects[1] {
            return fail("object count range is reversed".into());
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return fail("horizontal field of view must be in (0, 180) degrees".into());
        }
        if !(self.dt > 0.0) || !(self.splat_sigma > 0.0) {
            return fail("dt and splat_sigma must be positive".into());
        }
        if !(self.splat_cutoff > 0.0 && self.splat_cutoff <= 1.0) {
            return fail("splat_cutoff must be in (0, 1]".into());
        }
        let b = &self.bounds;
        let max_reach = b.min[0].abs().min(b.max[0]).min(b.min[1].abs()).min(b.max[1]);
        if self.min_range >= max_reach {
            return fail("min_range leaves no room for objects".into());
        }
        if self.object_z[0] > self.object_z[1] || self.object_z[0] < b.min[2] || self.object_z[1] > b.max[2] {
            return fail("object_z must lie within the bounds".into());
        }
        for v in [
            self.background_noise,
            self.velocity_code_noise,
            self.center_code_noise,
            self.max_speed,
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail("noise levels and speeds must be nonnegative".into());
            }
        }
        geometry::depth_bins(
            self.depth_range[0],
            self.depth_range[1],
            self.depth_bins,
            self.depth_spacing,
        )?;
        Ok(())
    }

    /// The fixed camera ring shared by both frames.
    pub fn rig(&self) -> Result<CameraRig> {
        let fx = (self.width as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan();
        let k = Intrinsics::new(
            fx,
            fx,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )?;
        let cameras = (0..self.cameras)
            .map(|i| {
                let yaw = std::f64::consts::TAU * i as f64 / self.cameras as f64;
                let pos = Vector3::new(
                    self.ring_radius * yaw.cos(),
                    self.ring_radius * yaw.sin(),
                    self.camera_height,
                );
                Camera {
                    intrinsics: k,
                    extrinsics: Extrinsics::looking_along(pos, yaw),
                }
            })
            .collect();
        let bins = geometry::depth_bins(
            self.depth_range[0],
            self.depth_range[1],
            self.depth_bins,
            self.depth_spacing,
        )?;
        Ok(CameraRig::new(cameras, self.height, self.width, bins)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub boxes: Vec<Box3D>,
    pub rig: CameraRig,
    /// One `[H·W, C]` map per camera.
    pub features: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub current: Frame,
    pub previous: Frame,
    /// Current-frame to previous-frame coordinates.
    pub motion: EgoMotion,
}

fn sample_box(cfg: &SceneConfig, rng: &mut impl Rng) -> Box3D {
    let b = &cfg.bounds;
    let (x, y) = loop {
        let x = rng.random_range(b.min[0]..=b.max[0]);
        let y = rng.random_range(b.min[1]..=b.max[1]);
        if x.hypot(y) >= cfg.min_range {
            break (x, y);
        }
    };
    let class = rng.random_range(0..cfg.classes);
    let nominal = CLASS_SIZES[class];
    let size = nominal.map(|s| s * rng.random_range(0.8..1.2));
    let speed = rng.random_range(0.0..=cfg.max_speed);
    let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    Box3D {
        center: [x, y, rng.random_range(cfg.object_z[0]..=cfg.object_z[1])],
        size,
        yaw: wrap_angle(heading),
        velocity: [speed * heading.cos(), speed * heading.sin()],
        class,
    }
}

fn sample_motion(cfg: &SceneConfig, rng: &mut impl Rng) -> Result<EgoMotion> {
    let yaw = rng.random_range(-1.0..=1.0) * cfg.max_ego_yaw_rate * cfg.dt;
    let forward = rng.random_range(0.0..=cfg.max_ego_speed) * cfg.dt;
    // The ego was behind its current pose, so current points sit further
    // ahead in previous-frame coordinates.
    Ok(EgoMotion::planar(yaw, Vector3::new(forward, 0.0, 0.0), cfg.dt)?)
}

/// A sample is a pure function of `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = sample_motion(cfg, &mut rng)?;
    let count = rng.random_range(cfg.objects[0]..=cfg.objects[1]);
    let mut boxes = Vec::with_capacity(count);
    while boxes.len() < count {
        let b = sample_box(cfg, &mut rng);
        let prev = generate_prev_gt(&[b], &motion)[0];
        let far = |c: [f64; 3]| c[0].hypot(c[1]) >= cfg.min_range;
        if far(prev.center) && cfg.bounds.contains(prev.center) {
            boxes.push(b);
        }
    }
    let previous_boxes = generate_prev_gt(&boxes, &motion);
    let rig = cfg.rig()?;
    let current = render_frame(cfg, &boxes, &rig, &mut rng);
    let previous = render_frame(cfg, &previous_boxes, &rig, &mut rng);
    Ok(SceneSample {
        seed,
        current: Frame {
            boxes,
            rig: rig.clone(),
            features: current,
        },
        previous: Frame {
            boxes: previous_boxes,
            rig,
            features: previous,
        },
        motion,
    })
}

/// The channel code an object writes into the pixels of its splat, without
/// the presence channel. `None` if the center is behind the camera.
pub fn object_code(cfg: &SceneConfig, b: &Box3D, camera: &Camera, rng: &mut impl Rng) -> Option<(f64, f64, Vec<f64>)> {
    let p = camera.extrinsics.apply(&Vector3::from(b.center));
    let (u, v, depth) = geometry::project_to_image(&p, &camera.intrinsics).ok()?;
    let layout = CodeLayout { classes: cfg.classes };
    let noise = |rng: &mut dyn rand::RngCore, sd: f64| {
        if sd > 0.0 {
            Normal::new(0.0, sd).expect("sd").sample(rng)
        } else {
            0.0
        }
    };
    let mut code = vec![0.0; cfg.channels];
    code[CodeLayout::INVERSE_DEPTH] = DEPTH_GAIN / depth;
    code[layout.class(b.class)] = 1.0;
    for k in 0..3 {
        code[layout.log_size() + k] = b.size[k].ln();
    }
    code[layout.heading()] = b.yaw.sin();
    code[layout.heading() + 1] = b.yaw.cos();
    for k in 0..2 {
        code[layout.velocity() + k] = b.velocity[k] + noise(rng, cfg.velocity_code_noise);
    }
    let noisy: [f64; 3] = std::array::from_fn(|k| b.center[k] + noise(rng, cfg.center_code_noise));
    let n = cfg.bounds.normalize(noisy);
    code[layout.center()..layout.center() + 3].copy_from_slice(&n);
    Some((u, v, code))
}

fn render_frame(cfg: &SceneConfig, boxes: &[Box3D], rig: &CameraRig, rng: &mut impl Rng) -> Vec<Tensor> {
    (0..rig.len())
        .map(|n| render_features(cfg, boxes, &rig.cameras[n], rng))
        .collect()
}

/// Feature map `[H·W, C]` of one camera: background noise plus one splat
/// per object in front of the camera.
///
/// A pixel whose strongest splat weight reaches `splat_cutoff` carries that
/// object's code at full amplitude. The weight itself goes to the presence
/// channel.
pub fn render_features(cfg: &SceneConfig, boxes: &[Box3D], camera: &Camera, rng: &mut impl Rng) -> Tensor {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut data = vec![0.0; h * w * c];
    if cfg.background_noise > 0.0 {
        let normal = Normal::new(0.0, cfg.background_noise).expect("sd");
        for v in &mut data {
            *v = normal.sample(rng);
        }
    }
    let presence = CodeLayout { classes: cfg.classes }.presence();
    let reach = 3.0 * cfg.splat_sigma;
    // Strongest splat per pixel: (weight, code).
    let mut best: Vec<Option<(f64, Vec<f64>)>> = vec![None; h * w];
    for b in boxes {
        let Some((u, v, code)) = object_code(cfg, b, camera, rng) else {
            continue;
        };
        if u < -reach || u > w as f64 - 1.0 + reach || v < -reach || v > h as f64 - 1.0 + reach {
            continue;
        }
        for py in 0..h {
            for px in 0..w {
                let d2 = (px as f64 - u).powi(2) + (py as f64 - v).powi(2);
                let s = (-d2 / (2.0 * cfg.splat_sigma * cfg.splat_sigma)).exp();
                let slot = &mut best[py * w + px];
                if s >= 1e-3 && slot.as_ref().is_none_or(|(t, _)| s > *t) {
                    *slot = Some((s, code.clone()));
                }
            }
        }
    }
    for (pixel, slot) in best.into_iter().enumerate() {
        let Some((s, code)) = slot else { continue };
        let cell = &mut data[pixel * c..(pixel + 1) * c];
        if s >= cfg.splat_cutoff {
            for (x, k) in cell.iter_mut().zip(&code) {
                *x += k;
            }
        }
        cell[presence] += s;
    }
    Tensor::new([h * w, c], data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SceneConfig {
        SceneConfig {
            background_noise: 0.0,
            velocity_code_noise: 0.0,
            center_code_noise: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 42).unwrap());
        assert_ne!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 43).unwrap());
    }

    #[test]
    fn empty_scene_is_background_only() {
        let cfg = SceneConfig {
            objects: [0, 0],
            ..quiet()
        };
        let s = generate_scene(&cfg, 1).unwrap();
        assert!(s.current.boxes.is_empty() && s.previous.boxes.is_empty());
        assert!(s.current.features.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn boxes_stay_in_bounds() {
        let cfg = SceneConfig::default();
        for seed in 0..1000 {
            let s = generate_scene(&cfg, seed).unwrap();
            for b in s.current.boxes.iter().chain(&s.previous.boxes) {
                assert!(cfg.bounds.contains(b.center), "seed {seed}: {b:?}");
                b.validate().unwrap();
            }
            assert!(s.current.features.iter().all(|f| f.is_finite()));
        }
    }

    fn single(center: [f64; 3]) -> Box3D {
        Box3D {
            center,
            size: [1.0, 2.0, 1.0],
            yaw: 0.3,
            velocity: [0.5, 0.0],
            class: 1,
        }
    }

    fn energy(f: &Tensor, pixel: usize) -> f64 {
        f.row(pixel).iter().map(|v| v * v).sum()
    }

    #[test]
    fn splat_peaks_at_projected_center() {
        let cfg = quiet();
        let rig = cfg.rig().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for center in [[6.0, 0.5, 1.2], [4.0, -1.5, 0.7], [0.3, 7.0, 1.0]] {
            let b = single(center);
            for cam in &rig.cameras {
                let p = cam.extrinsics.apply(&Vector3::from(center));
                let Ok((u, v, _)) = geometry::project_to_image(&p, &cam.intrinsics) else {
                    continue;
                };
                let (pu, pv) = (u.round(), v.round());
                if pu < 0.0 || pv < 0.0 || pu >= cfg.width as f64 || pv >= cfg.height as f64 {
                    continue;
                }
                let f = render_features(&cfg, &[b], cam, &mut rng);
                let best = (0..rig.pixels())
                    .max_by(|&a, &b| energy(&f, a).total_cmp(&energy(&f, b)))
                    .unwrap();
                assert_eq!(best, pv as usize * cfg.width + pu as usize);
            }
        }
    }

    #[test]
    fn code_is_constant_inside_a_splat() {
        let cfg = quiet();
        let rig = cfg.rig().unwrap();
        let presence = CodeLayout { classes: cfg.classes }.presence();
        let b = single([6.0, 0.5, 1.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut covered = 0;
        for cam in &rig.cameras {
            let Some((_, _, code)) = object_code(&cfg, &b, cam, &mut rng) else {
                continue;
            };
            let f = render_features(&cfg, &[b], cam, &mut rng);
            for p in 0..rig.pixels() {
                let row = f.row(p);
                if row[presence] >= cfg.splat_cutoff {
                    covered += 1;
                    for (k, (&got, &want)) in row.iter().zip(&code).enumerate() {
                        if k != presence {
                            assert_eq!(got, want, "pixel {p} channel {k}");
                        }
                    }
                } else {
                    assert!(row.iter().enumerate().all(|(k, &v)| k == presence || v == 0.0));
                }
            }
        }
        assert!(covered > 0);
    }

    #[test]
    fn overlapping_views_see_the_same_object() {
        // Heading 45° lies in the overlap of the cameras facing 0° and 90°.
        let cfg = quiet();
        let rig = cfg.rig().unwrap();
        let center = [5.0, 5.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = 0;
        for cam in &rig.cameras[..2] {
            let f = render_features(&cfg, &[single(center)], cam, &mut rng);
            let best = (0..rig.pixels())
                .max_by(|&a, &b| energy(&f, a).total_cmp(&energy(&f, b)))
                .unwrap();
            let p = cam.extrinsics.apply(&Vector3::from(center));
            let (u, v, depth) = geometry::project_to_image(&p, &cam.intrinsics).unwrap();
            assert!(energy(&f, best) > 0.0);
            assert!(((best % cfg.width) as f64 - u).abs() <= 1.0 && ((best / cfg.width) as f64 - v).abs() <= 1.0);
            // Un-projecting the exact splat center at the object's depth
            // recovers the box center.
            let k_inv = cam.intrinsics.inverse().unwrap();
            let back = cam.extrinsics.inverse_matrix() * (k_inv * Vector3::new(u * depth, v * depth, depth)).push(1.0);
            for k in 0..3 {
                assert!((back[k] - center[k]).abs() < 1e-6);
            }
            seen += 1;
        }
        assert_eq!(seen, 2);
    }

    #[test]
    fn objects_behind_a_camera_leave_no_trace() {
        let cfg = quiet();
        let rig = cfg.rig().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = render_features(&cfg, &[single([-6.0, 0.0, 1.0])], &rig.cameras[0], &mut rng);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverse_depth_is_linearly_recoverable() {
        let cfg = SceneConfig::default();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for seed in 0..200 {
            let s = generate_scene(&cfg, seed).unwrap();
            for b in &s.current.boxes {
                for (n, cam) in s.current.rig.cameras.iter().enumerate() {
                    let p = cam.extrinsics.apply(&Vector3::from(b.center));
                    let Ok((u, v, depth)) = geometry::project_to_image(&p, &cam.intrinsics) else {
                        continue;
                    };
                    let (pu, pv) = (u.round() as i64, v.round() as i64);
                    if pu < 0
                        || pv < 0
                        || pu >= cfg.width as i64
                        || pv >= cfg.height as i64
                        || s.current.boxes.len() > 1
                    {
                        continue;
                    }
                    let f = &s.current.features[n];
                    xs.push(f.at2(pv as usize * cfg.width + pu as usize, CodeLayout::INVERSE_DEPTH));
                    ys.push(1.0 / depth);
                }
            }
        }
        assert!(xs.len() > 20);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(&xs), mean(&ys));
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let r = cov / (vx * vy).sqrt();
        assert!(r > 0.9, "correlation {r}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            SceneConfig {
                cameras: 0,
                ..Default::default()
            },
            SceneConfig {
                channels: 5,
                ..Default::default()
            },
            SceneConfig {
                objects: [3, 1],
                ..Default::default()
            },
            SceneConfig {
                min_range: 50.0,
                ..Default::default()
            },
            SceneConfig {
                classes: 9,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(generate_scene(&cfg, 0), Err(ScenegenError::Config(_))));
        }
    }
}
