//! Benchmark construction and evaluation: synthetic scenes, dataset
//! ingestion, degraded benchmark trees, the degradation curriculum, metric
//! tables and the cumulative-degradation ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{train_adapter, AdapterParams, AdapterTrainConfig, TrainOutcome};
use crate::camera::{CameraRecord, CameraView, Pose, Vec3};
use crate::error::{Error, Result};
use crate::imaging::{load_image, psnr, save_image, ssim, Image};
use crate::lowlight::{degrade, sample_params, DegradeParams, LowlightConfig, Role, StageToggles};
use crate::mvs::{reconstruct, PipelineConfig, DEFAULT_BACKGROUND};
use crate::render::render;
use crate::rng::{SeededRng, StreamId};
use crate::scene::{dc_from_color, sh_coeff_count, GaussianPrimitive, GaussianScene};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitConfig {
    pub radius: f64,
    /// Angular span of the orbit; the two context views sit at its ends.
    pub arc_deg: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        OrbitConfig {
            radius: 3.0,
            arc_deg: 30.0,
            elevation_deg: 15.0,
            fov_deg: 50.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_gaussians: usize,
    pub n_views: usize,
    pub size: usize,
    pub sh_degree: usize,
    pub background: [f64; 3],
    /// Adds a wall of Gaussians behind the box that fills every view.
    pub backdrop: bool,
    pub orbit: OrbitConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_gaussians: 80,
            n_views: 4,
            size: 64,
            sh_degree: 1,
            background: DEFAULT_BACKGROUND,
            backdrop: false,
            orbit: OrbitConfig::default(),
        }
    }
}

impl SynthConfig {
    /// Ray-distance range that brackets the scene from every orbit camera.
    pub fn depth_range(&self) -> (f64, f64) {
        let far = if self.backdrop {
            // Corner rays reach the wall at reach / cos(half diagonal fov).
            let diag = (2f64.sqrt() * (0.5 * self.orbit.fov_deg).to_radians().tan()).atan();
            1.1 * (BACKDROP_DEPTH + self.orbit.radius) / diag.cos()
        } else {
            self.orbit.radius + 1.0
        };
        (self.orbit.radius - 1.0, far)
    }
}

/// Distance of the backdrop wall behind the box center.
pub const BACKDROP_DEPTH: f64 = 1.5;

fn backdrop(cfg: &SynthConfig, rng: &mut SeededRng, scene: &mut GaussianScene) -> Result<()> {
    let n_sh = 3 * sh_coeff_count(cfg.sh_degree);
    let reach = BACKDROP_DEPTH + cfg.orbit.radius;
    let half_fov = (0.5 * cfg.orbit.fov_deg).to_radians();
    let half_arc = (0.5 * cfg.orbit.arc_deg).to_radians();
    let half = reach * (half_fov + half_arc).tan() + 0.5;
    let cells = 16;
    let pitch = 2.0 * half / cells as f64;
    for j in 0..cells {
        for i in 0..cells {
            let x = -half + (i as f64 + 0.5) * pitch;
            let y = -half + (j as f64 + 0.5) * pitch;
            let mean = Vec3::new(
                x + rng.uniform(-0.25, 0.25) * pitch,
                y + rng.uniform(-0.25, 0.25) * pitch,
                BACKDROP_DEPTH + rng.uniform(-0.05, 0.05),
            );
            let log_scale = Vec3::new(
                (pitch * rng.uniform(0.5, 0.8)).ln(),
                (pitch * rng.uniform(0.5, 0.8)).ln(),
                (0.1 * pitch).ln(),
            );
            let mut sh = vec![0.0; n_sh];
            for c in 0..3 {
                sh[c] = dc_from_color(rng.uniform(0.2, 0.8));
            }
            let q = [1.0, 0.0, 0.0, rng.uniform(-0.5, 0.5)];
            scene.push(GaussianPrimitive::new(mean, log_scale, q, sh, 4.0)?)?;
        }
    }
    Ok(())
}

/// An image with its camera, role and name, held in memory.
#[derive(Clone, Debug)]
pub struct SceneView {
    pub name: String,
    pub image: Image,
    pub camera: CameraView,
    pub role: Role,
}

#[derive(Clone, Debug)]
pub struct SceneData {
    pub id: String,
    pub views: Vec<SceneView>,
}

impl SceneData {
    pub fn contexts(&self) -> Vec<(Image, CameraView)> {
        self.with_role(Role::Context)
    }

    pub fn targets(&self) -> Vec<&SceneView> {
        self.views.iter().filter(|v| v.role == Role::Target).collect()
    }

    fn with_role(&self, role: Role) -> Vec<(Image, CameraView)> {
        self.views
            .iter()
            .filter(|v| v.role == role)
            .map(|v| (v.image.clone(), v.camera))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub truth: GaussianScene,
    pub data: SceneData,
}

/// Cameras on a horizontal arc around the origin; views 0 and 1 are the arc
/// ends, the remaining views are spread over its interior.
pub fn orbit_cameras(orbit: &OrbitConfig, n_views: usize, size: usize) -> Result<Vec<CameraView>> {
    let arc = orbit.arc_deg.to_radians();
    let elev = orbit.elevation_deg.to_radians();
    let n = n_views.max(2);
    let angle = |k: usize| -0.5 * arc + arc * k as f64 / (n - 1) as f64;
    let mut order = vec![0, n - 1];
    order.extend(1..n - 1);
    order
        .into_iter()
        .take(n_views)
        .map(|k| {
            let a = angle(k);
            let eye = Vec3::new(
                orbit.radius * elev.cos() * a.sin(),
                -orbit.radius * elev.sin(),
                -orbit.radius * elev.cos() * a.cos(),
            );
            let pose = Pose::look_at(eye, Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0))?;
            CameraView::with_fov(pose, size, size, orbit.fov_deg)
        })
        .collect()
}

/// Random colored Gaussians inside the unit box (optionally in front of a
/// backdrop wall), rendered from an orbit.
pub fn synth_scene(seed: u64, cfg: &SynthConfig) -> Result<SynthScene> {
    if cfg.n_gaussians == 0 {
        return Err(Error::invalid("synthetic scene needs at least one Gaussian"));
    }
    if cfg.n_views < 3 {
        return Err(Error::invalid(format!("synthetic scene needs at least 3 views, got {}", cfg.n_views)));
    }
    let id = format!("synth_{seed:06}");
    let mut rng = SeededRng::for_view(seed, "synth-scene", 0);
    let n_sh = 3 * sh_coeff_count(cfg.sh_degree);
    let mut truth = GaussianScene::new(cfg.sh_degree)?;
    for _ in 0..cfg.n_gaussians {
        let mean = Vec3::new(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
        let log_scale = Vec3::new(
            rng.uniform(0.05f64.ln(), 0.16f64.ln()),
            rng.uniform(0.05f64.ln(), 0.16f64.ln()),
            rng.uniform(0.05f64.ln(), 0.16f64.ln()),
        );
        let q = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
        let mut sh = vec![0.0; n_sh];
        for c in 0..3 {
            sh[c] = dc_from_color(rng.uniform(0.15, 0.95));
        }
        for v in sh.iter_mut().skip(3) {
            *v = rng.uniform(-0.05, 0.05);
        }
        let opacity_logit = rng.uniform(0.5, 3.0);
        truth.push(GaussianPrimitive::new(mean, log_scale, q, sh, opacity_logit)?)?;
    }
    if cfg.backdrop {
        backdrop(cfg, &mut rng, &mut truth)?;
    }
    let cams = orbit_cameras(&cfg.orbit, cfg.n_views, cfg.size)?;
    let views = cams
        .into_iter()
        .enumerate()
        .map(|(i, camera)| SceneView {
            name: format!("view_{i:03}"),
            image: render(&truth, &camera, cfg.background).image,
            camera,
            role: if i < 2 { Role::Context } else { Role::Target },
        })
        .collect();
    Ok(SynthScene {
        truth,
        data: SceneData { id, views },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub name: String,
    /// Image path relative to the manifest's directory.
    pub image: String,
    pub camera: CameraRecord,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degrade: Option<DegradeParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    pub views: Vec<ViewRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lowlight: Option<LowlightConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Level>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<StageToggles>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SceneManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: SceneManifest = serde_json::from_str(&text).map_err(|e| Error::CorruptData {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::Unwritable {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn image_path(&self, view: &ViewRecord) -> PathBuf {
        self.base_dir.join(&view.image)
    }

    pub fn count(&self, role: Role) -> usize {
        self.views.iter().filter(|v| v.role == role).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count(Role::Context) < 2 || self.count(Role::Target) < 1 {
            return Err(Error::invalid(format!(
                "scene {} needs at least two context views and one target view",
                self.scene_id
            )));
        }
        Ok(())
    }

    pub fn load(&self) -> Result<SceneData> {
        let views = self
            .views
            .iter()
            .map(|v| {
                let image = load_image(self.image_path(v))?;
                let camera = CameraView::try_from(&v.camera)?;
                if image.width() != camera.width || image.height() != camera.height {
                    return Err(Error::DimensionMismatch(format!(
                        "view {} is {}x{} but its camera is {}x{}",
                        v.name,
                        image.width(),
                        image.height(),
                        camera.width,
                        camera.height
                    )));
                }
                Ok(SceneView {
                    name: v.name.clone(),
                    image,
                    camera,
                    role: v.role,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SceneData {
            id: self.scene_id.clone(),
            views,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub name: String,
    #[serde(flatten)]
    pub camera: CameraRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
}

/// Writes a scene in the dataset layout (`images/<view>.png` plus
/// `cameras.json`) and returns its manifest.
pub fn write_scene(scene: &SceneData, root: impl AsRef<Path>) -> Result<SceneManifest> {
    let dir = root.as_ref().join(&scene.id);
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::Unwritable {
        path: images.clone(),
        source: e,
    })?;
    let mut entries = Vec::with_capacity(scene.views.len());
    let mut records = Vec::with_capacity(scene.views.len());
    for v in &scene.views {
        let rel = format!("{IMAGES_DIR}/{}.png", v.name);
        save_image(&v.image, dir.join(&rel))?;
        let camera = CameraRecord::from(&v.camera);
        entries.push(CameraEntry {
            name: v.name.clone(),
            camera: camera.clone(),
            role: Some(v.role),
        });
        records.push(ViewRecord {
            name: v.name.clone(),
            image: rel,
            camera,
            role: v.role,
            degrade: None,
            stream: None,
        });
    }
    let cams_path = dir.join(CAMERAS_FILE);
    fs::write(&cams_path, serde_json::to_string_pretty(&entries).expect("cameras serialize") + "\n").map_err(|e| {
        Error::Unwritable {
            path: cams_path.clone(),
            source: e,
        }
    })?;
    Ok(SceneManifest {
        scene_id: scene.id.clone(),
        views: records,
        seed: None,
        lowlight: None,
        level: None,
        stages: None,
        base_dir: dir,
    })
}

#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub manifests: Vec<SceneManifest>,
    /// `(scene id, reason)` for every skipped scene.
    pub skipped: Vec<(String, String)>,
}

fn ingest_scene(dir: &Path, id: &str) -> std::result::Result<SceneManifest, String> {
    let cams_path = dir.join(CAMERAS_FILE);
    let text = fs::read_to_string(&cams_path).map_err(|_| format!("missing {CAMERAS_FILE}"))?;
    let entries: Vec<CameraEntry> =
        serde_json::from_str(&text).map_err(|e| format!("malformed {CAMERAS_FILE}: {e}"))?;
    let mut images: Vec<String> = fs::read_dir(dir.join(IMAGES_DIR))
        .map_err(|_| format!("missing {IMAGES_DIR}/ directory"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|x| x.to_str()) == Some("png"))
                .then(|| p.file_stem().and_then(|s| s.to_str()).map(str::to_owned))
                .flatten()
        })
        .collect();
    images.sort();
    let by_name: BTreeMap<&str, &CameraEntry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    if by_name.len() != entries.len() {
        return Err("duplicate view names in camera file".into());
    }
    for name in &images {
        if !by_name.contains_key(name.as_str()) {
            return Err(format!("view {name} has no camera entry"));
        }
    }
    for e in &entries {
        if images.binary_search(&e.name).is_err() {
            return Err(format!("camera entry {} has no image", e.name));
        }
    }
    let views: Vec<ViewRecord> = images
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let e = by_name[name.as_str()];
            ViewRecord {
                name: name.clone(),
                image: format!("{IMAGES_DIR}/{name}.png"),
                camera: e.camera.clone(),
                role: e.role.unwrap_or(if i < 2 { Role::Context } else { Role::Target }),
                degrade: None,
                stream: None,
            }
        })
        .collect();
    for v in &views {
        CameraView::try_from(&v.camera).map_err(|e| format!("view {}: {e}", v.name))?;
    }
    let m = SceneManifest {
        scene_id: id.to_owned(),
        views,
        seed: None,
        lowlight: None,
        level: None,
        stages: None,
        base_dir: dir.to_path_buf(),
    };
    m.validate().map_err(|e| e.to_string())?;
    Ok(m)
}

/// Ingests a single `<scene>/` directory in the dataset layout.
pub fn ingest_scene_dir(dir: impl AsRef<Path>) -> Result<SceneManifest> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("scene")
        .to_owned();
    ingest_scene(dir, &id).map_err(|reason| Error::CorruptData {
        path: dir.to_path_buf(),
        reason,
    })
}

/// A manifest file, a directory holding `manifest.json`, or a scene
/// directory in the dataset layout.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<SceneManifest> {
    let path = path.as_ref();
    if path.is_file() {
        return SceneManifest::read(path);
    }
    if path.join(MANIFEST_FILE).is_file() {
        return SceneManifest::read(path.join(MANIFEST_FILE));
    }
    ingest_scene_dir(path)
}

/// Reads `<root>/<scene>/images/*.png` + `<root>/<scene>/cameras.json` for
/// every scene directory, in lexicographic order. Invalid scenes are skipped
/// with a warning.
pub fn ingest_dataset(root: impl AsRef<Path>) -> Result<Ingested> {
    let root = root.as_ref();
    let mut dirs: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(|n| (n.to_owned(), e.path())))
        .collect();
    dirs.sort();
    let mut out = Ingested::default();
    for (id, dir) in dirs {
        match ingest_scene(&dir, &id) {
            Ok(m) => out.manifests.push(m),
            Err(reason) => {
                log::warn!("skipping scene {id}: {reason}");
                out.skipped.push((id, reason));
            }
        }
    }
    Ok(out)
}

/// Degradation level; rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Clean,
    Gamma,
    Exposure,
    Shift,
    Blur,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelMode {
    /// Each level adds its stage to all earlier ones.
    Cumulative,
    /// Each level enables only its own stage.
    Isolated,
}

impl Level {
    pub const ALL: [Level; 5] = [Level::Clean, Level::Gamma, Level::Exposure, Level::Shift, Level::Blur];

    pub fn label(self) -> &'static str {
        match self {
            Level::Clean => "Clean",
            Level::Gamma => "+Gamma",
            Level::Exposure => "+Exposure",
            Level::Shift => "+Shift",
            Level::Blur => "+Blur",
        }
    }

    pub fn parse(s: &str) -> Result<Level> {
        let t = s.trim().trim_start_matches('+').to_ascii_lowercase();
        Ok(match t.as_str() {
            "clean" => Level::Clean,
            "gamma" => Level::Gamma,
            "exposure" => Level::Exposure,
            "shift" => Level::Shift,
            "blur" => Level::Blur,
            _ => return Err(Error::InvalidConfig(format!("unknown degradation level {s:?}"))),
        })
    }

    pub fn stages(self, mode: LevelMode) -> StageToggles {
        let rank = self as usize;
        let on = |stage: usize| match mode {
            LevelMode::Cumulative => stage <= rank,
            LevelMode::Isolated => stage == rank,
        };
        StageToggles {
            gamma: on(1),
            exposure: on(2),
            shift: on(3),
            blur: on(4),
        }
    }
}

/// Context view degraded with its provenance.
#[derive(Clone, Debug)]
pub struct DegradedScene {
    pub data: SceneData,
    pub params: Vec<Option<DegradeParams>>,
    pub streams: Vec<StreamId>,
}

/// Degrades the context views of `scene`. Parameters are drawn on the
/// `(seed, scene id, view index)` stream regardless of `stages`, so every
/// level of the ablation sees the same draws.
pub fn degrade_scene(scene: &SceneData, cfg: &LowlightConfig, seed: u64, stages: StageToggles) -> Result<DegradedScene> {
    cfg.validate()?;
    let mut data = scene.clone();
    let mut params = Vec::with_capacity(scene.views.len());
    let mut streams = Vec::with_capacity(scene.views.len());
    for (i, v) in data.views.iter_mut().enumerate() {
        let stream = StreamId::new(scene.id.clone(), i as u64);
        if v.role == Role::Context {
            let p = sample_params(cfg, &mut SeededRng::new(seed, stream.clone()));
            if stages != StageToggles::NONE {
                v.image = degrade(&v.image, &p, stages)?;
            }
            params.push(Some(p));
        } else {
            params.push(None);
        }
        streams.push(stream);
    }
    Ok(DegradedScene { data, params, streams })
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).map(|_| ()).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(from.to_path_buf()),
        _ => Error::Unwritable {
            path: to.to_path_buf(),
            source: e,
        },
    })
}

/// Writes `<out>/<scene>/images/*.png`, `cameras.json` and `manifest.json`
/// for every scene: degraded contexts, byte-for-byte copies of targets (and of
/// contexts when no stage is enabled).
pub fn build_benchmark(
    manifests: &[SceneManifest],
    cfg: &LowlightConfig,
    seed: u64,
    out: impl AsRef<Path>,
    level: Level,
    mode: LevelMode,
) -> Result<Vec<SceneManifest>> {
    cfg.validate()?;
    let out = out.as_ref();
    let stages = level.stages(mode);
    manifests
        .par_iter()
        .map(|m| {
            let scene = m.load()?;
            let degraded = degrade_scene(&scene, cfg, seed, stages)?;
            let dir = out.join(&m.scene_id);
            let images = dir.join(IMAGES_DIR);
            fs::create_dir_all(&images).map_err(|e| Error::Unwritable {
                path: images.clone(),
                source: e,
            })?;
            let mut views = Vec::with_capacity(m.views.len());
            let mut entries = Vec::with_capacity(m.views.len());
            for (i, rec) in m.views.iter().enumerate() {
                let rel = format!("{IMAGES_DIR}/{}.png", rec.name);
                let dst = dir.join(&rel);
                if rec.role == Role::Target || stages == StageToggles::NONE {
                    copy_file(&m.image_path(rec), &dst)?;
                } else {
                    save_image(&degraded.data.views[i].image, &dst)?;
                }
                entries.push(CameraEntry {
                    name: rec.name.clone(),
                    camera: rec.camera.clone(),
                    role: Some(rec.role),
                });
                views.push(ViewRecord {
                    name: rec.name.clone(),
                    image: rel,
                    camera: rec.camera.clone(),
                    role: rec.role,
                    degrade: degraded.params[i].clone(),
                    stream: Some(degraded.streams[i].clone()),
                });
            }
            let cams_path = dir.join(CAMERAS_FILE);
            fs::write(&cams_path, serde_json::to_string_pretty(&entries).expect("cameras serialize") + "\n")
                .map_err(|e| Error::Unwritable {
                    path: cams_path.clone(),
                    source: e,
                })?;
            let manifest = SceneManifest {
                scene_id: m.scene_id.clone(),
                views,
                seed: Some(seed),
                lowlight: Some(cfg.clone()),
                level: Some(level),
                stages: Some(stages),
                base_dir: dir.clone(),
            };
            manifest.write(dir.join(MANIFEST_FILE))?;
            Ok(manifest)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Interpolation {
    Linear,
    /// `stairs` equal plateaus between `p_start` and `p_end`.
    StepWise { stairs: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub p_start: f64,
    pub p_end: f64,
    pub warmup: usize,
    pub total: usize,
    pub interpolation: Interpolation,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            p_start: 0.3,
            p_end: 1.0,
            warmup: 0,
            total: 4,
            interpolation: Interpolation::Linear,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.p_start)
            && (0.0..=1.0).contains(&self.p_end)
            && self.p_start <= self.p_end
            && self.warmup <= self.total;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid curriculum schedule {self:?}")));
        }
        if let Interpolation::StepWise { stairs: 0 } = self.interpolation {
            return Err(Error::InvalidConfig("step-wise curriculum needs at least one stair".into()));
        }
        Ok(())
    }
}

pub fn curriculum_p(step: usize, s: &CurriculumSchedule) -> f64 {
    if step < s.warmup {
        return s.p_start;
    }
    if step >= s.total {
        return s.p_end;
    }
    let t = (step - s.warmup) as f64 / (s.total - s.warmup) as f64;
    let t = match s.interpolation {
        Interpolation::Linear => t,
        Interpolation::StepWise { stairs } => (t * stairs as f64).floor() / stairs as f64,
    };
    (s.p_start + t * (s.p_end - s.p_start)).clamp(s.p_start, s.p_end)
}

/// `(lowlight context, clean context)` training pairs. Curriculum step `k`
/// contributes one draw of every context view with degradation probability
/// `curriculum_p(k)`, so the pool mixes clean and degraded inputs in the
/// proportions the schedule passes through.
pub fn curriculum_pairs(
    scenes: &[SceneData],
    lowlight: &LowlightConfig,
    schedule: &CurriculumSchedule,
    seed: u64,
) -> Result<Vec<(Image, Image)>> {
    schedule.validate()?;
    let mut pairs = Vec::new();
    for step in 0..schedule.total.max(1) {
        let cfg = LowlightConfig {
            probability: curriculum_p(step, schedule),
            ..lowlight.clone()
        };
        for scene in scenes {
            let tagged = SceneData {
                id: format!("{}#curriculum{step}", scene.id),
                views: scene.views.clone(),
            };
            let d = degrade_scene(&tagged, &cfg, seed, cfg.stages)?;
            for (v, clean) in d.data.views.iter().zip(&scene.views) {
                if v.role == Role::Context {
                    pairs.push((v.image.clone(), clean.image.clone()));
                }
            }
        }
    }
    Ok(pairs)
}

pub fn train_adapter_on_scenes(
    scenes: &[SceneData],
    lowlight: &LowlightConfig,
    schedule: &CurriculumSchedule,
    train: &AdapterTrainConfig,
    init: &AdapterParams,
    seed: u64,
) -> Result<TrainOutcome> {
    let pairs = curriculum_pairs(scenes, lowlight, schedule, seed)?;
    train_adapter(&pairs, init.clone(), train)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetric {
    pub condition: String,
    pub scene: String,
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetric {
    pub scene: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub condition: String,
    pub psnr: f64,
    pub ssim: f64,
    pub per_scene: Vec<SceneMetric>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub views: Vec<ViewMetric>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl MetricsTable {
    pub fn row(&self, condition: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    /// Appends another table's rows and views.
    pub fn append(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
        self.views.extend(other.views);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,scene,view,psnr,ssim\n");
        for v in &self.views {
            let _ = writeln!(s, "{},{},{},{:.6},{:.6}", v.condition, v.scene, v.view, v.psnr, v.ssim);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.condition.len()).max().unwrap_or(0).max(9);
        let mut s = format!("{:<width$}  {:>8}  {:>6}  scenes\n", "condition", "PSNR", "SSIM");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>8.3}  {:>6.4}  {}", r.condition, r.psnr, r.ssim, r.per_scene.len());
        }
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, body) in [("metrics.csv", self.to_csv()), ("metrics.txt", self.to_text())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::Unwritable { path: p.clone(), source: e })?;
        }
        Ok(())
    }
}

/// Key for per-view predictions and targets: `(scene id, view name)`.
pub type ViewKey = (String, String);

/// PSNR/SSIM of each target against its prediction, averaged per scene and
/// then across scenes.
pub fn evaluate(
    condition: &str,
    predictions: &BTreeMap<ViewKey, Image>,
    targets: &BTreeMap<ViewKey, Image>,
) -> Result<MetricsTable> {
    let views: Vec<ViewMetric> = targets
        .iter()
        .map(|((scene, view), target)| {
            let pred = predictions
                .get(&(scene.clone(), view.clone()))
                .ok_or_else(|| Error::EmptyInput(format!("no prediction for scene {scene} view {view}")))?;
            Ok(ViewMetric {
                condition: condition.to_owned(),
                scene: scene.clone(),
                view: view.clone(),
                psnr: psnr(pred, target)?,
                ssim: ssim(pred, target)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut by_scene: BTreeMap<&str, Vec<&ViewMetric>> = BTreeMap::new();
    for v in &views {
        by_scene.entry(v.scene.as_str()).or_default().push(v);
    }
    let per_scene: Vec<SceneMetric> = by_scene
        .into_iter()
        .map(|(scene, vs)| SceneMetric {
            scene: scene.to_owned(),
            psnr: mean(vs.iter().map(|v| v.psnr)),
            ssim: mean(vs.iter().map(|v| v.ssim)),
        })
        .collect();
    let row = MetricsRow {
        condition: condition.to_owned(),
        psnr: mean(per_scene.iter().map(|s| s.psnr)),
        ssim: mean(per_scene.iter().map(|s| s.ssim)),
        per_scene,
    };
    Ok(MetricsTable { rows: vec![row], views })
}

fn collect_pngs(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_pngs(root, &p, out)?;
        } else if p.extension().and_then(|x| x.to_str()) == Some("png") {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Loads every PNG under `dir`, keyed by `(first path component, file stem)`.
pub fn load_view_tree(dir: impl AsRef<Path>) -> Result<BTreeMap<ViewKey, Image>> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    collect_pngs(dir, dir, &mut files)?;
    files.sort();
    let mut out = BTreeMap::new();
    for rel in files {
        let scene = if rel.components().count() > 1 {
            rel.components().next().unwrap().as_os_str().to_string_lossy().into_owned()
        } else {
            String::new()
        };
        let view = rel.file_stem().unwrap().to_string_lossy().into_owned();
        let key = (scene, view);
        if out.contains_key(&key) {
            return Err(Error::invalid(format!("duplicate view {key:?} under {}", dir.display())));
        }
        out.insert(key, load_image(dir.join(&rel))?);
    }
    Ok(out)
}

/// Reconstructs from the (two) context views and renders every target.
pub fn predict_targets(
    scene: &SceneData,
    adapter: Option<&AdapterParams>,
    pipeline: &PipelineConfig,
) -> Result<BTreeMap<ViewKey, Image>> {
    let rec = reconstruct(&scene.contexts(), adapter, pipeline, None)?;
    Ok(scene
        .targets()
        .into_iter()
        .map(|t| {
            (
                (scene.id.clone(), t.name.clone()),
                render(&rec.scene, &t.camera, pipeline.refine.background).image,
            )
        })
        .collect())
}

pub fn target_map(scenes: &[SceneData]) -> BTreeMap<ViewKey, Image> {
    scenes
        .iter()
        .flat_map(|s| s.targets().into_iter().map(|t| ((s.id.clone(), t.name.clone()), t.image.clone())))
        .collect()
}

/// Degrades contexts at `stages`, reconstructs every scene and evaluates the
/// renders against the clean targets.
pub fn run_condition(
    condition: &str,
    scenes: &[SceneData],
    stages: StageToggles,
    adapter: Option<&AdapterParams>,
    pipeline: &PipelineConfig,
    lowlight: &LowlightConfig,
    seed: u64,
) -> Result<MetricsTable> {
    let preds: Vec<BTreeMap<ViewKey, Image>> = scenes
        .par_iter()
        .map(|s| {
            let d = degrade_scene(s, lowlight, seed, stages)?;
            predict_targets(&d.data, adapter, pipeline)
        })
        .collect::<Result<_>>()?;
    let predictions = preds.into_iter().flatten().collect();
    evaluate(condition, &predictions, &target_map(scenes))
}

/// One table row per degradation level, Clean first.
pub fn ablation_run(
    scenes: &[SceneData],
    pipeline: &PipelineConfig,
    lowlight: &LowlightConfig,
    adapter: Option<&AdapterParams>,
    mode: LevelMode,
    seed: u64,
) -> Result<MetricsTable> {
    let mut table = MetricsTable::default();
    for level in Level::ALL {
        table.append(run_condition(
            level.label(),
            scenes,
            level.stages(mode),
            adapter,
            pipeline,
            lowlight,
            seed,
        )?);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_stages() {
        assert_eq!(Level::Clean.stages(LevelMode::Cumulative), StageToggles::NONE);
        assert_eq!(Level::Blur.stages(LevelMode::Cumulative), StageToggles::ALL);
        let s = Level::Shift.stages(LevelMode::Cumulative);
        assert!(s.gamma && s.exposure && s.shift && !s.blur);
        let s = Level::Exposure.stages(LevelMode::Isolated);
        assert!(!s.gamma && s.exposure && !s.shift && !s.blur);
        for l in Level::ALL {
            assert_eq!(Level::parse(l.label()).unwrap(), l);
        }
        assert!(Level::parse("dark").is_err());
    }

    #[test]
    fn curriculum_closed_forms() {
        let s = CurriculumSchedule {
            p_start: 0.2,
            p_end: 0.8,
            warmup: 10,
            total: 30,
            interpolation: Interpolation::Linear,
        };
        assert_eq!(curriculum_p(0, &s), 0.2);
        assert_eq!(curriculum_p(9, &s), 0.2);
        assert!((curriculum_p(20, &s) - 0.5).abs() < 1e-15);
        assert_eq!(curriculum_p(30, &s), 0.8);
        assert_eq!(curriculum_p(1000, &s), 0.8);
        let stairs = CurriculumSchedule {
            interpolation: Interpolation::StepWise { stairs: 2 },
            ..s
        };
        assert_eq!(curriculum_p(19, &stairs), 0.2);
        assert!((curriculum_p(20, &stairs) - 0.5).abs() < 1e-15);
        let mut prev = 0.0;
        for step in 0..40 {
            for sched in [s, stairs] {
                let p = curriculum_p(step, &sched);
                assert!((0.2..=0.8).contains(&p));
            }
            let p = curriculum_p(step, &s);
            assert!(p >= prev);
            prev = p;
        }
    }

    #[test]
    fn synth_roles_and_determinism() {
        let cfg = SynthConfig {
            n_gaussians: 12,
            n_views: 3,
            size: 24,
            ..SynthConfig::default()
        };
        let a = synth_scene(4, &cfg).unwrap();
        let b = synth_scene(4, &cfg).unwrap();
        assert_eq!(a.truth.to_text(), b.truth.to_text());
        let roles: Vec<Role> = a.data.views.iter().map(|v| v.role).collect();
        assert_eq!(roles, vec![Role::Context, Role::Context, Role::Target]);
        for (va, vb) in a.data.views.iter().zip(&b.data.views) {
            assert_eq!(va.image, vb.image);
        }
        assert!(synth_scene(4, &SynthConfig { n_views: 2, ..cfg.clone() }).is_err());
        assert!(synth_scene(4, &SynthConfig { n_gaussians: 0, ..cfg }).is_err());
    }

    #[test]
    fn metrics_closed_forms() {
        let t = Image::from_fn(16, 16, |x, y| [0.1 + 0.02 * x as f64, 0.2 + 0.01 * y as f64, 0.5]);
        let key = ("s".to_string(), "v".to_string());
        let targets: BTreeMap<_, _> = [(key.clone(), t.clone())].into();
        let same = evaluate("c", &targets, &targets).unwrap();
        assert_eq!(same.rows[0].psnr, 99.0);
        assert!((same.rows[0].ssim - 1.0).abs() < 1e-12);
        let shifted: BTreeMap<_, _> = [(key, t.map(|v| v + 0.1))].into();
        let r = evaluate("c", &shifted, &targets).unwrap();
        assert!((r.rows[0].psnr - 20.0).abs() < 1e-9);
        assert!(evaluate("c", &BTreeMap::new(), &targets).is_err());
    }
}
