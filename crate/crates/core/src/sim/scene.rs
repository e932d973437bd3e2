//! Declarative scene descriptions.
//!
//! A scene file is TOML with four tables: `[container]` (the target),
//! `[granule]`, `[background]` and an optional `[camera]`. Geometry is in
//! metres, colours are `[r, g, b]` bytes and capacity is a particle count.
//!
//! ```toml
//! scene_id = "S1"
//! [container]
//! kind = "goblet"
//! color = [244, 244, 240]
//! opening_width = 0.10
//! wall_height = 0.07
//! rim_height = 0.17
//! capacity = 300
//! x = 0.30
//! [granule]
//! kind = "lentils"
//! color = [84, 150, 58]
//! count = 240
//! [background]
//! color = [232, 128, 40]
//! texture = "flat"
//! ```
//!
//! The source container is not part of the scene: every scene pours from the
//! same held vessel (see [`SourceVessel`]). Its outflow onset angle depends on
//! the vessel geometry, the current fill level and the granule's repose
//! offset:
//!
//! `onset = repose + atan(2 (H - fill) / W)`
//!
//! where `H`/`W` are the vessel's inner height/width and `fill` the height of
//! the remaining granule column.

use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    Goblet,
    Plate,
    Cup,
    Jar,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GranuleKind {
    Lentils,
    Rice,
    Couscous,
    Coffee,
}

impl GranuleKind {
    /// Integer material code `P`.
    pub fn code(self) -> u8 {
        match self {
            GranuleKind::Lentils => 0,
            GranuleKind::Rice => 1,
            GranuleKind::Couscous => 2,
            GranuleKind::Coffee => 3,
        }
    }

    /// Extra tilt (rad) beyond the geometric spill angle before grains move.
    pub fn repose_offset(self) -> f64 {
        match self {
            GranuleKind::Lentils => 0.06,
            GranuleKind::Rice => 0.09,
            GranuleKind::Couscous => 0.04,
            GranuleKind::Coffee => 0.12,
        }
    }

    /// Particles per second released per radian of tilt past onset.
    pub fn flow_gain(self) -> f64 {
        match self {
            GranuleKind::Lentils => 900.0,
            GranuleKind::Rice => 800.0,
            GranuleKind::Couscous => 1000.0,
            GranuleKind::Coffee => 700.0,
        }
    }

    /// Exit speed along the lip direction (m/s).
    pub fn exit_speed(self) -> f64 {
        match self {
            GranuleKind::Lentils => 0.16,
            GranuleKind::Rice => 0.14,
            GranuleKind::Couscous => 0.18,
            GranuleKind::Coffee => 0.13,
        }
    }
}

pub const MAX_GRANULE_CODE: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Flat,
    TissueNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerSpec {
    pub kind: ContainerKind,
    #[serde(default)]
    pub transparent: bool,
    pub color: [u8; 3],
    pub opening_width: f64,
    /// Depth of the bowl, rim to inner floor.
    pub wall_height: f64,
    /// Height of the rim above the table.
    pub rim_height: f64,
    pub capacity: u32,
    /// Horizontal position of the container centre.
    pub x: f64,
    #[serde(default)]
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GranuleSpec {
    pub kind: GranuleKind,
    pub color: [u8; 3],
    pub count: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub color: [u8; 3],
    pub texture: Texture,
}

/// Fixed orthographic side camera. Depth (`y`) shows up as a scale change
/// about the image centre: `s = depth / (depth + y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSpec {
    pub render_size: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub depth: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec { render_size: 128, x_min: -0.02, x_max: 0.44, z_min: -0.03, z_max: 0.43, depth: 0.6 }
    }
}

/// Start pose of the held vessel and the half-widths of its seeded jitter box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StartSpec {
    pub pose: [f64; 3],
    pub jitter: [f64; 3],
}

impl Default for StartSpec {
    fn default() -> Self {
        StartSpec { pose: [0.10, 0.0, 0.33], jitter: [0.02, 0.008, 0.015] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub scene_id: String,
    pub container: ContainerSpec,
    pub granule: GranuleSpec,
    pub background: BackgroundSpec,
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default)]
    pub start: StartSpec,
}

/// The vessel held by the wrist. Dimensions are inner sizes in metres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceVessel {
    pub width: f64,
    pub height: f64,
    pub wall: f64,
    pub color: [u8; 3],
    /// Fraction of the inner height occupied by a full load.
    pub full_fraction: f64,
}

pub const SOURCE_VESSEL: SourceVessel =
    SourceVessel { width: 0.07, height: 0.10, wall: 0.006, color: [70, 72, 84], full_fraction: 0.6 };

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let scene: SceneConfig = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::Config(format!("{}: {msg}", self.scene_id)));
        let c = &self.container;
        if self.scene_id.is_empty() {
            return Err(SimError::Config("empty scene_id".into()));
        }
        if !(c.opening_width > 0.0 && c.opening_width.is_finite()) {
            return bad("opening_width must be > 0");
        }
        if !(c.wall_height > 0.0 && c.rim_height >= c.wall_height) {
            return bad("need 0 < wall_height <= rim_height");
        }
        if c.capacity == 0 {
            return bad("capacity must be > 0");
        }
        if self.granule.count == 0 {
            return bad("granule count must be > 0");
        }
        let cam = &self.camera;
        if cam.render_size < 8 || cam.x_max <= cam.x_min || cam.z_max <= cam.z_min || cam.depth <= 0.0 {
            return bad("invalid camera");
        }
        if self.start.jitter.iter().any(|j| *j < 0.0) {
            return bad("negative start jitter");
        }
        Ok(())
    }

    /// Capacity bucket: small / medium / big.
    pub fn capacity_bucket(&self) -> u8 {
        match self.container.capacity {
            0..250 => 0,
            250..350 => 1,
            _ => 2,
        }
    }

    /// Task characteristics `[C, P]`, each scaled into [0, 1].
    pub fn task_z(&self) -> [f32; 2] {
        [self.capacity_bucket() as f32 / 2.0, self.granule.kind.code() as f32 / MAX_GRANULE_CODE as f32]
    }

    pub fn with_render_size(mut self, size: usize) -> Self {
        self.camera.render_size = size;
        self
    }
}

const BUNDLED: [(&str, &str); 20] = [
    ("S1", include_str!("../../scenes/S1.toml")),
    ("S2", include_str!("../../scenes/S2.toml")),
    ("S3", include_str!("../../scenes/S3.toml")),
    ("S4", include_str!("../../scenes/S4.toml")),
    ("S5", include_str!("../../scenes/S5.toml")),
    ("S6", include_str!("../../scenes/S6.toml")),
    ("S7", include_str!("../../scenes/S7.toml")),
    ("S8", include_str!("../../scenes/S8.toml")),
    ("S9", include_str!("../../scenes/S9.toml")),
    ("S10", include_str!("../../scenes/S10.toml")),
    ("S11", include_str!("../../scenes/S11.toml")),
    ("S12", include_str!("../../scenes/S12.toml")),
    ("S13", include_str!("../../scenes/S13.toml")),
    ("S14", include_str!("../../scenes/S14.toml")),
    ("S15", include_str!("../../scenes/S15.toml")),
    ("S16", include_str!("../../scenes/S16.toml")),
    ("S17", include_str!("../../scenes/S17.toml")),
    ("S18", include_str!("../../scenes/S18.toml")),
    ("S19", include_str!("../../scenes/S19.toml")),
    ("S20", include_str!("../../scenes/S20.toml")),
];

/// Looks up one of the bundled scenes S1..S20.
pub fn bundled_scene(id: &str) -> Result<SceneConfig, SimError> {
    let (_, text) = BUNDLED
        .iter()
        .find(|(name, _)| *name == id)
        .ok_or_else(|| SimError::Config(format!("unknown scene {id}")))?;
    SceneConfig::from_toml(text)
}

pub fn bundled_scenes() -> Vec<SceneConfig> {
    BUNDLED.iter().map(|(_, t)| SceneConfig::from_toml(t).expect("bundled scene parses")).collect()
}

/// Resolves scene ids against `extra` first, then the bundled set.
pub fn resolve_scene(id: &str, extra: &[SceneConfig]) -> Result<SceneConfig, SimError> {
    match extra.iter().find(|s| s.scene_id == id) {
        Some(s) => Ok(s.clone()),
        None => bundled_scene(id),
    }
}
