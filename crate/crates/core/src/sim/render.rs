//! Software rasteriser with 2×2 supersampling.
//!
//! Objects are opaque and painted back to front over the background. The
//! target is drawn as a cut-away outline so its fill level is visible.

use super::{Observation, Pose, SceneConfig, SimState, Texture, SOURCE_VESSEL};
use crate::sim::ContainerKind;

const SS: usize = 2;
const TABLE: [u8; 3] = [150, 118, 92];
const ARM: [u8; 3] = [148, 150, 160];

/// A rendered frame plus, per output pixel, how many of its supersamples
/// show background (0..=4).
#[derive(Clone, Debug)]
pub struct Rendered {
    pub observation: Observation,
    pub background_coverage: Vec<u8>,
}

struct Canvas<'a> {
    n: usize,
    rgb: Vec<[u8; 3]>,
    background: Vec<bool>,
    scene: &'a SceneConfig,
}

impl<'a> Canvas<'a> {
    fn new(scene: &'a SceneConfig) -> Self {
        let n = scene.camera.render_size * SS;
        let mut rgb = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                rgb.push(background_pixel(scene, row, col));
            }
        }
        Canvas { n, rgb, background: vec![true; n * n], scene }
    }

    /// World `(x, z)` at depth `y` to supersampled pixel coordinates.
    fn project(&self, x: f64, z: f64, y: f64) -> (f64, f64) {
        let cam = &self.scene.camera;
        let s = cam.depth / (cam.depth + y);
        let cx = 0.5 * (cam.x_min + cam.x_max);
        let cz = 0.5 * (cam.z_min + cam.z_max);
        let (x, z) = (cx + (x - cx) * s, cz + (z - cz) * s);
        let n = self.n as f64;
        ((x - cam.x_min) / (cam.x_max - cam.x_min) * n, (cam.z_max - z) / (cam.z_max - cam.z_min) * n)
    }

    fn put(&mut self, row: usize, col: usize, color: [u8; 3]) {
        let i = row * self.n + col;
        self.rgb[i] = color;
        self.background[i] = false;
    }

    /// Fills a convex polygon given in world coordinates.
    fn polygon(&mut self, pts: &[(f64, f64)], y: f64, color: [u8; 3]) {
        let px: Vec<(f64, f64)> = pts.iter().map(|&(x, z)| self.project(x, z, y)).collect();
        let (min_c, max_c, min_r, max_r) = px.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(u, v)| (a.min(u), b.max(u), c.min(v), d.max(v)),
        );
        let clip = |v: f64| v.max(0.0).min(self.n as f64);
        let (c0, c1) = (clip(min_c.floor()) as usize, clip(max_c.ceil()) as usize);
        let (r0, r1) = (clip(min_r.floor()) as usize, clip(max_r.ceil()) as usize);
        // orientation-agnostic: inside if all edge cross products share a sign
        for row in r0..r1 {
            for col in c0..c1 {
                let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
                let mut pos = false;
                let mut neg = false;
                for k in 0..px.len() {
                    let (a, b) = (px[k], px[(k + 1) % px.len()]);
                    let cross = (b.0 - a.0) * (v - a.1) - (b.1 - a.1) * (u - a.0);
                    pos |= cross > 0.0;
                    neg |= cross < 0.0;
                }
                if !(pos && neg) {
                    self.put(row, col, color);
                }
            }
        }
    }

    fn rect(&mut self, x0: f64, z0: f64, x1: f64, z1: f64, y: f64, color: [u8; 3]) {
        self.polygon(&[(x0, z0), (x1, z0), (x1, z1), (x0, z1)], y, color);
    }

    /// Axis-aligned ellipse with world radii, at least one subpixel wide.
    fn ellipse(&mut self, x: f64, z: f64, y: f64, rx: f64, rz: f64, color: [u8; 3]) {
        let (cu, cv) = self.project(x, z, y);
        let (ex, _) = self.project(x + rx, z, y);
        let (_, ez) = self.project(x, z - rz, y);
        let ru = (ex - cu).abs().max(0.6);
        let rv = (ez - cv).abs().max(0.6);
        let n = self.n as f64;
        let c0 = (cu - ru).floor().max(0.0).min(n) as usize;
        let c1 = (cu + ru).ceil().max(0.0).min(n) as usize;
        let r0 = (cv - rv).floor().max(0.0).min(n) as usize;
        let r1 = (cv + rv).ceil().max(0.0).min(n) as usize;
        for row in r0..r1 {
            for col in c0..c1 {
                let du = (col as f64 + 0.5 - cu) / ru;
                let dv = (row as f64 + 0.5 - cv) / rv;
                if du * du + dv * dv <= 1.0 {
                    self.put(row, col, color);
                }
            }
        }
    }

    fn downsample(self) -> (Vec<u8>, Vec<u8>) {
        let size = self.n / SS;
        let mut img = Vec::with_capacity(size * size * 3);
        let mut cov = Vec::with_capacity(size * size);
        for row in 0..size {
            for col in 0..size {
                let mut acc = [0u32; 3];
                let mut bg = 0u8;
                for dr in 0..SS {
                    for dc in 0..SS {
                        let i = (row * SS + dr) * self.n + col * SS + dc;
                        for (a, &c) in acc.iter_mut().zip(&self.rgb[i]) {
                            *a += c as u32;
                        }
                        bg += self.background[i] as u8;
                    }
                }
                let k = (SS * SS) as u32;
                img.extend(acc.iter().map(|a| ((a + k / 2) / k) as u8));
                cov.push(bg);
            }
        }
        (img, cov)
    }
}

fn hash2(a: i64, b: i64, salt: u64) -> f64 {
    let mut h = (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ salt;
    h ^= h >> 31;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Crumpled-tissue look: smooth value noise plus fine fibre speckle.
fn background_pixel(scene: &SceneConfig, row: usize, col: usize) -> [u8; 3] {
    let base = scene.background.color;
    if scene.background.texture == Texture::Flat {
        return base;
    }
    let size = scene.camera.render_size as f64;
    let cell = size / 8.0;
    let u = (col as f64 + 0.5) / SS as f64 / cell;
    let v = (row as f64 + 0.5) / SS as f64 / cell;
    let (iu, iv) = (u.floor() as i64, v.floor() as i64);
    let (fu, fv) = (u - iu as f64, v - iv as f64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (su, sv) = (smooth(fu), smooth(fv));
    let n00 = hash2(iu, iv, 1);
    let n10 = hash2(iu + 1, iv, 1);
    let n01 = hash2(iu, iv + 1, 1);
    let n11 = hash2(iu + 1, iv + 1, 1);
    let blotch = (n00 * (1.0 - su) + n10 * su) * (1.0 - sv) + (n01 * (1.0 - su) + n11 * su) * sv;
    let fibre = hash2(col as i64, row as i64, 7);
    let k = 1.0 + 0.28 * (blotch - 0.5) + 0.10 * (fibre - 0.5);
    base.map(|c| (c as f64 * k).round().clamp(0.0, 255.0) as u8)
}

fn draw_target(cv: &mut Canvas, state: &SimState) {
    let scene = cv.scene;
    let c = &scene.container;
    let (y, half) = (c.y, 0.5 * c.opening_width);
    let wall = if c.transparent { 0.004 } else { 0.008 };
    let floor = c.rim_height - c.wall_height;
    match c.kind {
        ContainerKind::Goblet => {
            cv.rect(c.x - 0.03, 0.0, c.x + 0.03, 0.008, y, c.color);
            cv.rect(c.x - 0.006, 0.0, c.x + 0.006, floor, y, c.color);
        }
        _ if floor > 0.0 => cv.rect(c.x - half * 0.8, 0.0, c.x + half * 0.8, floor, y, c.color),
        _ => {}
    }
    let level = c.wall_height * state.granules_in_target as f64 / c.capacity as f64;
    if state.granules_in_target > 0 {
        cv.rect(c.x - half, floor, c.x + half, floor + level.max(0.002), y, scene.granule.color);
    }
    cv.rect(c.x - half - wall, floor - wall, c.x - half, c.rim_height, y, c.color);
    cv.rect(c.x + half, floor - wall, c.x + half + wall, c.rim_height, y, c.color);
    cv.rect(c.x - half - wall, floor - wall, c.x + half + wall, floor, y, c.color);
}

fn draw_vessel(cv: &mut Canvas, pose: &Pose, fill: f64, granule: [u8; 3]) {
    let v = SOURCE_VESSEL;
    let (s, c) = pose.theta.sin_cos();
    // local (u right, w up) to world; positive tilt turns the mouth toward +x
    let to_world = |u: f64, w: f64| (pose.x + u * c + w * s, pose.z - u * s + w * c);
    let quad = |u0: f64, w0: f64, u1: f64, w1: f64| [to_world(u0, w0), to_world(u1, w0), to_world(u1, w1), to_world(u0, w1)];
    let (hw, hh, t) = (0.5 * v.width, 0.5 * v.height, v.wall);
    cv.polygon(&[(pose.x - 0.012, 1.0), (pose.x + 0.012, 1.0), to_world(0.012, 0.0), to_world(-0.012, 0.0)], pose.y, ARM);
    if fill > 0.0 {
        cv.polygon(&quad(-hw, -hh, hw, -hh + fill), pose.y, granule);
    }
    cv.polygon(&quad(-hw - t, -hh - t, -hw, hh), pose.y, v.color);
    cv.polygon(&quad(hw, -hh - t, hw + t, hh), pose.y, v.color);
    cv.polygon(&quad(-hw - t, -hh - t, hw + t, -hh), pose.y, v.color);
}

/// Renders `state` and reports per-pixel background coverage.
pub fn render_with_coverage(state: &SimState, scene: &SceneConfig) -> Rendered {
    let mut cv = Canvas::new(scene);
    let cam = &scene.camera;
    cv.rect(cam.x_min - 1.0, cam.z_min - 1.0, cam.x_max + 1.0, 0.0, 0.0, TABLE);
    draw_target(&mut cv, state);
    let v = SOURCE_VESSEL;
    let fill = v.full_fraction * v.height * state.granules_in_source as f64 / scene.granule.count as f64;
    draw_vessel(&mut cv, &state.pose, fill, scene.granule.color);
    let (rx, rz) = match scene.granule.kind {
        super::GranuleKind::Lentils => (0.004, 0.0025),
        super::GranuleKind::Rice => (0.002, 0.004),
        super::GranuleKind::Couscous => (0.0025, 0.0025),
        super::GranuleKind::Coffee => (0.0035, 0.003),
    };
    for p in &state.in_flight {
        cv.ellipse(p.pos[0], p.pos[2], p.pos[1], rx, rz, scene.granule.color);
    }
    let size = scene.camera.render_size;
    let (image, background_coverage) = cv.downsample();
    Rendered { observation: Observation { image, size, frame_index: state.time_step }, background_coverage }
}

pub fn render(state: &SimState, scene: &SceneConfig) -> Observation {
    render_with_coverage(state, scene).observation
}
