use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{VehicleState, WorldSpec};
use crate::autodiff::Tensor;
use crate::geometry::CameraRig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub rig: CameraRig,
    /// Distance along each column's heading at which the backdrop region is
    /// looked up, metres.
    pub backdrop_distance: f64,
    /// Sky below this elevation is haze; the backdrop shows above it.
    pub backdrop_elevation_deg: f64,
    /// Ground fades linearly into `haze_color` between these distances.
    pub fog_start: f64,
    pub fog_end: f64,
    pub haze_color: [u8; 3],
    pub obstacle_height: f64,
    /// Side of one ground texture tile, metres.
    pub texture_cell: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            rig: CameraRig::default(),
            backdrop_distance: 12.0,
            backdrop_elevation_deg: 12.0,
            fog_start: 16.0,
            fog_end: 40.0,
            haze_color: [150, 150, 150],
            obstacle_height: 1.5,
            texture_cell: 0.25,
        }
    }
}

/// 8-bit RGB image stored channel-major `[3, height, width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; 3 * width * height] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        for (ch, v) in rgb.into_iter().enumerate() {
            self.data[ch * plane + i] = v;
        }
    }

    /// `[1, 3, H, W]` with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.iter().map(|&b| b as f64 / 255.0).collect())
            .expect("image buffer matches its dimensions")
    }
}

/// Binary PPM (P6). `comment` lines go into the header after the magic.
pub fn write_ppm<W: Write>(mut out: W, img: &Image, comment: &str) -> std::io::Result<()> {
    writeln!(out, "P6")?;
    for line in comment.lines() {
        writeln!(out, "# {line}")?;
    }
    write!(out, "{} {}\n255\n", img.width, img.height)?;
    let mut buf = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in 0..img.width {
            buf.extend_from_slice(&img.pixel(x, y));
        }
    }
    out.write_all(&buf)?;
    out.flush()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fixed per-tile texture offset in `[-0.5, 0.5)`.
fn texture(seed: u64, tx: i64, ty: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((tx as u64).wrapping_mul(0x1f1f_1f1f) ^ splitmix(ty as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

fn mix(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let mut out = [0; 3];
    for i in 0..3 {
        out[i] = (a[i] as f64 * (1.0 - t) + b[i] as f64 * t).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// World-frame origin and direction of the ray through pixel center `(u, v)`.
pub(crate) fn pixel_ray(rig: &CameraRig, state: &VehicleState, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
    let k = &rig.intrinsics;
    let cam = rig.pose_in_robot();
    let robot = state.pose();
    let d_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    let dir = robot.rotation() * (cam.rotation() * d_cam);
    let origin = robot.transform_point(cam.translation());
    (origin, dir)
}

/// Ground-plane point seen through pixel center `(u, v)`, if the ray goes down.
pub fn ground_hit(rig: &CameraRig, state: &VehicleState, u: f64, v: f64) -> Option<[f64; 2]> {
    let (o, d) = pixel_ray(rig, state, u, v);
    (d.z < 0.0).then(|| {
        let t = -o.z / d.z;
        [o.x + t * d.x, o.y + t * d.y]
    })
}

/// Ray casts every pixel center: obstacles as vertical cylinders (and the
/// edge of a walled world as a wall of the same height and color), the
/// ground plane with class color, tile texture and distance fog, and above
/// the horizon the backdrop color of the region the column looks toward.
pub fn render_observation(world: &WorldSpec, state: &VehicleState, cfg: &RenderConfig) -> Image {
    let k = cfg.rig.intrinsics;
    let mut img = Image::new(k.image_w, k.image_h);
    let near: Vec<_> = world
        .obstacles
        .iter()
        .filter(|o| (o.x - state.x).hypot(o.y - state.y) < cfg.fog_end + o.radius)
        .collect();
    for v in 0..k.image_h {
        for u in 0..k.image_w {
            let (o, d) = pixel_ray(&cfg.rig, state, u as f64, v as f64);
            let horiz = d.x.hypot(d.y);
            let ground_t = if d.z < 0.0 { Some(-o.z / d.z) } else { None };

            // nearest cylinder hit, parameterized by the ray's t
            let mut obstacle_t = f64::INFINITY;
            if horiz > 1e-12 {
                for ob in &near {
                    let (fx, fy) = (o.x - ob.x, o.y - ob.y);
                    let a = d.x * d.x + d.y * d.y;
                    let b = 2.0 * (fx * d.x + fy * d.y);
                    let c = fx * fx + fy * fy - ob.radius * ob.radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc < 0.0 {
                        continue;
                    }
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    let z = o.z + t * d.z;
                    if t > 0.0 && t < obstacle_t && (0.0..=cfg.obstacle_height).contains(&z) {
                        obstacle_t = t;
                    }
                }
            }

            if world.walled && horiz > 1e-12 {
                let exit = |o: f64, d: f64| if d > 0.0 { (world.extent - o) / d } else if d < 0.0 { -o / d } else { f64::INFINITY };
                let t = exit(o.x, d.x).min(exit(o.y, d.y));
                let z = o.z + t * d.z;
                if t > 0.0 && t < obstacle_t && (0.0..=cfg.obstacle_height).contains(&z) {
                    obstacle_t = t;
                }
            }

            let fog = |dist: f64| ((dist - cfg.fog_start) / (cfg.fog_end - cfg.fog_start)).clamp(0.0, 1.0);
            let color = if obstacle_t < ground_t.unwrap_or(f64::INFINITY) {
                mix(world.obstacle_color, cfg.haze_color, fog(obstacle_t * horiz))
            } else if let Some(t) = ground_t {
                let (gx, gy) = (o.x + t * d.x, o.y + t * d.y);
                if world.contains(gx, gy) {
                    let base = world.terrain_palette[world.terrain_at(gx, gy)];
                    let tx = (gx / cfg.texture_cell).floor() as i64;
                    let ty = (gy / cfg.texture_cell).floor() as i64;
                    let n = world.texture_amplitude * texture(world.seed, tx, ty);
                    let lit = base.map(|c| (c as f64 + n).round().clamp(0.0, 255.0) as u8);
                    mix(lit, cfg.haze_color, fog(t * horiz))
                } else {
                    cfg.haze_color
                }
            } else if d.z.atan2(horiz).to_degrees() < cfg.backdrop_elevation_deg {
                cfg.haze_color
            } else {
                let (dx, dy) = if horiz > 1e-12 { (d.x / horiz, d.y / horiz) } else { (1.0, 0.0) };
                let bx = (o.x + cfg.backdrop_distance * dx).clamp(0.0, world.extent);
                let by = (o.y + cfg.backdrop_distance * dy).clamp(0.0, world.extent);
                world.backdrop_palette[world.backdrop_at(bx, by)]
            };
            img.set_pixel(u, v, color);
        }
    }
    img
}
