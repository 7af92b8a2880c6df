use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::binio::{BinReader, BinWriter};
use crate::FormatError;

pub const WORLD_MAGIC: &str = "TRAJWD";
pub const WORLD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    /// Two terrain classes in large patches, backdrop tied to terrain.
    Toy,
    /// Several terrain classes, obstacles, backdrop independent of terrain.
    Procedural,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub kind: WorldKind,
    /// Side length of the square world, metres.
    pub extent: f64,
    pub cell_size: f64,
    pub num_classes: usize,
    /// Feature size of the terrain noise, metres.
    pub patch_scale: f64,
    /// Obstacles per 100 m^2.
    pub obstacle_density: f64,
    pub obstacle_radius: [f64; 2],
    /// Minimum gap between obstacle edges, metres.
    pub obstacle_spacing: f64,
    /// Backdrop color follows the terrain class of the region.
    pub confound: bool,
    /// The world edge is a wall: rendered like obstacles and a collision
    /// on contact. Otherwise driving off the edge ends an episode.
    pub walled: bool,
    /// Ground color per terrain class, smoothest first.
    pub terrain_palette: Vec<[u8; 3]>,
    pub backdrop_palette: Vec<[u8; 3]>,
    pub obstacle_color: [u8; 3],
    /// Peak-to-peak luminance of the ground texture, in color units.
    pub texture_amplitude: f64,
}

impl WorldParams {
    pub fn toy() -> Self {
        Self {
            kind: WorldKind::Toy,
            extent: 64.0,
            cell_size: 1.0,
            num_classes: 2,
            patch_scale: 20.0,
            obstacle_density: 0.0,
            obstacle_radius: [0.5, 1.0],
            obstacle_spacing: 2.0,
            confound: true,
            walled: false,
            terrain_palette: vec![[112, 124, 84], [128, 118, 92]],
            backdrop_palette: vec![[34, 96, 40], [170, 196, 236]],
            obstacle_color: [70, 60, 50],
            texture_amplitude: 40.0,
        }
    }

    pub fn procedural() -> Self {
        Self {
            kind: WorldKind::Procedural,
            extent: 128.0,
            cell_size: 1.0,
            num_classes: 3,
            patch_scale: 16.0,
            obstacle_density: 0.25,
            obstacle_radius: [0.5, 1.2],
            obstacle_spacing: 3.0,
            confound: false,
            walled: true,
            terrain_palette: vec![[96, 140, 70], [140, 120, 80], [110, 100, 100]],
            backdrop_palette: vec![[60, 110, 60], [150, 180, 220], [120, 110, 130]],
            obstacle_color: [50, 40, 35],
            texture_amplitude: 30.0,
        }
    }

    pub fn preset(kind: WorldKind) -> Self {
        match kind {
            WorldKind::Toy => Self::toy(),
            WorldKind::Procedural => Self::procedural(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::World(m));
        if !(self.extent > 0.0 && self.cell_size > 0.0 && self.patch_scale > 0.0) {
            return bad("extent, cell_size and patch_scale must be positive".into());
        }
        if self.extent / self.cell_size > 4096.0 {
            return bad(format!("grid of {} cells per side is too large", self.extent / self.cell_size));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.terrain_palette.len() != self.num_classes {
            return bad(format!(
                "terrain_palette has {} colors for {} classes",
                self.terrain_palette.len(),
                self.num_classes
            ));
        }
        if self.backdrop_palette.is_empty() || self.backdrop_palette.len() > 255 {
            return bad("backdrop_palette needs 1..=255 colors".into());
        }
        if self.confound && self.backdrop_palette.len() < self.num_classes {
            return bad("a confounded world needs one backdrop color per terrain class".into());
        }
        let [r0, r1] = self.obstacle_radius;
        if !(self.obstacle_density >= 0.0 && r0 > 0.0 && r0 <= r1 && self.obstacle_spacing >= 0.0) {
            return bad("obstacle density, radii and spacing must be non-negative with radius min <= max".into());
        }
        if self.obstacle_density > 0.0 && 2.0 * r1 >= self.extent {
            return bad("obstacles must be smaller than the world".into());
        }
        if !(self.texture_amplitude >= 0.0) {
            return bad("texture_amplitude must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

/// A generated world. Cell `(col, row)` covers
/// `[col * cell_size, (col + 1) * cell_size) x [row * cell_size, ...)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub seed: u64,
    pub kind: WorldKind,
    pub extent: f64,
    pub cell_size: f64,
    pub cols: usize,
    pub rows: usize,
    pub num_classes: usize,
    /// Terrain class per cell, row-major.
    pub terrain: Vec<u8>,
    /// Backdrop palette index per cell, row-major.
    pub backdrop: Vec<u8>,
    pub obstacles: Vec<Obstacle>,
    pub terrain_palette: Vec<[u8; 3]>,
    pub backdrop_palette: Vec<[u8; 3]>,
    pub obstacle_color: [u8; 3],
    pub texture_amplitude: f64,
    pub confound: bool,
    pub walled: bool,
    pub swapped: bool,
    /// Config hash and seed of the run that produced the file.
    pub provenance: String,
}

/// Smooth value noise in `[0, 1]` over a lattice with spacing `scale`.
struct ValueNoise {
    lattice: Vec<f64>,
    n: usize,
    scale: f64,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, extent: f64, scale: f64) -> Self {
        let n = (extent / scale).ceil() as usize + 2;
        Self { lattice: (0..n * n).map(|_| rng.gen::<f64>()).collect(), n, scale }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.scale, y / self.scale);
        let (ix, iy) = (gx.floor().max(0.0) as usize, gy.floor().max(0.0) as usize);
        let (ix, iy) = (ix.min(self.n - 2), iy.min(self.n - 2));
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth((gx - ix as f64).clamp(0.0, 1.0)), smooth((gy - iy as f64).clamp(0.0, 1.0)));
        let v = |i: usize, j: usize| self.lattice[j * self.n + i];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Two octaves of value noise sampled at cell centers, quantized into
/// `classes` equally populated levels.
fn quantized_field(rng: &mut ChaCha8Rng, cols: usize, rows: usize, cell: f64, scale: f64, classes: usize) -> Vec<u8> {
    let extent = cols.max(rows) as f64 * cell;
    let coarse = ValueNoise::new(rng, extent, scale);
    let fine = ValueNoise::new(rng, extent, scale / 2.5);
    let mut field = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = ((c as f64 + 0.5) * cell, (r as f64 + 0.5) * cell);
            field.push(coarse.at(x, y) + 0.35 * fine.at(x, y));
        }
    }
    let mut sorted = field.clone();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..classes).map(|k| sorted[k * sorted.len() / classes]).collect();
    field.iter().map(|v| cuts.iter().filter(|&&c| *v >= c).count() as u8).collect()
}

/// Deterministic world from `seed`. Fails if obstacles leave no room to
/// start an episode.
pub fn generate_world(seed: u64, params: &WorldParams) -> Result<WorldSpec, SimError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = (params.extent / params.cell_size).round() as usize;
    let rows = cols;
    let terrain = quantized_field(&mut rng, cols, rows, params.cell_size, params.patch_scale, params.num_classes);
    let backdrop = if params.confound {
        terrain.clone()
    } else {
        quantized_field(
            &mut rng,
            cols,
            rows,
            params.cell_size,
            params.patch_scale * 1.5,
            params.backdrop_palette.len(),
        )
    };

    let area = params.extent * params.extent;
    let target = (params.obstacle_density * area / 100.0).round() as usize;
    let mut obstacles: Vec<Obstacle> = Vec::with_capacity(target);
    let [r0, r1] = params.obstacle_radius;
    let mut attempts = 0;
    while obstacles.len() < target && attempts < 30 * target {
        attempts += 1;
        let radius = if r1 > r0 { rng.gen_range(r0..r1) } else { r0 };
        let x = rng.gen_range(radius..params.extent - radius);
        let y = rng.gen_range(radius..params.extent - radius);
        let clear = obstacles
            .iter()
            .all(|o| (o.x - x).hypot(o.y - y) >= o.radius + radius + params.obstacle_spacing);
        if clear {
            obstacles.push(Obstacle { x, y, radius });
        }
    }

    let world = WorldSpec {
        seed,
        kind: params.kind,
        extent: params.extent,
        cell_size: params.cell_size,
        cols,
        rows,
        num_classes: params.num_classes,
        terrain,
        backdrop,
        obstacles,
        terrain_palette: params.terrain_palette.clone(),
        backdrop_palette: params.backdrop_palette.clone(),
        obstacle_color: params.obstacle_color,
        texture_amplitude: params.texture_amplitude,
        confound: params.confound,
        walled: params.walled,
        swapped: false,
        provenance: String::new(),
    };
    let mut probe = ChaCha8Rng::seed_from_u64(seed ^ 0x57a7);
    if world.random_free_position(&mut probe, 1.0, 1000).is_none() {
        return Err(SimError::World("obstacles leave no free start position".into()));
    }
    Ok(world)
}

impl WorldSpec {
    /// Exchanges terrain classes region-wise (class `c` becomes
    /// `num_classes - 1 - c`). Backdrop and obstacles are untouched.
    pub fn swap(&self) -> WorldSpec {
        let k = self.num_classes as u8 - 1;
        WorldSpec {
            terrain: self.terrain.iter().map(|&c| k - c).collect(),
            swapped: !self.swapped,
            ..self.clone()
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..self.extent).contains(&x) && (0.0..self.extent).contains(&y)
    }

    fn cell_index(&self, x: f64, y: f64) -> usize {
        let c = ((x / self.cell_size).floor().max(0.0) as usize).min(self.cols - 1);
        let r = ((y / self.cell_size).floor().max(0.0) as usize).min(self.rows - 1);
        r * self.cols + c
    }

    /// Terrain class at a point; points outside take the nearest edge cell.
    pub fn terrain_at(&self, x: f64, y: f64) -> usize {
        self.terrain[self.cell_index(x, y)] as usize
    }

    pub fn backdrop_at(&self, x: f64, y: f64) -> usize {
        self.backdrop[self.cell_index(x, y)] as usize
    }

    /// Per-step return for driving on `class`: `num_classes` on the
    /// smoothest class down to 1 on the roughest.
    pub fn terrain_score(&self, class: usize) -> f64 {
        (self.num_classes - class) as f64
    }

    /// A disk of `radius` at the point touches the wall of a walled world.
    pub fn touches_wall(&self, x: f64, y: f64, radius: f64) -> bool {
        self.walled && !(x - radius >= 0.0 && y - radius >= 0.0 && x + radius <= self.extent && y + radius <= self.extent)
    }

    /// First obstacle whose disk, grown by `clearance`, contains the point.
    pub fn obstacle_at(&self, x: f64, y: f64, clearance: f64) -> Option<&Obstacle> {
        self.obstacles.iter().find(|o| (o.x - x).hypot(o.y - y) < o.radius + clearance)
    }

    /// Class counts over all cells.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &c in &self.terrain {
            h[c as usize] += 1;
        }
        h
    }

    pub(crate) fn random_free_position(&self, rng: &mut ChaCha8Rng, clearance: f64, tries: usize) -> Option<(f64, f64)> {
        let margin = (self.extent * 0.2).min(10.0);
        for _ in 0..tries {
            let x = rng.gen_range(margin..self.extent - margin);
            let y = rng.gen_range(margin..self.extent - margin);
            if self.obstacle_at(x, y, clearance).is_none() {
                return Some((x, y));
            }
        }
        None
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), FormatError> {
        let mut w = BinWriter::new(out);
        w.bytes(WORLD_MAGIC.as_bytes())?;
        w.u32(WORLD_VERSION)?;
        w.str(&self.provenance)?;
        w.u64(self.seed)?;
        w.u8(match self.kind {
            WorldKind::Toy => 0,
            WorldKind::Procedural => 1,
        })?;
        w.u8(self.confound as u8)?;
        w.u8(self.swapped as u8)?;
        w.u8(self.walled as u8)?;
        w.f64(self.extent)?;
        w.f64(self.cell_size)?;
        w.u32(self.cols as u32)?;
        w.u32(self.rows as u32)?;
        w.u32(self.num_classes as u32)?;
        w.bytes(&self.terrain)?;
        w.bytes(&self.backdrop)?;
        for palette in [&self.terrain_palette, &self.backdrop_palette] {
            w.u32(palette.len() as u32)?;
            for c in palette {
                w.bytes(c)?;
            }
        }
        w.bytes(&self.obstacle_color)?;
        w.f64(self.texture_amplitude)?;
        w.u32(self.obstacles.len() as u32)?;
        for o in &self.obstacles {
            w.f64s(&[o.x, o.y, o.radius])?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self, FormatError> {
        let mut r = BinReader::new(input, "world");
        r.magic(WORLD_MAGIC)?;
        r.version(WORLD_VERSION)?;
        let provenance = r.str()?;
        let seed = r.u64()?;
        let kind = match r.u8()? {
            0 => WorldKind::Toy,
            1 => WorldKind::Procedural,
            k => return Err(r.malformed(format!("unknown world kind {k}"))),
        };
        let confound = r.u8()? != 0;
        let swapped = r.u8()? != 0;
        let walled = r.u8()? != 0;
        let extent = r.f64()?;
        let cell_size = r.f64()?;
        let cols = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        if cols == 0 || rows == 0 || cols > 4096 || rows > 4096 || !(2..=255).contains(&num_classes) {
            return Err(r.malformed("grid dimensions or class count out of range"));
        }
        let terrain = r.bytes(cols * rows)?;
        let backdrop = r.bytes(cols * rows)?;
        let mut palettes = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.u32()? as usize;
            if n > 255 {
                return Err(r.malformed("palette too large"));
            }
            let mut p = Vec::with_capacity(n);
            for _ in 0..n {
                let b = r.bytes(3)?;
                p.push([b[0], b[1], b[2]]);
            }
            palettes.push(p);
        }
        let backdrop_palette = palettes.pop().expect("two palettes");
        let terrain_palette = palettes.pop().expect("two palettes");
        let oc = r.bytes(3)?;
        let texture_amplitude = r.f64()?;
        let n = r.u32()? as usize;
        let mut obstacles = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let v = r.f64s(3)?;
            obstacles.push(Obstacle { x: v[0], y: v[1], radius: v[2] });
        }
        r.expect_end()?;
        if terrain.iter().any(|&c| c as usize >= num_classes) || terrain_palette.len() != num_classes {
            return Err(r.malformed("terrain classes do not match the palette"));
        }
        if backdrop.iter().any(|&c| c as usize >= backdrop_palette.len()) {
            return Err(r.malformed("backdrop index outside the palette"));
        }
        Ok(Self {
            seed,
            kind,
            extent,
            cell_size,
            cols,
            rows,
            num_classes,
            terrain,
            backdrop,
            obstacles,
            terrain_palette,
            backdrop_palette,
            obstacle_color: [oc[0], oc[1], oc[2]],
            texture_amplitude,
            confound,
            walled,
            swapped,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        Ok(self.write(BufWriter::new(File::create(path)?))?)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Ok(Self::read(BufReader::new(File::open(path)?))?)
    }
}
