//! Deterministic synthetic propagation scene.
//!
//! The scene plays the role of a ray tracer: it maps a user position on the
//! coverage plane to the set of propagation paths leaving the base station.
//! Paths are the line-of-sight ray (dropped when any reflector blocks it) plus
//! one first-order specular reflection per vertical planar reflector, found
//! with the image method. Reflected rays are not tested for occlusion.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::geometry::{synthesize_channel, ArrayConfig, Channel, PathComponent};
use crate::par::Exec;
use crate::{Error, Result};

pub const SCENE_SCHEMA: u32 = 1;

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(a: Vec3, t: f64, d: Vec3) -> Vec3 {
    [a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]]
}

/// Axis-aligned rectangle of the coverage plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let b = Bounds { x_min, x_max, y_min, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite())
            && self.x_max > self.x_min
            && self.y_max > self.y_min;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("degenerate plane bounds {self:?}")))
        }
    }

    pub fn contains(&self, p: UserPosition) -> bool {
        (self.x_min..=self.x_max).contains(&p.x) && (self.y_min..=self.y_max).contains(&p.y)
    }

    /// Standard clamp of each coordinate into `[min, max]`.
    pub fn clamp(&self, p: UserPosition) -> UserPosition {
        UserPosition { x: p.x.clamp(self.x_min, self.x_max), y: p.y.clamp(self.y_min, self.y_max) }
    }

    pub fn centroid(&self) -> UserPosition {
        UserPosition { x: 0.5 * (self.x_min + self.x_max), y: 0.5 * (self.y_min + self.y_max) }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// Plane coordinates of the user; the height is the scene's plane height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserPosition {
    pub x: f64,
    pub y: f64,
}

impl UserPosition {
    pub fn new(x: f64, y: f64) -> Self {
        UserPosition { x, y }
    }

    pub fn distance(&self, other: &UserPosition) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Opaque vertical rectangle that reflects specularly on both faces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflector {
    /// A point on the reflector's center line.
    pub anchor: Vec3,
    /// Horizontal unit normal.
    pub normal: Vec3,
    /// Horizontal half-length measured from the anchor along the wall.
    pub half_width: f64,
    /// Vertical extent `[bottom, top]` in meters.
    pub z_range: [f64; 2],
    pub coefficient: Complex64,
}

impl Reflector {
    fn tangent(&self) -> Vec3 {
        [-self.normal[1], self.normal[0], 0.0]
    }

    fn signed_distance(&self, p: Vec3) -> f64 {
        dot(sub(p, self.anchor), self.normal)
    }

    fn covers(&self, p: Vec3) -> bool {
        dot(sub(p, self.anchor), self.tangent()).abs() <= self.half_width
            && p[2] >= self.z_range[0]
            && p[2] <= self.z_range[1]
    }

    /// Whether the open segment `a → b` crosses the reflector's face.
    fn blocks(&self, a: Vec3, b: Vec3) -> bool {
        let da = self.signed_distance(a);
        let db = self.signed_distance(b);
        if da * db >= 0.0 {
            return false;
        }
        let t = da / (da - db);
        self.covers(axpy(a, t, sub(b, a)))
    }

    fn validate(&self) -> Result<()> {
        let n = norm(self.normal);
        if (n - 1.0).abs() > 1e-9 || self.normal[2].abs() > 1e-9 {
            return Err(Error::domain(format!("reflector normal {:?} must be a horizontal unit vector", self.normal)));
        }
        if !(self.half_width > 0.0) || !(self.z_range[1] > self.z_range[0]) {
            return Err(Error::domain("reflector extent must be positive"));
        }
        if self.coefficient.norm() > 1.0 {
            return Err(Error::domain("reflection coefficient magnitude exceeds 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bs_position: Vec3,
    pub plane_height: f64,
    pub plane_bounds: Bounds,
    pub reflectors: Vec<Reflector>,
    pub pathloss_exponent: f64,
    /// Path amplitude at 1 m.
    pub reference_gain: Complex64,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    schema: u32,
    #[serde(flatten)]
    scene: Scene,
}

impl Default for Scene {
    /// A 30 m × 30 m street-level plane with its corner at the origin, the
    /// base station 25 m west and 30 m south of that corner at 10 m height,
    /// two building facades and a back wall that reflect, and a low-rise block
    /// south of the plane that shadows its south-east corner.
    fn default() -> Self {
        let wall = |anchor: Vec3, normal: Vec3, half_width: f64, top: f64, coef: (f64, f64)| Reflector {
            anchor,
            normal,
            half_width,
            z_range: [0.0, top],
            coefficient: Complex64::new(coef.0, coef.1),
        };
        Scene {
            bs_position: [-25.0, -30.0, 10.0],
            plane_height: 1.5,
            plane_bounds: Bounds { x_min: 0.0, x_max: 30.0, y_min: 0.0, y_max: 30.0 },
            reflectors: vec![
                // north facade
                wall([10.0, 34.0, 0.0], [0.0, -1.0, 0.0], 40.0, 30.0, (-0.55, 0.25)),
                // east facade
                wall([34.0, 0.0, 0.0], [-1.0, 0.0, 0.0], 40.0, 30.0, (-0.45, -0.35)),
                // wall behind the base station
                wall([-40.0, 0.0, 0.0], [1.0, 0.0, 0.0], 50.0, 20.0, (0.3, -0.4)),
                // low-rise block between the base station and the plane
                wall([24.0, -4.0, 0.0], [0.0, 1.0, 0.0], 16.0, 12.0, (-0.6, 0.1)),
            ],
            pathloss_exponent: 2.0,
            reference_gain: Complex64::new(1.0, 0.0),
        }
    }
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.plane_bounds.validate()?;
        if (self.bs_position[2] - self.plane_height).abs() < 1e-9 {
            return Err(Error::domain("base station lies on the coverage plane"));
        }
        if !(self.pathloss_exponent >= 2.0) {
            return Err(Error::domain("path-loss exponent must be at least 2"));
        }
        self.reflectors.iter().try_for_each(Reflector::validate)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text)?;
        if file.schema != SCENE_SCHEMA {
            return Err(Error::Parse(format!("unsupported scene schema {}", file.schema)));
        }
        file.scene.validate()?;
        Ok(file.scene)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SceneFile { schema: SCENE_SCHEMA, scene: self.clone() })?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    fn user_point(&self, pos: UserPosition) -> Vec3 {
        [pos.x, pos.y, self.plane_height]
    }

    fn path(&self, departure: Vec3, length: f64, coef: Complex64) -> PathComponent {
        let d = norm(departure);
        let elevation = (departure[2] / d).clamp(-1.0, 1.0).acos();
        let azimuth = departure[1].atan2(departure[0]);
        PathComponent {
            gain: self.reference_gain * coef / length.powf(0.5 * self.pathloss_exponent),
            elevation,
            azimuth,
        }
    }
}

/// Propagation paths from the base station to `pos`.
pub fn trace_paths(scene: &Scene, pos: UserPosition) -> Result<Vec<PathComponent>> {
    if !scene.plane_bounds.contains(pos) {
        return Err(Error::domain(format!("position ({}, {}) outside the coverage plane", pos.x, pos.y)));
    }
    let bs = scene.bs_position;
    let user = scene.user_point(pos);
    let mut paths = Vec::with_capacity(scene.reflectors.len() + 1);

    if !scene.reflectors.iter().any(|r| r.blocks(bs, user)) {
        let d = sub(user, bs);
        paths.push(scene.path(d, norm(d), Complex64::new(1.0, 0.0)));
    }

    for r in &scene.reflectors {
        let sb = r.signed_distance(bs);
        let su = r.signed_distance(user);
        if sb * su <= 0.0 {
            continue;
        }
        let image = axpy(bs, -2.0 * sb, r.normal);
        let hit = axpy(image, sb / (sb + su), sub(user, image));
        if !r.covers(hit) {
            continue;
        }
        paths.push(scene.path(sub(hit, bs), norm(sub(user, image)), r.coefficient));
    }
    Ok(paths)
}

/// Ground-truth position-to-channel map.
pub fn channel_map(cfg: &ArrayConfig, scene: &Scene, pos: UserPosition) -> Result<Channel> {
    synthesize_channel(cfg, &trace_paths(scene, pos)?)
}

/// Average channel amplitude `(1/W) Σ ‖M(x_i)‖`.
pub fn mean_channel_norm(cfg: &ArrayConfig, scene: &Scene, positions: &[UserPosition]) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::Empty("sample positions"));
    }
    let mut total = 0.0;
    for &p in positions {
        total += channel_map(cfg, scene, p)?.norm();
    }
    Ok(total / positions.len() as f64)
}

/// Cell-centred uniform lattice over the coverage plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub bounds: Bounds,
    pub nx: usize,
    pub ny: usize,
}

impl Grid {
    pub fn new(bounds: Bounds, nx: usize, ny: usize) -> Result<Self> {
        bounds.validate()?;
        if nx == 0 || ny == 0 {
            return Err(Error::domain("grid needs at least one point per axis"));
        }
        Ok(Grid { bounds, nx, ny })
    }

    pub fn square(bounds: Bounds, per_side: usize) -> Result<Self> {
        Self::new(bounds, per_side, per_side)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self) -> f64 {
        self.bounds.width() / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.bounds.height() / self.ny as f64
    }

    /// Point `index`; x varies fastest.
    pub fn position(&self, index: usize) -> UserPosition {
        let (i, j) = (index % self.nx, index / self.nx);
        UserPosition {
            x: self.bounds.x_min + (i as f64 + 0.5) * self.dx(),
            y: self.bounds.y_min + (j as f64 + 0.5) * self.dy(),
        }
    }

    pub fn positions(&self) -> Vec<UserPosition> {
        (0..self.len()).map(|k| self.position(k)).collect()
    }

    /// Indices of every grid point within `radius` of `center`, in index order.
    pub fn indices_within(&self, center: UserPosition, radius: f64) -> Vec<usize> {
        let (dx, dy) = (self.dx(), self.dy());
        let lo = |c: f64, min: f64, d: f64, n: usize| (((c - radius - min) / d - 0.5).floor().max(0.0) as usize).min(n);
        let hi = |c: f64, min: f64, d: f64, n: usize| (((c + radius - min) / d - 0.5).ceil().max(-1.0) + 1.0).min(n as f64) as usize;
        let (i0, i1) = (lo(center.x, self.bounds.x_min, dx, self.nx), hi(center.x, self.bounds.x_min, dx, self.nx));
        let (j0, j1) = (lo(center.y, self.bounds.y_min, dy, self.ny), hi(center.y, self.bounds.y_min, dy, self.ny));
        let mut out = Vec::new();
        for j in j0..j1 {
            for i in i0..i1 {
                let k = j * self.nx + i;
                if self.position(k).distance(&center) <= radius {
                    out.push(k);
                }
            }
        }
        out
    }
}

/// Grid positions with their channels, computed once and shared read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCache {
    pub grid: Grid,
    pub n_antennas: usize,
    channels: Vec<Channel>,
}

const GRID_MAGIC: &[u8; 8] = b"CCMGRID1";

impl GridCache {
    pub fn build(cfg: &ArrayConfig, scene: &Scene, grid: Grid) -> Result<Self> {
        Self::build_with(cfg, scene, grid, Exec::default())
    }

    pub fn build_with(cfg: &ArrayConfig, scene: &Scene, grid: Grid, exec: Exec) -> Result<Self> {
        let channels = exec.try_map(grid.len(), |k| channel_map(cfg, scene, grid.position(k)))?;
        Ok(GridCache { grid, n_antennas: cfg.n_antennas(), channels })
    }

    pub fn channel(&self, index: usize) -> &Channel {
        &self.channels[index]
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    /// Little-endian binary dump: magic, `nx ny n_b` as u64, the four bounds
    /// as f64, then every channel as interleaved (re, im) f64 pairs.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        for v in [self.grid.nx, self.grid.ny, self.n_antennas] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let b = self.grid.bounds;
        for v in [b.x_min, b.x_max, b.y_min, b.y_max] {
            w.write_all(&v.to_le_bytes())?;
        }
        for h in &self.channels {
            for z in h.as_vector().iter() {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Parse("not a grid cache file".into()));
        }
        let mut u = [0u8; 8];
        let mut next_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut u)?;
            Ok(u64::from_le_bytes(u))
        };
        let nx = next_u64(&mut r)? as usize;
        let ny = next_u64(&mut r)? as usize;
        let n_b = next_u64(&mut r)? as usize;
        let mut f = [0.0f64; 4];
        for v in f.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let grid = Grid::new(Bounds::new(f[0], f[1], f[2], f[3])?, nx, ny)?;
        let mut buf = vec![0u8; 16 * n_b];
        let mut channels = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            r.read_exact(&mut buf)?;
            let coeffs = buf
                .chunks_exact(16)
                .map(|c| {
                    Complex64::new(
                        f64::from_le_bytes(c[..8].try_into().unwrap()),
                        f64::from_le_bytes(c[8..].try_into().unwrap()),
                    )
                })
                .collect();
            channels.push(Channel::from_vec(coeffs)?);
        }
        Ok(GridCache { grid, n_antennas: n_b, channels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(fs::File::open(path)?))
    }
}
