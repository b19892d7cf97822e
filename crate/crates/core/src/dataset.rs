//! Sequence ingest and synthetic desk-scale scene generation.
//!
//! Synthetic scenes are unions of primitive SDFs (spheres, axis-aligned
//! boxes) inside a room shell, rendered by exact ray casting against the
//! oracle. The oracle doubles as evaluation ground truth.
//!
//! Disk layout: `rgb/%06d.png` (8-bit), `depth/%06d.png` (16-bit
//! millimeters, 0 = invalid), `semantic/%06d.png` (8-bit class IDs,
//! optional), `intrinsics.txt`, `traj_gt.txt` (TUM, optional),
//! `scene.txt` (scene spec, optional).
//!
//! World frame: z up. Class convention: 0 = floor, 1 = wall, 2 = ceiling,
//! objects >= 3. Depth images hold z-depth (optical-axis distance).

use crate::error::{Error, Result};
use crate::pose::CameraPose;
use nalgebra::{UnitQuaternion, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

pub const CLASS_FLOOR: usize = 0;
pub const CLASS_WALL: usize = 1;
pub const CLASS_CEILING: usize = 2;
pub const FIRST_OBJECT_CLASS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Dataset("intrinsics fx, fy must be positive".into()));
        }
        Ok(())
    }
}

/// One RGB-D(+semantic) observation.
#[derive(Debug, Clone)]
pub struct Frame {
    /// H×W×3, values in [0,1].
    pub rgb: Array3<f64>,
    /// H×W meters, 0 marks invalid.
    pub depth: Array2<f64>,
    /// H×W class IDs; -1 marks invalid / unavailable.
    pub semantic: Array2<i32>,
    pub intrinsics: Intrinsics,
    pub frame_index: usize,
    pub gt_pose: Option<CameraPose>,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.rgb.dim().0
    }

    pub fn width(&self) -> usize {
        self.rgb.dim().1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Sphere { center: Vector3<f64>, radius: f64 },
    Box { min: Vector3<f64>, max: Vector3<f64> },
}

impl Primitive {
    /// Exact signed distance, negative inside.
    pub fn sdf(&self, p: Vector3<f64>) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Box { min, max } => {
                let c = (min + max) * 0.5;
                let h = (max - min) * 0.5;
                let q = (p - c).abs() - h;
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
        }
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        match *self {
            Primitive::Sphere { center, radius } => {
                let r = Vector3::from_element(radius);
                (center - r, center + r)
            }
            Primitive::Box { min, max } => (min, max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: Primitive,
    pub class_id: usize,
}

/// Procedural scene description.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub room_min: Vector3<f64>,
    pub room_max: Vector3<f64>,
    pub objects: Vec<SceneObject>,
    pub l_cls: usize,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub trajectory: Vec<CameraPose>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.l_cls < 2 {
            return Err(Error::Dataset("l_cls must be >= 2".into()));
        }
        for axis in 0..3 {
            if self.room_max[axis] <= self.room_min[axis] {
                return Err(Error::Dataset("degenerate room extent".into()));
            }
        }
        for (i, obj) in self.objects.iter().enumerate() {
            let (lo, hi) = obj.shape.bounds();
            for axis in 0..3 {
                if lo[axis] < self.room_min[axis] || hi[axis] > self.room_max[axis] {
                    return Err(Error::Dataset(format!("object {i} outside room extent")));
                }
            }
            if obj.class_id >= self.l_cls {
                return Err(Error::Dataset(format!("object {i} class >= l_cls")));
            }
        }
        if CLASS_CEILING >= self.l_cls {
            return Err(Error::Dataset("l_cls must cover floor/wall/ceiling classes".into()));
        }
        for (i, pose) in self.trajectory.iter().enumerate() {
            let t = pose.translation;
            for axis in 0..3 {
                if t[axis] <= self.room_min[axis] || t[axis] >= self.room_max[axis] {
                    return Err(Error::Dataset(format!("trajectory pose {i} leaves the room")));
                }
            }
        }
        Ok(())
    }

    pub fn room_diagonal(&self) -> f64 {
        (self.room_max - self.room_min).norm()
    }

    /// Desk-scale room used by the synthetic evaluation suite: ~5x4x3 m,
    /// eight primitive objects on the floor, and a smooth camera loop.
    pub fn desk_room(seed: u64, n_frames: usize, width: usize, height: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
        let room_min = Vector3::new(0.0, 0.0, 0.0);
        let room_max = Vector3::new(5.0, 4.0, 3.0);
        let n_object_classes = 5;
        let l_cls = FIRST_OBJECT_CLASS + n_object_classes;

        let mut objects: Vec<SceneObject> = Vec::new();
        let mut centers: Vec<Vector3<f64>> = Vec::new();
        let mut attempts = 0;
        while objects.len() < 8 && attempts < 1000 {
            attempts += 1;
            let margin = 0.7;
            let x = rng.gen_range(room_min.x + margin..room_max.x - margin);
            let y = rng.gen_range(room_min.y + margin..room_max.y - margin);
            // Keep a clear ring for the camera loop.
            let center_xy = Vector3::new(2.5, 2.0, 0.0);
            let d_center = (Vector3::new(x, y, 0.0) - center_xy).norm();
            if d_center > 1.3 {
                continue;
            }
            if centers.iter().any(|c| (c - Vector3::new(x, y, 0.0)).norm() < 0.75) {
                continue;
            }
            let class_id = FIRST_OBJECT_CLASS + objects.len() % n_object_classes;
            let shape = if rng.gen_bool(0.5) {
                let r = rng.gen_range(0.22..0.40);
                Primitive::Sphere { center: Vector3::new(x, y, r), radius: r }
            } else {
                let hx = rng.gen_range(0.15..0.30);
                let hy = rng.gen_range(0.15..0.30);
                let hz = rng.gen_range(0.18..0.45);
                Primitive::Box {
                    min: Vector3::new(x - hx, y - hy, 0.0),
                    max: Vector3::new(x + hx, y + hy, 2.0 * hz),
                }
            };
            centers.push(Vector3::new(x, y, 0.0));
            objects.push(SceneObject { shape, class_id });
        }

        let intrinsics = Intrinsics {
            fx: width as f64 * 0.9,
            fy: width as f64 * 0.9,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        };
        let mut spec = SceneSpec {
            room_min,
            room_max,
            objects,
            l_cls,
            width,
            height,
            intrinsics,
            trajectory: Vec::new(),
        };
        spec.trajectory = generate_loop_trajectory(&spec, &mut rng, n_frames);
        spec
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v3 = |v: Vector3<f64>| format!("{} {} {}", v.x, v.y, v.z);
        writeln!(s, "room_min = {}", v3(self.room_min)).unwrap();
        writeln!(s, "room_max = {}", v3(self.room_max)).unwrap();
        writeln!(s, "l_cls = {}", self.l_cls).unwrap();
        writeln!(s, "width = {}", self.width).unwrap();
        writeln!(s, "height = {}", self.height).unwrap();
        writeln!(
            s,
            "intrinsics = {} {} {} {}",
            self.intrinsics.fx, self.intrinsics.fy, self.intrinsics.cx, self.intrinsics.cy
        )
        .unwrap();
        for (i, obj) in self.objects.iter().enumerate() {
            match obj.shape {
                Primitive::Sphere { center, radius } => {
                    writeln!(s, "object.{i} = sphere {} {radius} {}", v3(center), obj.class_id).unwrap()
                }
                Primitive::Box { min, max } => {
                    writeln!(s, "object.{i} = box {} {} {}", v3(min), v3(max), obj.class_id).unwrap()
                }
            }
        }
        for (i, pose) in self.trajectory.iter().enumerate() {
            writeln!(s, "traj.{i} = {}", pose.to_tum_line(i as f64)).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<SceneSpec> {
        let mut room_min = None;
        let mut room_max = None;
        let mut l_cls = None;
        let mut width = None;
        let mut height = None;
        let mut intrinsics = None;
        let mut objects: Vec<(usize, SceneObject)> = Vec::new();
        let mut traj: Vec<(usize, CameraPose)> = Vec::new();

        let bad = |line: usize, why: &str| Error::Dataset(format!("scene spec line {line}: {why}"));
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(i + 1, "missing `=`"))?;
            let (k, v) = (k.trim(), v.trim());
            let nums: Vec<f64> = v
                .split_whitespace()
                .filter_map(|t| t.parse::<f64>().ok())
                .collect();
            match k {
                "room_min" => room_min = Some(Vector3::new(nums[0], nums[1], nums[2])),
                "room_max" => room_max = Some(Vector3::new(nums[0], nums[1], nums[2])),
                "l_cls" => l_cls = Some(nums[0] as usize),
                "width" => width = Some(nums[0] as usize),
                "height" => height = Some(nums[0] as usize),
                "intrinsics" => {
                    intrinsics =
                        Some(Intrinsics { fx: nums[0], fy: nums[1], cx: nums[2], cy: nums[3] })
                }
                _ if k.starts_with("object.") => {
                    let idx: usize =
                        k["object.".len()..].parse().map_err(|_| bad(i + 1, "bad object index"))?;
                    let mut toks = v.split_whitespace();
                    let kind = toks.next().ok_or_else(|| bad(i + 1, "missing shape"))?;
                    let rest: Vec<f64> =
                        toks.map(|t| t.parse::<f64>().map_err(|_| bad(i + 1, "bad number")))
                            .collect::<Result<_>>()?;
                    let obj = match kind {
                        "sphere" => SceneObject {
                            shape: Primitive::Sphere {
                                center: Vector3::new(rest[0], rest[1], rest[2]),
                                radius: rest[3],
                            },
                            class_id: rest[4] as usize,
                        },
                        "box" => SceneObject {
                            shape: Primitive::Box {
                                min: Vector3::new(rest[0], rest[1], rest[2]),
                                max: Vector3::new(rest[3], rest[4], rest[5]),
                            },
                            class_id: rest[6] as usize,
                        },
                        other => return Err(bad(i + 1, &format!("unknown shape `{other}`"))),
                    };
                    objects.push((idx, obj));
                }
                _ if k.starts_with("traj.") => {
                    let idx: usize =
                        k["traj.".len()..].parse().map_err(|_| bad(i + 1, "bad traj index"))?;
                    let (_, pose) = CameraPose::from_tum_parts(&nums)
                        .ok_or_else(|| bad(i + 1, "bad TUM pose"))?;
                    traj.push((idx, pose));
                }
                other => return Err(bad(i + 1, &format!("unknown key `{other}`"))),
            }
        }
        objects.sort_by_key(|(i, _)| *i);
        traj.sort_by_key(|(i, _)| *i);
        let spec = SceneSpec {
            room_min: room_min.ok_or_else(|| Error::Dataset("scene spec missing room_min".into()))?,
            room_max: room_max.ok_or_else(|| Error::Dataset("scene spec missing room_max".into()))?,
            l_cls: l_cls.ok_or_else(|| Error::Dataset("scene spec missing l_cls".into()))?,
            width: width.ok_or_else(|| Error::Dataset("scene spec missing width".into()))?,
            height: height.ok_or_else(|| Error::Dataset("scene spec missing height".into()))?,
            intrinsics: intrinsics
                .ok_or_else(|| Error::Dataset("scene spec missing intrinsics".into()))?,
            objects: objects.into_iter().map(|(_, o)| o).collect(),
            trajectory: traj.into_iter().map(|(_, p)| p).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SceneSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SceneSpec::from_text(&text)
    }
}

/// Smooth closed loop around the room center: a base ellipse with low-pass
/// sinusoidal perturbations, looking inward and slightly down.
fn generate_loop_trajectory(
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
    n_frames: usize,
) -> Vec<CameraPose> {
    let center = (spec.room_min + spec.room_max) * 0.5;
    let half = (spec.room_max - spec.room_min) * 0.5;
    let rx = half.x - 1.1;
    let ry = half.y - 1.1;
    let z0 = spec.room_min.z + 1.8;

    // random low-frequency harmonics (orders 1..3)
    let mut harm = |scale: f64| -> [(f64, f64, f64); 2] {
        [
            (rng.gen_range(-scale..scale), rng.gen_range(0.0..std::f64::consts::TAU), 2.0),
            (rng.gen_range(-scale..scale), rng.gen_range(0.0..std::f64::consts::TAU), 3.0),
        ]
    };
    let hx = harm(0.15);
    let hy = harm(0.15);
    let hz = harm(0.10);
    let eval = |h: &[(f64, f64, f64); 2], th: f64| -> f64 {
        h.iter().map(|(a, p, k)| a * (k * th + p).sin()).sum()
    };

    let mut poses = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let th = i as f64 / n_frames as f64 * std::f64::consts::TAU;
        let pos = Vector3::new(
            center.x + rx * th.cos() + eval(&hx, th),
            center.y + ry * th.sin() + eval(&hy, th),
            z0 + eval(&hz, th),
        );
        // Look toward a point above the floor near the room center.
        let target = Vector3::new(center.x, center.y, 0.55);
        poses.push(look_at(pos, target));
    }
    poses
}

/// Camera-to-world pose with +z forward toward `target`, +x right, +y down.
pub fn look_at(position: Vector3<f64>, target: Vector3<f64>) -> CameraPose {
    let up = Vector3::new(0.0, 0.0, 1.0);
    let fwd = (target - position).normalize();
    let x = fwd.cross(&up).normalize();
    let y = fwd.cross(&x).normalize();
    let rot = nalgebra::Matrix3::from_columns(&[x, y, fwd]);
    CameraPose::new(
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rot)),
        position,
    )
}

/// Closed-form SDF over a [`SceneSpec`]: room-shell complement unioned with
/// the object primitives by minimum. Positive in free space.
#[derive(Debug, Clone)]
pub struct SdfOracle {
    room_min: Vector3<f64>,
    room_max: Vector3<f64>,
    objects: Vec<SceneObject>,
    pub l_cls: usize,
}

impl SdfOracle {
    pub fn new(spec: &SceneSpec) -> SdfOracle {
        SdfOracle {
            room_min: spec.room_min,
            room_max: spec.room_max,
            objects: spec.objects.clone(),
            l_cls: spec.l_cls,
        }
    }

    fn room_shell_sdf(&self, p: Vector3<f64>) -> f64 {
        // The walls are the complement of the room box, so the shell SDF is
        // the negated box SDF.
        let room = Primitive::Box { min: self.room_min, max: self.room_max };
        -room.sdf(p)
    }

    /// Signed distance: negative inside solids, positive in free space.
    pub fn sdf(&self, p: Vector3<f64>) -> f64 {
        let mut d = self.room_shell_sdf(p);
        for obj in &self.objects {
            d = d.min(obj.shape.sdf(p));
        }
        d
    }

    /// Class of the nearest surface.
    pub fn class_of(&self, p: Vector3<f64>) -> usize {
        let mut best = self.room_shell_sdf(p).abs();
        let mut class = self.room_face_class(p);
        for obj in &self.objects {
            let d = obj.shape.sdf(p).abs();
            if d < best {
                best = d;
                class = obj.class_id;
            }
        }
        class
    }

    fn room_face_class(&self, p: Vector3<f64>) -> usize {
        // nearest room face decides floor / wall / ceiling
        let d_floor = (p.z - self.room_min.z).abs();
        let d_ceil = (p.z - self.room_max.z).abs();
        let d_wall = (p.x - self.room_min.x)
            .abs()
            .min((p.x - self.room_max.x).abs())
            .min((p.y - self.room_min.y).abs())
            .min((p.y - self.room_max.y).abs());
        if d_floor <= d_ceil && d_floor <= d_wall {
            CLASS_FLOOR
        } else if d_ceil <= d_wall {
            CLASS_CEILING
        } else {
            CLASS_WALL
        }
    }

    /// Outward (into free space) surface normal by central differences.
    pub fn normal(&self, p: Vector3<f64>) -> Vector3<f64> {
        let h = 1e-5;
        let g = Vector3::new(
            self.sdf(p + Vector3::new(h, 0.0, 0.0)) - self.sdf(p - Vector3::new(h, 0.0, 0.0)),
            self.sdf(p + Vector3::new(0.0, h, 0.0)) - self.sdf(p - Vector3::new(0.0, h, 0.0)),
            self.sdf(p + Vector3::new(0.0, 0.0, h)) - self.sdf(p - Vector3::new(0.0, 0.0, h)),
        );
        let n = g.norm();
        if n > 0.0 {
            g / n
        } else {
            Vector3::new(0.0, 0.0, 1.0)
        }
    }

    /// First sign crossing of the SDF along `origin + t * dir`, `t` in ray
    /// distance (meters). Returns `(t, class)`.
    pub fn cast_ray(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<(f64, usize)> {
        let t_max = (self.room_max - self.room_min).norm() * 2.0;
        let mut t = 0.0;
        let mut prev_t = 0.0;
        let mut steps = 0;
        while t < t_max && steps < 100_000 {
            let d = self.sdf(origin + dir * t);
            if d < 0.0 {
                // bisect [prev_t, t]
                let (mut lo, mut hi) = (prev_t, t);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if self.sdf(origin + dir * mid) < 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let t_hit = 0.5 * (lo + hi);
                let p = origin + dir * t_hit;
                return Some((t_hit, self.class_of(p)));
            }
            prev_t = t;
            t += d.max(1e-5);
            steps += 1;
        }
        None
    }
}

/// Deterministic per-class albedo palette.
pub fn class_albedo(class: usize) -> [f64; 3] {
    match class {
        CLASS_FLOOR => [0.55, 0.42, 0.30],
        CLASS_WALL => [0.75, 0.73, 0.68],
        CLASS_CEILING => [0.85, 0.85, 0.88],
        c => {
            // golden-ratio hue walk for object classes
            let h = ((c - FIRST_OBJECT_CLASS) as f64 * 0.618_033_988_75).fract();
            hsv_to_rgb(h, 0.65, 0.85)
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const LIGHT_DIR: [f64; 3] = [0.35, 0.25, 0.90];

/// Render every trajectory pose of `spec` against the exact oracle.
///
/// Channels are quantized exactly as they would be stored on disk (8-bit
/// color, millimeter depth), so a save/load round trip is bit-exact.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(Vec<Frame>, SdfOracle)> {
    spec.validate()?;
    let mut spec = spec.clone();
    if spec.trajectory.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        spec.trajectory = generate_loop_trajectory(&spec, &mut rng, 150);
    }
    let oracle = SdfOracle::new(&spec);
    let light = Vector3::new(LIGHT_DIR[0], LIGHT_DIR[1], LIGHT_DIR[2]).normalize();
    let (h, w) = (spec.height, spec.width);
    let k = spec.intrinsics;

    let mut frames = Vec::with_capacity(spec.trajectory.len());
    for (idx, pose) in spec.trajectory.iter().enumerate() {
        let mut rgb = Array3::zeros((h, w, 3));
        let mut depth = Array2::zeros((h, w));
        let mut semantic = Array2::from_elem((h, w), -1i32);
        for v in 0..h {
            for u in 0..w {
                let dir_cam = Vector3::new(
                    (u as f64 - k.cx) / k.fx,
                    (v as f64 - k.cy) / k.fy,
                    1.0,
                );
                let ray_scale = dir_cam.norm();
                let dir_world = pose.rotate(dir_cam / ray_scale);
                let (t, class) = oracle.cast_ray(pose.translation, dir_world).ok_or_else(|| {
                    Error::SceneGeneration(format!("ray escaped the room at frame {idx} pixel ({u},{v})"))
                })?;
                let z = t / ray_scale; // z-depth
                let p = pose.translation + dir_world * t;
                let n = oracle.normal(p);
                let albedo = class_albedo(class);
                let shade = 0.35 + 0.65 * n.dot(&light).max(0.0);
                for c in 0..3 {
                    let val = (albedo[c] * shade).clamp(0.0, 1.0);
                    rgb[[v, u, c]] = (val * 255.0).round() / 255.0;
                }
                depth[[v, u]] = ((z * 1000.0).round() / 1000.0).min(65.535);
                semantic[[v, u]] = class as i32;
            }
        }
        frames.push(Frame {
            rgb,
            depth,
            semantic,
            intrinsics: k,
            frame_index: idx,
            gt_pose: Some(*pose),
        });
    }
    Ok((frames, oracle))
}

fn frame_name(i: usize) -> String {
    format!("{i:06}.png")
}

pub fn save_sequence(dir: &Path, frames: &[Frame]) -> Result<()> {
    for sub in ["rgb", "depth", "semantic"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let k = frames
        .first()
        .ok_or_else(|| Error::Dataset("cannot save an empty sequence".into()))?
        .intrinsics;
    std::fs::write(dir.join("intrinsics.txt"), format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy))
        .map_err(|e| Error::io(dir.join("intrinsics.txt"), e))?;

    let mut traj = String::new();
    let mut have_all_poses = true;
    for f in frames {
        let (h, w) = (f.height(), f.width());
        let mut rgb_img = image::RgbImage::new(w as u32, h as u32);
        for v in 0..h {
            for u in 0..w {
                rgb_img.put_pixel(
                    u as u32,
                    v as u32,
                    image::Rgb([
                        (f.rgb[[v, u, 0]] * 255.0).round() as u8,
                        (f.rgb[[v, u, 1]] * 255.0).round() as u8,
                        (f.rgb[[v, u, 2]] * 255.0).round() as u8,
                    ]),
                );
            }
        }
        let rgb_path = dir.join("rgb").join(frame_name(f.frame_index));
        rgb_img.save(&rgb_path).map_err(|e| Error::Image { path: rgb_path.clone(), message: e.to_string() })?;

        let mut depth_img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
        for v in 0..h {
            for u in 0..w {
                depth_img.put_pixel(
                    u as u32,
                    v as u32,
                    image::Luma([(f.depth[[v, u]] * 1000.0).round() as u16]),
                );
            }
        }
        let depth_path = dir.join("depth").join(frame_name(f.frame_index));
        depth_img
            .save(&depth_path)
            .map_err(|e| Error::Image { path: depth_path.clone(), message: e.to_string() })?;

        if f.semantic.iter().any(|&c| c >= 0) {
            let mut sem_img = image::GrayImage::new(w as u32, h as u32);
            for v in 0..h {
                for u in 0..w {
                    sem_img.put_pixel(u as u32, v as u32, image::Luma([f.semantic[[v, u]].max(0) as u8]));
                }
            }
            let sem_path = dir.join("semantic").join(frame_name(f.frame_index));
            sem_img
                .save(&sem_path)
                .map_err(|e| Error::Image { path: sem_path.clone(), message: e.to_string() })?;
        }

        match f.gt_pose {
            Some(p) => {
                traj.push_str(&p.to_tum_line(f.frame_index as f64));
                traj.push('\n');
            }
            None => have_all_poses = false,
        }
    }
    if have_all_poses {
        std::fs::write(dir.join("traj_gt.txt"), traj)
            .map_err(|e| Error::io(dir.join("traj_gt.txt"), e))?;
    }
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<Vec<Frame>> {
    let intr_path = dir.join("intrinsics.txt");
    let intr_text =
        std::fs::read_to_string(&intr_path).map_err(|e| Error::io(&intr_path, e))?;
    let nums: Vec<f64> =
        intr_text.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    if nums.len() < 4 {
        return Err(Error::Dataset("intrinsics.txt must contain `fx fy cx cy`".into()));
    }
    let k = Intrinsics { fx: nums[0], fy: nums[1], cx: nums[2], cy: nums[3] };
    k.validate()?;

    let rgb_dir = dir.join("rgb");
    let mut indices: Vec<usize> = std::fs::read_dir(&rgb_dir)
        .map_err(|e| Error::io(&rgb_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".png")?.parse::<usize>().ok()
        })
        .collect();
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::Dataset(format!("no rgb frames found in {}", rgb_dir.display())));
    }

    let traj = load_tum_trajectory(&dir.join("traj_gt.txt")).ok();

    let mut frames = Vec::with_capacity(indices.len());
    for &i in &indices {
        let rgb_path = dir.join("rgb").join(frame_name(i));
        let depth_path = dir.join("depth").join(frame_name(i));
        let load_err = |message: String| Error::DatasetLoad { frame_index: i, message };

        let rgb_img = image::open(&rgb_path)
            .map_err(|e| load_err(format!("rgb image {}: {e}", rgb_path.display())))?
            .to_rgb8();
        let depth_img = image::open(&depth_path)
            .map_err(|e| load_err(format!("depth image {}: {e}", depth_path.display())))?
            .to_luma16();
        let (w, h) = (rgb_img.width() as usize, rgb_img.height() as usize);
        if depth_img.width() as usize != w || depth_img.height() as usize != h {
            return Err(load_err("rgb/depth size mismatch".into()));
        }

        let mut rgb = Array3::zeros((h, w, 3));
        let mut depth = Array2::zeros((h, w));
        for v in 0..h {
            for u in 0..w {
                let px = rgb_img.get_pixel(u as u32, v as u32);
                for c in 0..3 {
                    rgb[[v, u, c]] = px[c] as f64 / 255.0;
                }
                depth[[v, u]] = depth_img.get_pixel(u as u32, v as u32)[0] as f64 / 1000.0;
            }
        }

        let sem_path = dir.join("semantic").join(frame_name(i));
        let semantic = if sem_path.exists() {
            let sem_img = image::open(&sem_path)
                .map_err(|e| load_err(format!("semantic image {}: {e}", sem_path.display())))?
                .to_luma8();
            Array2::from_shape_fn((h, w), |(v, u)| sem_img.get_pixel(u as u32, v as u32)[0] as i32)
        } else {
            Array2::from_elem((h, w), -1)
        };

        let gt_pose = traj.as_ref().and_then(|t| t.get(&i).copied());
        frames.push(Frame { rgb, depth, semantic, intrinsics: k, frame_index: i, gt_pose });
    }
    Ok(frames)
}

pub fn load_tum_trajectory(path: &Path) -> Result<std::collections::BTreeMap<usize, CameraPose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::collections::BTreeMap::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<f64> = line.split_whitespace().filter_map(|t| t.parse().ok()).collect();
        if let Some((t, pose)) = CameraPose::from_tum_parts(&nums) {
            out.insert(t.round() as usize, pose);
        }
    }
    Ok(out)
}
