//! Analytic ray casting against spheres, capped cylinders, oriented boxes and
//! a background plane. Rays start at the camera origin.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Row-major 3×3 rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation([[f64; 3]; 3]);

impl Rotation {
    /// Rotation `Rz(yaw)·Ry(pitch)·Rx(roll)`, angles in degrees.
    pub fn from_euler_deg(angles: Vec3) -> Self {
        let [rx, ry, rz] = angles.map(f64::to_radians);
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        Rotation([
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ])
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
    }

    pub fn apply_transpose(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Axis along local z, spanning `[-half_length, half_length]`.
    Cylinder {
        radius: f64,
        half_length: f64,
    },
    Box {
        half_extents: Vec3,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Camera-frame center in meters.
    pub center: Vec3,
    /// Euler angles in degrees (roll, pitch, yaw).
    #[serde(default)]
    pub rotation_deg: Vec3,
    pub transparent: bool,
    pub color: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals z-depth because ray directions have unit z.
    pub t: f64,
    pub normal: Vec3,
}

impl Primitive {
    fn rotation(&self) -> Rotation {
        Rotation::from_euler_deg(self.rotation_deg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        let ok = match &self.shape {
            Shape::Sphere { radius } => positive(*radius),
            Shape::Cylinder { radius, half_length } => positive(*radius) && positive(*half_length),
            Shape::Box { half_extents } => half_extents.iter().all(|h| positive(*h)),
        };
        if !ok {
            return Err(format!("primitive {:?} has nonpositive size", self.shape));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err("primitive center must be finite".into());
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err("primitive color must lie in [0,1]".into());
        }
        Ok(())
    }

    /// Nearest intersection in front of the camera along `dir` from the origin.
    pub fn intersect(&self, dir: Vec3) -> Option<Hit> {
        let rot = self.rotation();
        let o = rot.apply_transpose(scale(self.center, -1.0));
        let d = rot.apply_transpose(dir);
        let (t, n_local) = match &self.shape {
            Shape::Sphere { radius } => intersect_sphere(o, d, *radius)?,
            Shape::Cylinder { radius, half_length } => intersect_cylinder(o, d, *radius, *half_length)?,
            Shape::Box { half_extents } => intersect_box(o, d, *half_extents)?,
        };
        Some(Hit {
            t,
            normal: normalize(rot.apply(n_local)),
        })
    }

    /// Signed distance from a camera-frame point to the surface.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let q = self.rotation().apply_transpose(sub(p, self.center));
        match &self.shape {
            Shape::Sphere { radius } => norm(q) - radius,
            Shape::Cylinder { radius, half_length } => {
                let dr = (q[0] * q[0] + q[1] * q[1]).sqrt() - radius;
                let dz = q[2].abs() - half_length;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dr.max(dz).min(0.0)
            }
            Shape::Box { half_extents } => {
                let d = [
                    q[0].abs() - half_extents[0],
                    q[1].abs() - half_extents[1],
                    q[2].abs() - half_extents[2],
                ];
                let outside = norm(d.map(|x| x.max(0.0)));
                outside + d[0].max(d[1]).max(d[2]).min(0.0)
            }
        }
    }
}

const EPS_T: f64 = 1e-9;

fn smallest_positive(t0: f64, t1: f64) -> Option<f64> {
    let (a, b) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
    if a > EPS_T {
        Some(a)
    } else if b > EPS_T {
        Some(b)
    } else {
        None
    }
}

fn intersect_sphere(o: Vec3, d: Vec3, r: f64) -> Option<(f64, Vec3)> {
    let a = dot(d, d);
    let b = dot(o, d);
    let c = dot(o, o) - r * r;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    // Numerically stable root pair.
    let q = if b > 0.0 { -(b + s) } else { -b + s };
    let (t0, t1) = if q != 0.0 { (q / a, c / q) } else { (0.0, 0.0) };
    let t = smallest_positive(t0, t1)?;
    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    Some((t, p))
}

fn intersect_cylinder(o: Vec3, d: Vec3, r: f64, h: f64) -> Option<(f64, Vec3)> {
    let mut best: Option<(f64, Vec3)> = None;
    let mut consider = |t: f64, n: Vec3| {
        if t > EPS_T && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, n));
        }
    };
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 0.0 {
        let b = o[0] * d[0] + o[1] * d[1];
        let c = o[0] * o[0] + o[1] * o[1] - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let s = disc.sqrt();
            for t in [(-b - s) / a, (-b + s) / a] {
                let z = o[2] + t * d[2];
                if z.abs() <= h {
                    consider(t, [o[0] + t * d[0], o[1] + t * d[1], 0.0]);
                }
            }
        }
    }
    if d[2] != 0.0 {
        for cap in [-h, h] {
            let t = (cap - o[2]) / d[2];
            let x = o[0] + t * d[0];
            let y = o[1] + t * d[1];
            if x * x + y * y <= r * r {
                consider(t, [0.0, 0.0, cap.signum()]);
            }
        }
    }
    best
}

fn intersect_box(o: Vec3, d: Vec3, he: Vec3) -> Option<(f64, Vec3)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut far_axis = 0;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k].abs() > he[k] {
                return None;
            }
            continue;
        }
        let mut t0 = (-he[k] - o[k]) / d[k];
        let mut t1 = (he[k] - o[k]) / d[k];
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = k;
        }
        if t1 < t_far {
            t_far = t1;
            far_axis = k;
        }
    }
    if t_near > t_far {
        return None;
    }
    let (t, axis) = if t_near > EPS_T {
        (t_near, near_axis)
    } else if t_far > EPS_T {
        (t_far, far_axis)
    } else {
        return None;
    };
    let mut n = [0.0; 3];
    let p = o[axis] + t * d[axis];
    n[axis] = p.signum();
    Some((t, n))
}

/// Background plane `n·X = offset`, parameterized by its depth on the optical
/// axis and a tilt about the x and y axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPlane {
    /// Depth where the optical axis meets the plane, meters.
    pub depth: f64,
    /// Tilt in degrees about the camera x and y axes.
    #[serde(default)]
    pub tilt_deg: [f64; 2],
    pub color_a: Vec3,
    pub color_b: Vec3,
    /// Texture feature size in pixels.
    #[serde(default = "default_texture_scale")]
    pub texture_scale: f64,
}

fn default_texture_scale() -> f64 {
    6.0
}

impl BackgroundPlane {
    pub fn normal(&self) -> Vec3 {
        Rotation::from_euler_deg([self.tilt_deg[0], self.tilt_deg[1], 0.0]).apply([0.0, 0.0, 1.0])
    }

    pub fn intersect(&self, dir: Vec3) -> Option<Hit> {
        let n = self.normal();
        let offset = self.depth * n[2];
        let denom = dot(n, dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = offset / denom;
        (t > EPS_T).then_some(Hit { t, normal: n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prim(shape: Shape, center: Vec3, rot: Vec3) -> Primitive {
        Primitive {
            shape,
            center,
            rotation_deg: rot,
            transparent: true,
            color: [0.5; 3],
        }
    }

    #[test]
    fn sphere_on_axis() {
        let s = prim(Shape::Sphere { radius: 0.1 }, [0.0, 0.0, 0.5], [0.0; 3]);
        let hit = s.intersect([0.0, 0.0, 1.0]).unwrap();
        assert!((hit.t - 0.4).abs() < 1e-12);
        assert!((hit.normal[2] + 1.0).abs() < 1e-12);
        assert!(s.intersect([1.0, 0.0, 1.0]).is_none());
    }

    #[test]
    fn hits_lie_on_surface() {
        let shapes = [
            prim(Shape::Sphere { radius: 0.08 }, [0.02, -0.01, 0.6], [0.0; 3]),
            prim(
                Shape::Cylinder {
                    radius: 0.04,
                    half_length: 0.1,
                },
                [0.0, 0.01, 0.55],
                [80.0, 10.0, 30.0],
            ),
            prim(
                Shape::Box {
                    half_extents: [0.05, 0.03, 0.04],
                },
                [-0.01, 0.0, 0.5],
                [20.0, 35.0, 10.0],
            ),
        ];
        for s in &shapes {
            let mut hits = 0;
            for i in 0..41 {
                for j in 0..41 {
                    let dir = [(i as f64 - 20.0) * 0.01, (j as f64 - 20.0) * 0.01, 1.0];
                    if let Some(h) = s.intersect(dir) {
                        hits += 1;
                        let p = scale(dir, h.t);
                        assert!(s.signed_distance(p).abs() < 1e-9, "{:?}", s.shape);
                    }
                }
            }
            assert!(hits > 10);
        }
    }

    #[test]
    fn tilted_plane_depth() {
        let plane = BackgroundPlane {
            depth: 1.0,
            tilt_deg: [0.0, 0.0],
            color_a: [0.0; 3],
            color_b: [1.0; 3],
            texture_scale: 4.0,
        };
        assert!((plane.intersect([0.3, -0.2, 1.0]).unwrap().t - 1.0).abs() < 1e-12);
        let tilted = BackgroundPlane {
            tilt_deg: [20.0, 0.0],
            ..plane
        };
        assert!((tilted.intersect([0.0, 0.0, 1.0]).unwrap().t - 1.0).abs() < 1e-12);
    }
}
