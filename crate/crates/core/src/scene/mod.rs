//! Scene representation: anisotropic 3D Gaussians, pinhole cameras, and
//! the projection math connecting them.
//!
//! Conventions, used consistently everywhere:
//! - World-to-camera poses: `p_cam = R * p_world + t`, camera looks along
//!   +z, image x grows with camera x, image y with camera y (row index).
//! - Pixel coordinates are continuous; the center of pixel `(ix, iy)` is
//!   `(ix + 0.5, iy + 0.5)`. Depth is camera-space z, not ray length.
//! - NeRF-style `transforms.json` matrices are camera-to-world with the
//!   OpenGL axis convention (x right, y up, z backward); loading flips the
//!   y/z columns. [`Camera::to_nerf_matrix`] inverts the conversion.

mod ply;

pub use ply::{load_points, load_scene, ply_is_gaussian, save_latents, save_scene};

use nalgebra::{Matrix2, Matrix3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

/// Default latent width attached to every Gaussian.
pub const LATENT_DIM: usize = 32;

/// One anisotropic 3D Gaussian primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    /// Orientation of the principal axes.
    pub rotation: UnitQuaternion<f64>,
    /// Per-axis standard deviations; strictly positive.
    pub scale: Vector3<f64>,
    /// Blending opacity, exclusive (0, 1).
    pub opacity: f64,
    /// Flat RGB in [0, 1].
    pub color: [f64; 3],
    /// Trainable feature vector (`GaussianScene::latent_dim` entries).
    pub latent: Vec<f64>,
}

impl Gaussian3D {
    /// Isotropic helper used by fixtures and tests.
    pub fn isotropic(mean: Vector3<f64>, radius: f64, opacity: f64, color: [f64; 3]) -> Self {
        Gaussian3D {
            mean,
            rotation: UnitQuaternion::identity(),
            scale: Vector3::new(radius, radius, radius),
            opacity,
            color,
            latent: vec![0.0; LATENT_DIM],
        }
    }

    /// World-space covariance `R * diag(scale^2) * R^T`; symmetric positive
    /// definite for any valid rotation and positive scale.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix();
        let m = r.matrix() * Matrix3::from_diagonal(&self.scale);
        m * m.transpose()
    }
}

/// A set of Gaussians sharing one latent width.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian3D>,
    pub latent_dim: usize,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian3D>, latent_dim: usize) -> Result<Self> {
        let scene = GaussianScene { gaussians, latent_dim };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Initial scene for geometry training: one isotropic Gaussian per
    /// seed point, colored like the point, opacity 0.5, zero latents.
    /// The radius is the mean distance to the three nearest neighbors
    /// (quadratic scan; seed clouds are small), with a floor for
    /// degenerate clouds of coincident points.
    pub fn seed_from_points(points: &[(Vector3<f64>, [f64; 3])], latent_dim: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("cannot seed a scene from zero points".to_string()));
        }
        let gaussians = points
            .iter()
            .map(|&(p, color)| {
                let mut d: Vec<f64> = points
                    .iter()
                    .map(|&(q, _)| (q - p).norm())
                    .filter(|&d| d > 0.0)
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
                d.truncate(3);
                let radius = if d.is_empty() {
                    1e-2
                } else {
                    (d.iter().sum::<f64>() / d.len() as f64).max(1e-4)
                };
                Gaussian3D {
                    mean: p,
                    rotation: UnitQuaternion::identity(),
                    scale: Vector3::new(radius, radius, radius),
                    opacity: 0.5,
                    color: color.map(|c| c.clamp(0.0, 1.0)),
                    latent: vec![0.0; latent_dim],
                }
            })
            .collect();
        GaussianScene::new(gaussians, latent_dim)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            if !(g.opacity > 0.0 && g.opacity < 1.0) {
                return Err(Error::Invalid(format!(
                    "gaussian {i}: opacity {} outside (0,1)",
                    g.opacity
                )));
            }
            if !(g.scale.x > 0.0 && g.scale.y > 0.0 && g.scale.z > 0.0) {
                return Err(Error::Invalid(format!("gaussian {i}: non-positive scale")));
            }
            if g.latent.len() != self.latent_dim {
                return Err(Error::Invalid(format!(
                    "gaussian {i}: latent width {} != scene latent_dim {}",
                    g.latent.len(),
                    self.latent_dim
                )));
            }
            let finite = g.mean.iter().all(|v| v.is_finite())
                && g.scale.iter().all(|v| v.is_finite())
                && g.color.iter().all(|v| v.is_finite())
                && g.latent.iter().all(|v| v.is_finite())
                && g.rotation.as_ref().coords.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Invalid(format!("gaussian {i}: non-finite field")));
            }
        }
        Ok(())
    }
}

/// Pinhole camera with a world-to-camera rigid pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation: `p_cam = rotation * p_world + translation`.
    pub translation: Vector3<f64>,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` pointing toward the
    /// top of the image. `up` must not be parallel to the view direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
    ) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -rotation * eye;
        Camera {
            width,
            height,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
        }
    }

    /// Camera position in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    /// Unit view direction (camera +z) in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// World point to camera frame.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Projects a world point; `None` when it sits at or behind the plane
    /// `z = near`.
    pub fn project_point(&self, p: &Vector3<f64>, near: f64) -> Option<(Vector2<f64>, f64)> {
        let c = self.to_camera(p);
        if c.z <= near {
            return None;
        }
        let px = Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy);
        Some((px, c.z))
    }

    /// Lifts a continuous pixel coordinate at camera-space depth `d` back
    /// to a world point. Inverse of [`Camera::project_point`]:
    /// `project(deproject(px, d)) == (px, d)` for `d > near`, and the
    /// principal point deprojects onto the optical axis.
    pub fn deproject_pixel(&self, px: Vector2<f64>, depth: f64) -> Vector3<f64> {
        let c = Vector3::new(
            (px.x - self.cx) / self.fx * depth,
            (px.y - self.cy) / self.fy * depth,
            depth,
        );
        self.rotation.transpose() * (c - self.translation)
    }

    /// Builds a camera from a NeRF-style camera-to-world matrix (OpenGL
    /// axes). `fl` are focal lengths in pixels.
    pub fn from_nerf_matrix(
        c2w: &[[f64; 4]; 4],
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
    ) -> Self {
        // Columns: x stays, y (up) and z (backward) flip to image-down and
        // view-forward.
        let r_gl = Matrix3::new(
            c2w[0][0], c2w[0][1], c2w[0][2],
            c2w[1][0], c2w[1][1], c2w[1][2],
            c2w[2][0], c2w[2][1], c2w[2][2],
        );
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        let r_c2w = r_gl * flip;
        let pos = Vector3::new(c2w[0][3], c2w[1][3], c2w[2][3]);
        let rotation = r_c2w.transpose();
        let translation = -rotation * pos;
        Camera { width, height, fx, fy, cx, cy, rotation, translation }
    }

    /// Inverse of [`Camera::from_nerf_matrix`].
    pub fn to_nerf_matrix(&self) -> [[f64; 4]; 4] {
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        let r_gl = self.rotation.transpose() * flip;
        let pos = self.center();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r_gl[(i, j)];
            }
            m[i][3] = pos[i];
        }
        m[3][3] = 1.0;
        m
    }
}

/// A Gaussian pushed through a camera: 2-d mean in pixels, 2-d covariance,
/// and camera-space depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected2D {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

/// Projects a Gaussian with the locally linearized (Jacobian) camera map.
/// Returns `None` for Gaussians at or behind the near plane — they are
/// culled, not an error. `dilation` is added to both diagonal entries of
/// the projected covariance so tiny Gaussians still span about a pixel.
pub fn project_gaussian(
    cam: &Camera,
    g: &Gaussian3D,
    near: f64,
    dilation: f64,
) -> Option<Projected2D> {
    let t = cam.to_camera(&g.mean);
    if t.z <= near {
        return None;
    }
    let mean = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
    let j = projection_jacobian(cam, &t);
    let a = j * cam.rotation;
    let mut cov = a * g.covariance() * a.transpose();
    cov[(0, 0)] += dilation;
    cov[(1, 1)] += dilation;
    Some(Projected2D { mean, cov, depth: t.z })
}

/// Jacobian of the pinhole map at camera-space point `t` (2x3).
pub(crate) fn projection_jacobian(cam: &Camera, t: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let z2 = t.z * t.z;
    nalgebra::Matrix2x3::new(
        cam.fx / t.z, 0.0, -cam.fx * t.x / z2,
        0.0, cam.fy / t.z, -cam.fy * t.y / z2,
    )
}
