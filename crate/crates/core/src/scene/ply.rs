//! Binary PLY I/O for Gaussian scenes and seed point clouds.
//!
//! The on-disk Gaussian layout follows the common splatting convention:
//! positions and normals as floats, color as degree-0 `f_dc_*`
//! coefficients, `opacity` as a logit, `scale_*` as logs, and the rotation
//! quaternion as `rot_0..rot_3` (w, x, y, z). Values decode on load so the
//! in-memory scene always satisfies its invariants. Latents live in a
//! sidecar file (raw little-endian f32 rows under the `RGLAT1` header);
//! a missing sidecar loads as all-zero latents.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::io::{self, MAGIC_LATENTS};
use crate::scene::{Gaussian3D, GaussianScene};

/// Degree-0 spherical-harmonic basis constant: color = 0.5 + C0 * f_dc.
const SH_C0: f64 = 0.282_094_791_773_878_14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PropType {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl PropType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "float" | "float32" => Some(PropType::F32),
            "double" | "float64" => Some(PropType::F64),
            "uchar" | "uint8" => Some(PropType::U8),
            "int" | "int32" => Some(PropType::I32),
            "uint" | "uint32" => Some(PropType::U32),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            PropType::U8 => 1,
            PropType::F32 | PropType::I32 | PropType::U32 => 4,
            PropType::F64 => 8,
        }
    }

    fn read(self, bytes: &[u8]) -> f64 {
        match self {
            PropType::F32 => f32::from_le_bytes(bytes.try_into().unwrap()) as f64,
            PropType::F64 => f64::from_le_bytes(bytes.try_into().unwrap()),
            PropType::U8 => bytes[0] as f64,
            PropType::I32 => i32::from_le_bytes(bytes.try_into().unwrap()) as f64,
            PropType::U32 => u32::from_le_bytes(bytes.try_into().unwrap()) as f64,
        }
    }
}

struct VertexLayout {
    count: usize,
    /// (name, type, byte offset) per property, in declaration order.
    props: Vec<(String, PropType, usize)>,
    stride: usize,
}

impl VertexLayout {
    fn offset_of(&self, name: &str) -> Option<(PropType, usize)> {
        self.props.iter().find(|(n, _, _)| n == name).map(|&(_, t, o)| (t, o))
    }
}

/// Parses the header of a binary little-endian PLY and returns the vertex
/// layout, leaving the reader positioned at the start of vertex data.
fn parse_header(r: &mut impl BufRead, path: &Path) -> Result<VertexLayout> {
    let mut line = String::new();
    let read_line = |r: &mut dyn BufRead, line: &mut String| -> Result<()> {
        line.clear();
        let n = r.read_line(line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::format(path, "unexpected end of header"));
        }
        Ok(())
    };

    read_line(r, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::format(path, "not a PLY file (missing 'ply' magic)"));
    }
    read_line(r, &mut line)?;
    if line.trim_end() != "format binary_little_endian 1.0" {
        return Err(Error::format(
            path,
            format!("unsupported format line {:?}; only binary_little_endian 1.0", line.trim_end()),
        ));
    }

    let mut count = None;
    let mut props: Vec<(String, PropType, usize)> = Vec::new();
    let mut stride = 0usize;
    let mut in_vertex = false;
    loop {
        read_line(r, &mut line)?;
        let l = line.trim_end();
        if l == "end_header" {
            break;
        }
        let mut parts = l.split_whitespace();
        match parts.next() {
            Some("comment") => {}
            Some("element") => {
                let name = parts.next().unwrap_or("");
                if name == "vertex" {
                    let n: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::format(path, "bad vertex element count"))?;
                    count = Some(n);
                    in_vertex = true;
                } else {
                    if count.is_none() {
                        return Err(Error::format(path, "first element must be vertex"));
                    }
                    in_vertex = false;
                }
            }
            Some("property") => {
                if !in_vertex {
                    continue;
                }
                let ty_s = parts.next().unwrap_or("");
                if ty_s == "list" {
                    return Err(Error::format(path, "list properties on vertex are unsupported"));
                }
                let ty = PropType::parse(ty_s).ok_or_else(|| {
                    Error::format(path, format!("unsupported property type {ty_s:?}"))
                })?;
                let name = parts
                    .next()
                    .ok_or_else(|| Error::format(path, "property without a name"))?;
                props.push((name.to_string(), ty, stride));
                stride += ty.size();
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::format(path, "no vertex element"))?;
    Ok(VertexLayout { count, props, stride })
}

/// Whether a PLY carries the full Gaussian property set, as opposed to a
/// plain seed point cloud. Probes the header for `opacity`.
pub fn ply_is_gaussian(path: &Path) -> Result<bool> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    Ok(parse_header(&mut r, path)?.offset_of("opacity").is_some())
}

/// Loads a Gaussian scene from a PLY plus an optional latent sidecar.
/// A missing/`None` sidecar yields zero latents of width `latent_dim`.
pub fn load_scene(
    ply_path: &Path,
    latents_path: Option<&Path>,
    latent_dim: usize,
) -> Result<GaussianScene> {
    let file = File::open(ply_path).map_err(|e| Error::io(ply_path, e))?;
    let mut r = BufReader::new(file);
    let layout = parse_header(&mut r, ply_path)?;

    let required = [
        "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
        "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    ];
    let mut lookup = Vec::with_capacity(required.len());
    for name in required {
        let (ty, off) = layout
            .offset_of(name)
            .ok_or_else(|| Error::format(ply_path, format!("missing Gaussian attribute {name:?}")))?;
        lookup.push((ty, off));
    }

    let mut row = vec![0u8; layout.stride];
    let mut gaussians = Vec::with_capacity(layout.count);
    for i in 0..layout.count {
        r.read_exact(&mut row).map_err(|e| {
            Error::format(ply_path, format!("vertex {i}: truncated payload: {e}"))
        })?;
        let v: Vec<f64> = lookup
            .iter()
            .map(|&(ty, off)| ty.read(&row[off..off + ty.size()]))
            .collect();
        let quat = Vector4::new(v[11], v[12], v[13], v[10]); // (x,y,z,w) for nalgebra
        let norm = quat.norm();
        if norm < 1e-12 {
            return Err(Error::format(ply_path, format!("vertex {i}: zero-norm rotation")));
        }
        let rotation = UnitQuaternion::from_quaternion(Quaternion::from_vector(quat));
        // Decode storage codes; clamp so scene invariants hold exactly.
        let opacity = sigmoid(v[6]).clamp(1e-7, 1.0 - 1e-7);
        let scale = Vector3::new(v[7].exp(), v[8].exp(), v[9].exp());
        let color = [
            (0.5 + SH_C0 * v[3]).clamp(0.0, 1.0),
            (0.5 + SH_C0 * v[4]).clamp(0.0, 1.0),
            (0.5 + SH_C0 * v[5]).clamp(0.0, 1.0),
        ];
        gaussians.push(Gaussian3D {
            mean: Vector3::new(v[0], v[1], v[2]),
            rotation,
            scale,
            opacity,
            color,
            latent: Vec::new(),
        });
    }

    let latents = match latents_path {
        Some(p) if p.exists() => {
            let (count, dim, values) = io::load_raw(p, MAGIC_LATENTS)?;
            if count as usize != gaussians.len() {
                return Err(Error::format(
                    p,
                    format!("sidecar has {count} rows but scene has {} Gaussians", gaussians.len()),
                ));
            }
            Some((dim as usize, values))
        }
        _ => None,
    };
    match latents {
        Some((dim, values)) => {
            for (i, g) in gaussians.iter_mut().enumerate() {
                g.latent = values[i * dim..(i + 1) * dim].to_vec();
            }
            GaussianScene::new(gaussians, dim)
        }
        None => {
            for g in &mut gaussians {
                g.latent = vec![0.0; latent_dim];
            }
            GaussianScene::new(gaussians, latent_dim)
        }
    }
}

/// Writes a scene as binary PLY, plus the latent sidecar when requested.
pub fn save_scene(
    scene: &GaussianScene,
    ply_path: &Path,
    latents_path: Option<&Path>,
) -> Result<()> {
    scene.validate()?;
    let file = File::create(ply_path).map_err(|e| Error::io(ply_path, e))?;
    let mut w = BufWriter::new(file);
    let names = [
        "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0",
        "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    ];
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", scene.len()));
    for n in names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(|e| Error::io(ply_path, e))?;

    for g in &scene.gaussians {
        let q = g.rotation.as_ref().coords; // (x, y, z, w)
        let vals: [f64; 17] = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            0.0,
            0.0,
            0.0,
            (g.color[0] - 0.5) / SH_C0,
            (g.color[1] - 0.5) / SH_C0,
            (g.color[2] - 0.5) / SH_C0,
            logit(g.opacity),
            g.scale.x.ln(),
            g.scale.y.ln(),
            g.scale.z.ln(),
            q.w,
            q.x,
            q.y,
            q.z,
        ];
        io::write_f32s(&mut w, vals.iter().map(|&v| v as f32))
            .map_err(|e| Error::io(ply_path, e))?;
    }
    w.flush().map_err(|e| Error::io(ply_path, e))?;

    if let Some(p) = latents_path {
        let flat: Vec<f64> = scene.gaussians.iter().flat_map(|g| g.latent.iter().copied()).collect();
        io::save_raw(p, MAGIC_LATENTS, scene.len() as u32, scene.latent_dim as u32, &flat)?;
    }
    Ok(())
}

/// Writes only the latent sidecar, leaving the PLY untouched. Used when
/// a training stage changed latents but is contractually forbidden from
/// touching geometry.
pub fn save_latents(scene: &GaussianScene, path: &Path) -> Result<()> {
    let flat: Vec<f64> = scene.gaussians.iter().flat_map(|g| g.latent.iter().copied()).collect();
    io::save_raw(path, MAGIC_LATENTS, scene.len() as u32, scene.latent_dim as u32, &flat)
}

/// Loads a plain point cloud (x, y, z and optional red/green/blue) used to
/// seed geometry training.
pub fn load_points(path: &Path) -> Result<Vec<(Vector3<f64>, [f64; 3])>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let layout = parse_header(&mut r, path)?;
    let pos: Vec<(PropType, usize)> = ["x", "y", "z"]
        .iter()
        .map(|n| {
            layout
                .offset_of(n)
                .ok_or_else(|| Error::format(path, format!("missing point attribute {n:?}")))
        })
        .collect::<Result<_>>()?;
    let rgb: Option<Vec<(PropType, usize)>> = ["red", "green", "blue"]
        .iter()
        .map(|n| layout.offset_of(n))
        .collect();

    let mut row = vec![0u8; layout.stride];
    let mut points = Vec::with_capacity(layout.count);
    for i in 0..layout.count {
        r.read_exact(&mut row)
            .map_err(|e| Error::format(path, format!("point {i}: truncated payload: {e}")))?;
        let p = Vector3::new(
            pos[0].0.read(&row[pos[0].1..pos[0].1 + pos[0].0.size()]),
            pos[1].0.read(&row[pos[1].1..pos[1].1 + pos[1].0.size()]),
            pos[2].0.read(&row[pos[2].1..pos[2].1 + pos[2].0.size()]),
        );
        let color = match &rgb {
            Some(c) => {
                let read = |j: usize| {
                    let (ty, off) = c[j];
                    let v = ty.read(&row[off..off + ty.size()]);
                    if ty == PropType::U8 {
                        v / 255.0
                    } else {
                        v
                    }
                };
                [read(0), read(1), read(2)]
            }
            None => [0.5, 0.5, 0.5],
        };
        points.push((p, color));
    }
    Ok(points)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::LATENT_DIM;
    use rand::{Rng, SeedableRng};

    fn random_scene(n: usize, seed: u64) -> GaussianScene {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let gaussians = (0..n)
            .map(|_| {
                let axis = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                Gaussian3D {
                    mean: Vector3::new(
                        rng.gen_range(-4.0..4.0),
                        rng.gen_range(-4.0..4.0),
                        rng.gen_range(-4.0..4.0),
                    ),
                    rotation: UnitQuaternion::from_scaled_axis(axis),
                    scale: Vector3::new(
                        rng.gen_range(0.01..2.0),
                        rng.gen_range(0.01..2.0),
                        rng.gen_range(0.01..2.0),
                    ),
                    opacity: rng.gen_range(0.01..0.99),
                    color: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                    latent: (0..LATENT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                }
            })
            .collect();
        GaussianScene::new(gaussians, LATENT_DIM).unwrap()
    }

    #[test]
    fn save_load_round_trip_within_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let ply = dir.path().join("scene.ply");
        let lat = dir.path().join("scene.latents");
        let scene = random_scene(40, 11);
        save_scene(&scene, &ply, Some(&lat)).unwrap();
        let back = load_scene(&ply, Some(&lat), LATENT_DIM).unwrap();
        assert_eq!(back.len(), scene.len());
        let tol = 1e-6;
        for (a, b) in scene.gaussians.iter().zip(&back.gaussians) {
            assert!((a.mean - b.mean).amax() < tol);
            assert!((a.scale - b.scale).amax() < tol * 2.0);
            assert!((a.opacity - b.opacity).abs() < tol);
            for k in 0..3 {
                assert!((a.color[k] - b.color[k]).abs() < tol);
            }
            // Quaternions are stored normalized; q and -q are the same rotation.
            let qa = a.rotation.as_ref().coords;
            let qb = b.rotation.as_ref().coords;
            assert!((qa - qb).amax().min((qa + qb).amax()) < tol);
            for (x, y) in a.latent.iter().zip(&b.latent) {
                assert!((x - y).abs() < tol);
            }
        }
    }

    #[test]
    fn missing_sidecar_zero_initializes_latents() {
        let dir = tempfile::tempdir().unwrap();
        let ply = dir.path().join("scene.ply");
        let scene = random_scene(5, 3);
        save_scene(&scene, &ply, None).unwrap();
        let back = load_scene(&ply, None, LATENT_DIM).unwrap();
        assert!(back.gaussians.iter().all(|g| g.latent.iter().all(|&v| v == 0.0)));
        let missing = dir.path().join("nope.latents");
        let back2 = load_scene(&ply, Some(&missing), LATENT_DIM).unwrap();
        assert!(back2.gaussians.iter().all(|g| g.latent.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sidecar_row_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ply = dir.path().join("scene.ply");
        let lat = dir.path().join("scene.latents");
        let scene = random_scene(5, 3);
        save_scene(&scene, &ply, Some(&lat)).unwrap();
        let shrunk = random_scene(4, 4);
        save_scene(&shrunk, &ply, None).unwrap();
        let err = load_scene(&ply, Some(&lat), LATENT_DIM).unwrap_err();
        assert!(err.to_string().contains("sidecar"), "{err}");
    }

    #[test]
    fn missing_attribute_error_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let ply = dir.path().join("bad.ply");
        let mut w = BufWriter::new(File::create(&ply).unwrap());
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
        )
        .unwrap();
        crate::io::write_f32s(&mut w, [0.0f32; 3]).unwrap();
        w.flush().unwrap();
        drop(w);
        let err = load_scene(&ply, None, LATENT_DIM).unwrap_err();
        assert!(err.to_string().contains("f_dc_0"), "{err}");
    }

    #[test]
    fn point_cloud_reads_positions_and_uchar_colors() {
        let dir = tempfile::tempdir().unwrap();
        let ply = dir.path().join("pts.ply");
        let mut w = BufWriter::new(File::create(&ply).unwrap());
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
        )
        .unwrap();
        for (p, c) in [([1.0f32, 2.0, 3.0], [255u8, 0, 128]), ([-1.0, 0.5, 2.0], [0, 255, 0])] {
            crate::io::write_f32s(&mut w, p).unwrap();
            use std::io::Write as _;
            w.write_all(&c).unwrap();
        }
        w.flush().unwrap();
        drop(w);
        let pts = load_points(&ply).unwrap();
        assert_eq!(pts.len(), 2);
        assert!((pts[0].0 - Vector3::new(1.0, 2.0, 3.0)).amax() < 1e-6);
        assert!((pts[0].1[0] - 1.0).abs() < 1e-6);
        assert!((pts[0].1[2] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn extra_properties_are_ignored() {
        // Scenes exported with higher-order color terms carry f_rest_*;
        // the loader must skip them by offset.
        let dir = tempfile::tempdir().unwrap();
        let ply = dir.path().join("scene.ply");
        let mut w = BufWriter::new(File::create(&ply).unwrap());
        let mut header = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 1\n");
        let names = [
            "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "f_rest_0", "f_rest_1", "opacity",
            "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
        ];
        for n in names {
            header.push_str(&format!("property float {n}\n"));
        }
        header.push_str("end_header\n");
        w.write_all(header.as_bytes()).unwrap();
        let vals = [
            1.0f32, 2.0, 3.0, 0.0, 0.0, 0.0, 9.9, 9.9, 0.0, -1.0, -1.0, -1.0, 1.0, 0.0, 0.0, 0.0,
        ];
        crate::io::write_f32s(&mut w, vals).unwrap();
        w.flush().unwrap();
        drop(w);
        let scene = load_scene(&ply, None, LATENT_DIM).unwrap();
        assert_eq!(scene.len(), 1);
        let g = &scene.gaussians[0];
        assert!((g.mean - Vector3::new(1.0, 2.0, 3.0)).amax() < 1e-6);
        assert!((g.opacity - 0.5).abs() < 1e-6); // sigmoid(0)
        assert!((g.scale.x - (-1.0f64).exp()).abs() < 1e-6);
    }
}
