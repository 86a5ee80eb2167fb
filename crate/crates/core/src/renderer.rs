//! Six-view evaluation renders: canonical cameras on a circle around the
//! object, a z-buffered flat-shaded software rasterizer on white, and a
//! camera exporter for external renderers.
//!
//! Axes are right-handed with +y up; the front camera sits on +z and
//! azimuth turns counterclockwise seen from +y, so azimuth 90 is +x.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{MeshError, TriMesh};
use crate::image::RgbImage;
use crate::util::{fmt_fixed9, sin_cos_deg};

pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const AMBIENT: f64 = 0.2;
pub const NEAR: f64 = 1e-3;
pub const DEFAULT_COLOR: [f64; 3] = [0.7, 0.7, 0.7];
/// Brightest channel value a covered pixel may take, keeping covered
/// pixels distinguishable from the background.
pub const MAX_SHADE: u8 = 254;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewLabel {
    Front,
    FrontLeft,
    Left,
    Back,
    Right,
    FrontRight,
}

impl ViewLabel {
    pub const ALL: [ViewLabel; 6] = [
        ViewLabel::Front,
        ViewLabel::FrontLeft,
        ViewLabel::Left,
        ViewLabel::Back,
        ViewLabel::Right,
        ViewLabel::FrontRight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewLabel::Front => "front",
            ViewLabel::FrontLeft => "front-left",
            ViewLabel::Left => "left",
            ViewLabel::Back => "back",
            ViewLabel::Right => "right",
            ViewLabel::FrontRight => "front-right",
        }
    }
}

impl fmt::Display for ViewLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ViewLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ViewLabel::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| format!("unknown view label {s:?}"))
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RenderError {
    #[error("invalid view: {0}")]
    InvalidView(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(#[from] MeshError),
    #[error("view {label}: {source}")]
    View { label: ViewLabel, source: Box<RenderError> },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub label: ViewLabel,
    /// Degrees in [0, 360).
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub fov: f64,
    pub width: u32,
    pub height: u32,
}

impl ViewSpec {
    pub fn new(
        label: ViewLabel,
        azimuth: f64,
        elevation: f64,
        distance: f64,
        fov: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, RenderError> {
        let bad = |m: String| Err(RenderError::InvalidView(m));
        if !(distance > 0.0 && distance.is_finite()) {
            return bad(format!("distance must be positive, got {distance}"));
        }
        if !(fov > 0.0 && fov < 180.0) {
            return bad(format!("fov must lie in (0, 180), got {fov}"));
        }
        if !(elevation.abs() < 90.0) {
            return bad(format!("elevation must lie in (-90, 90), got {elevation}"));
        }
        if !azimuth.is_finite() {
            return bad(format!("azimuth must be finite, got {azimuth}"));
        }
        if width == 0 || height == 0 {
            return bad("resolution must be positive".into());
        }
        Ok(Self { label, azimuth: azimuth.rem_euclid(360.0), elevation, distance, fov, width, height })
    }

    /// `distance * (cos el sin az, sin el, cos el cos az)`.
    pub fn position(&self) -> [f64; 3] {
        let (sa, ca) = sin_cos_deg(self.azimuth);
        let (se, ce) = sin_cos_deg(self.elevation);
        [self.distance * ce * sa, self.distance * se, self.distance * ce * ca]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub azimuth_step: f64,
    pub start_azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub fov: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            azimuth_step: 60.0,
            start_azimuth: 0.0,
            elevation: 20.0,
            distance: 2.5,
            fov: 40.0,
            width: 512,
            height: 512,
        }
    }
}

impl ViewConfig {
    /// Six views 30 degrees apart.
    pub fn step_30() -> Self {
        Self { azimuth_step: 30.0, ..Self::default() }
    }

    pub fn with_resolution(mut self, width: u32, height: u32) -> Self {
        self.width = width;
        self.height = height;
        self
    }
}

/// Six views at a uniform azimuth step, labelled in list order.
pub fn canonical_views(config: &ViewConfig) -> Result<Vec<ViewSpec>, RenderError> {
    ViewLabel::ALL
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            ViewSpec::new(
                label,
                config.start_azimuth + config.azimuth_step * i as f64,
                config.elevation,
                config.distance,
                config.fov,
                config.width,
                config.height,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub pixels: RgbImage,
    pub view: ViewSpec,
    pub object_id: String,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Camera frame looking at the origin with +y as the up hint.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub eye: [f64; 3],
    pub forward: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(view: &ViewSpec) -> Self {
        let eye = view.position();
        let forward = normalize([-eye[0], -eye[1], -eye[2]]);
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        let (s, c) = sin_cos_deg(view.fov / 2.0);
        let focal = (view.height as f64 / 2.0) * c / s;
        Self { eye, forward, right, up, focal, width: view.width, height: view.height }
    }

    /// Screen-space `(x, y)` relative to the image centre (y up) and view depth.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let q = sub(p, self.eye);
        let depth = dot(self.forward, q);
        (self.focal * dot(self.right, q) / depth, self.focal * dot(self.up, q) / depth, depth)
    }

    /// Centre of pixel `(i, j)` in the same screen space.
    pub fn pixel_centre(&self, i: u32, j: u32) -> (f64, f64) {
        (i as f64 + 0.5 - self.width as f64 / 2.0, self.height as f64 / 2.0 - (j as f64 + 0.5))
    }
}

/// A triangle ready for rasterization: screen vertices, inverse depths and
/// its flat shade.
#[derive(Debug, Clone, Copy)]
pub struct ScreenTriangle {
    pub xy: [(f64, f64); 3],
    pub inv_depth: [f64; 3],
    pub shade: [u8; 3],
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

impl ScreenTriangle {
    fn area(&self) -> f64 {
        edge(self.xy[0], self.xy[1], self.xy[2])
    }

    /// Edge weights at `p` when `p` lies inside or on the boundary, either winding.
    pub fn weights(&self, p: (f64, f64)) -> Option<[f64; 3]> {
        let w0 = edge(self.xy[1], self.xy[2], p);
        let w1 = edge(self.xy[2], self.xy[0], p);
        let w2 = edge(self.xy[0], self.xy[1], p);
        let inside = (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0) || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0);
        inside.then_some([w0, w1, w2])
    }

    pub fn inv_depth_at(&self, w: [f64; 3]) -> f64 {
        let sum = w[0] + w[1] + w[2];
        (w[0] * self.inv_depth[0] + w[1] * self.inv_depth[1] + w[2] * self.inv_depth[2]) / sum
    }
}

fn shade_of(mesh: &TriMesh, tri: [usize; 3], camera: &Camera) -> [u8; 3] {
    let [a, b, c] = tri.map(|i| mesh.vertices[i]);
    let n = cross(sub(b, a), sub(c, a));
    let centroid = [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0, (a[2] + b[2] + c[2]) / 3.0];
    let to_eye = sub(camera.eye, centroid);
    let nn = dot(n, n).sqrt();
    let le = dot(to_eye, to_eye).sqrt();
    let lambert = if nn > 0.0 && le > 0.0 { (dot(n, to_eye) / (nn * le)).abs() } else { 0.0 };
    let intensity = AMBIENT + (1.0 - AMBIENT) * lambert;
    let color = match &mesh.vertex_colors {
        Some(cols) => {
            let [ca, cb, cc] = tri.map(|i| cols[i]);
            [0, 1, 2].map(|k| (ca[k] + cb[k] + cc[k]) / 3.0)
        }
        None => DEFAULT_COLOR,
    };
    color.map(|c| ((c.clamp(0.0, 1.0) * intensity * 255.0).round() as u8).min(MAX_SHADE))
}

/// Projects every triangle, dropping those with a vertex closer than the
/// near plane and those with zero screen area.
pub fn screen_triangles(mesh: &TriMesh, camera: &Camera) -> Vec<ScreenTriangle> {
    mesh.triangles
        .iter()
        .filter_map(|&tri| {
            let projected = tri.map(|i| camera.project(mesh.vertices[i]));
            if projected.iter().any(|p| !(p.2 >= NEAR)) {
                return None;
            }
            let st = ScreenTriangle {
                xy: projected.map(|p| (p.0, p.1)),
                inv_depth: projected.map(|p| 1.0 / p.2),
                shade: shade_of(mesh, tri, camera),
            };
            (st.area() != 0.0).then_some(st)
        })
        .collect()
}

/// Nearer wins; at equal depth the brighter shade wins, so the result does
/// not depend on triangle order.
fn beats(inv_depth: f64, shade: [u8; 3], best_inv_depth: f64, best_shade: [u8; 3]) -> bool {
    inv_depth > best_inv_depth || (inv_depth == best_inv_depth && shade > best_shade)
}

/// Flat-shaded z-buffer render on white.
pub fn render_image(mesh: &TriMesh, view: &ViewSpec) -> Result<RgbImage, RenderError> {
    mesh.validate()?;
    let camera = Camera::new(view);
    let (w, h) = (view.width, view.height);
    let mut img = RgbImage::filled(w, h, BACKGROUND);
    let mut zbuf = vec![f64::NEG_INFINITY; (w * h) as usize];
    let mut shades = vec![BACKGROUND; (w * h) as usize];
    for tri in screen_triangles(mesh, &camera) {
        let xs = tri.xy.map(|p| p.0);
        let ys = tri.xy.map(|p| p.1);
        let (min_x, max_x) =
            (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let (min_y, max_y) =
            (ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        // pixel centre i sits at i + 0.5 - w/2; take every centre in [min, max]
        let i0 = ((min_x + w as f64 / 2.0 - 0.5).ceil().max(0.0)) as i64;
        let i1 = ((max_x + w as f64 / 2.0 - 0.5).floor()).min(w as f64 - 1.0) as i64;
        let j0 = ((h as f64 / 2.0 - 0.5 - max_y).ceil().max(0.0)) as i64;
        let j1 = ((h as f64 / 2.0 - 0.5 - min_y).floor()).min(h as f64 - 1.0) as i64;
        for j in j0..=j1 {
            for i in i0..=i1 {
                let p = camera.pixel_centre(i as u32, j as u32);
                let Some(wts) = tri.weights(p) else { continue };
                let z = tri.inv_depth_at(wts);
                let k = (j as u32 * w + i as u32) as usize;
                if beats(z, tri.shade, zbuf[k], shades[k]) {
                    zbuf[k] = z;
                    shades[k] = tri.shade;
                }
            }
        }
    }
    for j in 0..h {
        for i in 0..w {
            let k = (j * w + i) as usize;
            if zbuf[k] > f64::NEG_INFINITY {
                img.set(i, j, shades[k]);
            }
        }
    }
    Ok(img)
}

/// Per-pixel loop over all triangles, without bounding boxes; the parity
/// oracle for `render_image`.
pub fn render_reference(mesh: &TriMesh, view: &ViewSpec) -> Result<RgbImage, RenderError> {
    mesh.validate()?;
    let camera = Camera::new(view);
    let tris = screen_triangles(mesh, &camera);
    let mut img = RgbImage::filled(view.width, view.height, BACKGROUND);
    for j in 0..view.height {
        for i in 0..view.width {
            let p = camera.pixel_centre(i, j);
            let mut best: Option<(f64, [u8; 3])> = None;
            for t in &tris {
                if let Some(wts) = t.weights(p) {
                    let z = t.inv_depth_at(wts);
                    if best.is_none_or(|(bz, bs)| beats(z, t.shade, bz, bs)) {
                        best = Some((z, t.shade));
                    }
                }
            }
            if let Some((_, shade)) = best {
                img.set(i, j, shade);
            }
        }
    }
    Ok(img)
}

pub fn render(mesh: &TriMesh, view: &ViewSpec, object_id: &str) -> Result<RenderedView, RenderError> {
    Ok(RenderedView { pixels: render_image(mesh, view)?, view: view.clone(), object_id: object_id.to_string() })
}

/// Renders every view (in parallel), preserving order.
pub fn render_all(mesh: &TriMesh, views: &[ViewSpec], object_id: &str) -> Result<Vec<RenderedView>, RenderError> {
    views
        .par_iter()
        .map(|v| render(mesh, v, object_id).map_err(|e| RenderError::View { label: v.label, source: Box::new(e) }))
        .collect()
}

/// One JSON object per line: label, position, look-at, up, fov and
/// resolution, reals with nine decimals.
pub fn camera_config_text(views: &[ViewSpec]) -> String {
    let mut out = String::new();
    for v in views {
        let camera = Camera::new(v);
        let vec3 = |a: [f64; 3]| format!("[{},{},{}]", fmt_fixed9(a[0]), fmt_fixed9(a[1]), fmt_fixed9(a[2]));
        out.push_str(&format!(
            "{{\"label\":\"{}\",\"position\":{},\"look_at\":{},\"up\":{},\"fov\":{},\"resolution\":[{},{}]}}\n",
            v.label,
            vec3(camera.eye),
            vec3([0.0; 3]),
            vec3(camera.up),
            fmt_fixed9(v.fov),
            v.width,
            v.height
        ));
    }
    out
}

pub fn export_camera_config(views: &[ViewSpec], path: &Path) -> Result<(), RenderError> {
    fs::write(path, camera_config_text(views))
        .map_err(|e: io::Error| RenderError::Io { path: path.display().to_string(), message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;

    fn view(label: ViewLabel, az: f64, el: f64, side: u32) -> ViewSpec {
        ViewSpec::new(label, az, el, 2.5, 40.0, side, side).unwrap()
    }

    fn covered(img: &RgbImage) -> usize {
        img.pixels().chunks_exact(3).filter(|p| *p != BACKGROUND).count()
    }

    #[test]
    fn default_and_preset_azimuths() {
        let az: Vec<f64> = canonical_views(&ViewConfig::default()).unwrap().iter().map(|v| v.azimuth).collect();
        assert_eq!(az, vec![0.0, 60.0, 120.0, 180.0, 240.0, 300.0]);
        let az: Vec<f64> = canonical_views(&ViewConfig::step_30()).unwrap().iter().map(|v| v.azimuth).collect();
        assert_eq!(az, vec![0.0, 30.0, 60.0, 90.0, 120.0, 150.0]);
        let views = canonical_views(&ViewConfig { elevation: 20.0, ..Default::default() }).unwrap();
        assert!(views.iter().all(|v| v.elevation == 20.0 && v.distance == 2.5 && v.fov == 40.0));
        let labels: Vec<&str> = views.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(labels, ["front", "front-left", "left", "back", "right", "front-right"]);
    }

    #[test]
    fn view_validation() {
        assert!(ViewSpec::new(ViewLabel::Front, 0.0, 0.0, 0.0, 40.0, 8, 8).is_err());
        assert!(ViewSpec::new(ViewLabel::Front, 0.0, 0.0, -1.0, 40.0, 8, 8).is_err());
        assert!(ViewSpec::new(ViewLabel::Front, 0.0, 90.0, 1.0, 40.0, 8, 8).is_err());
        assert!(ViewSpec::new(ViewLabel::Front, 0.0, 0.0, 1.0, 180.0, 8, 8).is_err());
        assert!(ViewSpec::new(ViewLabel::Front, 0.0, 0.0, 1.0, 40.0, 0, 8).is_err());
        assert_eq!(ViewSpec::new(ViewLabel::Front, 420.0, 0.0, 1.0, 40.0, 8, 8).unwrap().azimuth, 60.0);
    }

    #[test]
    fn camera_positions_follow_axis_convention() {
        let front = ViewSpec::new(ViewLabel::Front, 0.0, 0.0, 2.0, 40.0, 8, 8).unwrap();
        assert_eq!(front.position(), [0.0, 0.0, 2.0]);
        let side = ViewSpec::new(ViewLabel::Left, 90.0, 0.0, 2.0, 40.0, 8, 8).unwrap();
        assert_eq!(side.position(), [2.0, 0.0, 0.0]);
        let high = ViewSpec::new(ViewLabel::Front, 0.0, 30.0, 2.0, 40.0, 8, 8).unwrap();
        assert!((high.position()[1] - 1.0).abs() < 1e-15);
        let c = Camera::new(&front);
        assert_eq!(c.up, [0.0, 1.0, 0.0]);
        assert_eq!(c.right, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn camera_export() {
        let views = vec![
            ViewSpec::new(ViewLabel::Front, 0.0, 0.0, 2.0, 40.0, 512, 512).unwrap(),
            ViewSpec::new(ViewLabel::Left, 90.0, 0.0, 2.0, 40.0, 512, 512).unwrap(),
            ViewSpec::new(ViewLabel::Back, 200.0, 30.0, 2.0, 40.0, 512, 512).unwrap(),
        ];
        let text = camera_config_text(&views);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "{\"label\":\"front\",\"position\":[0.000000000,0.000000000,2.000000000],\"look_at\":[0.000000000,0.000000000,0.000000000],\"up\":[0.000000000,1.000000000,0.000000000],\"fov\":40.000000000,\"resolution\":[512,512]}"
        );
        for (line, v) in lines.iter().zip(&views) {
            let parsed: serde_json::Value = serde_json::from_str(line).unwrap();
            let p: Vec<f64> = parsed["position"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((norm - v.distance).abs() <= 1e-9);
        }
        let p1: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(p1["position"][0].as_f64().unwrap(), 2.0);
        let p2: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(p2["position"][1].as_f64().unwrap(), 1.0);
    }

    #[test]
    fn mesh_behind_camera_renders_white() {
        let v = view(ViewLabel::Front, 0.0, 0.0, 32);
        // the camera sits at z = 2.5 looking toward -z
        let mesh = TriMesh::cube(0.5).normalized_to_unit_sphere().scaled(0.2);
        let behind = TriMesh { vertices: mesh.vertices.iter().map(|p| [p[0], p[1], p[2] + 4.0]).collect(), ..mesh };
        assert_eq!(covered(&render_image(&behind, &v).unwrap()), 0);
    }

    #[test]
    fn single_triangle_covers_its_centroid() {
        let tri =
            TriMesh::new(vec![[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.0, 0.5, 0.0]], vec![[0, 1, 2]], None).unwrap();
        let v = ViewSpec::new(ViewLabel::Front, 0.0, 0.0, 2.5, 40.0, 64, 64).unwrap();
        let camera = Camera::new(&v);
        let (cx, cy, _) = camera.project([0.0, -0.5 / 3.0, 0.0]);
        let i = (cx + 32.0).floor() as u32;
        let j = (32.0 - cy).floor() as u32;
        let img = render_image(&tri, &v).unwrap();
        assert_ne!(img.get(i, j), BACKGROUND);
        // headlight aimed at the centroid (0, -1/6, 0) from (0, 0, 2.5)
        let cos = 2.5 / (2.5f64 * 2.5 + 1.0 / 36.0).sqrt();
        let expected = ((0.7 * (0.2 + 0.8 * cos) * 255.0f64).round()) as u8;
        assert_eq!(expected, 178);
        assert_eq!(img.get(i, j), [expected; 3]);
    }

    #[test]
    fn cube_front_matches_reference() {
        let cube = TriMesh::cube(1.0).normalized_to_unit_sphere();
        let v = view(ViewLabel::Front, 0.0, 20.0, 64);
        let fast = render_image(&cube, &v).unwrap();
        let slow = render_reference(&cube, &v).unwrap();
        assert_eq!(fast, slow);
        assert!(covered(&fast) > 0);
    }

    fn random_scene(seed: u64) -> TriMesh {
        let mut rng = seeded_rng(seed, 0);
        let n_tris = rng.random_range(1..=50);
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut colors = Vec::new();
        for t in 0..n_tris {
            let centre = [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
            let col = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            for _ in 0..3 {
                vertices.push([0, 1, 2].map(|k| centre[k] + rng.random_range(-0.4..0.4)));
                colors.push(col);
            }
            triangles.push([3 * t, 3 * t + 1, 3 * t + 2]);
        }
        TriMesh::new(vertices, triangles, Some(colors)).unwrap()
    }

    #[test]
    fn random_scenes_match_reference() {
        for seed in 0..20 {
            let mesh = random_scene(seed);
            let v = view(ViewLabel::FrontLeft, 37.0 * seed as f64, 15.0, 64);
            assert_eq!(render_image(&mesh, &v).unwrap(), render_reference(&mesh, &v).unwrap(), "scene {seed}");
        }
    }

    #[test]
    fn nearer_triangle_wins() {
        let mut verts = vec![[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.0, 0.5, 0.0]];
        verts.extend([[-0.5, -0.5, 0.5], [0.5, -0.5, 0.5], [0.0, 0.5, 0.5]]);
        let colors: Vec<[f64; 3]> = vec![[1.0, 0.0, 0.0]; 3].into_iter().chain(vec![[0.0, 0.0, 1.0]; 3]).collect();
        for order in [vec![[0, 1, 2], [3, 4, 5]], vec![[3, 4, 5], [0, 1, 2]]] {
            let mesh = TriMesh::new(verts.clone(), order, Some(colors.clone())).unwrap();
            let v = view(ViewLabel::Front, 0.0, 0.0, 32);
            let img = render_image(&mesh, &v).unwrap();
            let px = img.get(16, 17);
            assert!(px[2] > 0 && px[0] == 0, "{px:?}");
        }
    }

    #[test]
    fn six_views_are_deterministic_and_periodic() {
        let cube = TriMesh::cube(1.0).normalized_to_unit_sphere();
        let views = canonical_views(&ViewConfig::default().with_resolution(48, 48)).unwrap();
        let a = render_all(&cube, &views, "cube").unwrap();
        let b = render_all(&cube, &views, "cube").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|r| covered(&r.pixels) > 0));
        assert_eq!(a.iter().map(|r| r.view.label).collect::<Vec<_>>(), ViewLabel::ALL.to_vec());
        let v1 = view(ViewLabel::Left, 75.0, 20.0, 48);
        let v2 = view(ViewLabel::Left, 75.0 + 360.0, 20.0, 48);
        assert_eq!(render_image(&cube, &v1).unwrap(), render_image(&cube, &v2).unwrap());
    }

    fn flip(img: &RgbImage) -> RgbImage {
        let mut out = img.clone();
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set(img.width() - 1 - x, y, img.get(x, y));
            }
        }
        out
    }

    #[test]
    fn left_is_mirrored_right_for_symmetric_mesh() {
        // union of a scene and its x -> -x mirror image
        let half = random_scene(11);
        let mut mesh = half.clone();
        let n = half.vertices.len();
        mesh.vertices.extend(half.vertices.iter().map(|p| [-p[0], p[1], p[2]]));
        mesh.triangles.extend(half.triangles.iter().map(|t| t.map(|i| i + n)));
        mesh.vertex_colors.as_mut().unwrap().extend(half.vertex_colors.clone().unwrap());
        let views = canonical_views(&ViewConfig::default().with_resolution(64, 64)).unwrap();
        let left = render_image(&mesh, &views[2]).unwrap();
        let right = render_image(&mesh, &views[4]).unwrap();
        assert_eq!(left, flip(&right));
        let fl = render_image(&mesh, &views[1]).unwrap();
        let fr = render_image(&mesh, &views[5]).unwrap();
        assert_eq!(fl, flip(&fr));
    }

    #[test]
    fn coverage_invariant_under_compensated_scaling() {
        let mesh = random_scene(3);
        let v = view(ViewLabel::Back, 200.0, 10.0, 64);
        let far = ViewSpec { distance: v.distance * 2.0, ..v.clone() };
        let mask = |img: &RgbImage| img.pixels().chunks_exact(3).map(|p| p != BACKGROUND).collect::<Vec<_>>();
        assert_eq!(mask(&render_image(&mesh, &v).unwrap()), mask(&render_image(&mesh.scaled(2.0), &far).unwrap()));
    }

    #[test]
    fn covered_pixels_never_pure_white() {
        let white = TriMesh::cube(1.0).with_uniform_color([1.0, 1.0, 1.0]).normalized_to_unit_sphere();
        let img = render_image(&white, &view(ViewLabel::Front, 0.0, 0.0, 32)).unwrap();
        assert!(covered(&img) > 0);
        assert!(img.pixels().chunks_exact(3).all(|p| p == BACKGROUND || p.iter().all(|&c| c <= MAX_SHADE)));
    }
}
