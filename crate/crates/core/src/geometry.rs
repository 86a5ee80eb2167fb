//! Triangle meshes, the OBJ subset we exchange with mesh providers, and the
//! text-to-image and image-to-3D stage contracts.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::image::{hsv_to_rgb, RgbImage};
use crate::providers::{
    decode_bytes_field, decode_image_payload, image_payload, CallCounter, InflightLimiter, ProviderError, Transport,
};
use crate::reasoning::{SemanticDescription, HUE_NAMES};
use crate::util::sha256_hex;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MeshError {
    #[error(
        "index bound violated: triangle {triangle} references vertex {index} but the mesh has {vertex_count} vertices"
    )]
    IndexOutOfBounds { triangle: usize, index: usize, vertex_count: usize },
    #[error("distinct-index invariant violated: triangle {triangle} repeats vertex {index}")]
    RepeatedIndex { triangle: usize, index: usize },
    #[error("finite-coordinate invariant violated at vertex {vertex}")]
    NonFinite { vertex: usize },
    #[error("mesh has no triangles")]
    NoTriangles,
    #[error("colour count invariant violated: {colors} colours for {vertices} vertices")]
    ColorCount { colors: usize, vertices: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    /// Per-vertex RGB in [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertex_colors: Option<Vec<[f64; 3]>>,
}

impl TriMesh {
    pub fn new(
        vertices: Vec<[f64; 3]>,
        triangles: Vec<[usize; 3]>,
        vertex_colors: Option<Vec<[f64; 3]>>,
    ) -> Result<Self, MeshError> {
        let mesh = Self { vertices, triangles, vertex_colors };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if self.triangles.is_empty() {
            return Err(MeshError::NoTriangles);
        }
        if let Some(vertex) = self.vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(MeshError::NonFinite { vertex });
        }
        let n = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i >= n) {
                return Err(MeshError::IndexOutOfBounds { triangle: t, index, vertex_count: n });
            }
            if tri[0] == tri[1] || tri[0] == tri[2] {
                return Err(MeshError::RepeatedIndex { triangle: t, index: tri[0] });
            }
            if tri[1] == tri[2] {
                return Err(MeshError::RepeatedIndex { triangle: t, index: tri[1] });
            }
        }
        if let Some(colors) = &self.vertex_colors {
            if colors.len() != n {
                return Err(MeshError::ColorCount { colors: colors.len(), vertices: n });
            }
        }
        Ok(())
    }

    /// Axis-aligned cube centred at the origin, outward-facing triangles.
    pub fn cube(edge: f64) -> Self {
        let h = edge / 2.0;
        let vertices = (0..8)
            .map(|i| {
                let s = |bit: usize| if i & bit != 0 { h } else { -h };
                [s(1), s(2), s(4)]
            })
            .collect();
        let triangles = vec![
            [0, 4, 6],
            [0, 6, 2], // -x
            [1, 3, 7],
            [1, 7, 5], // +x
            [0, 1, 5],
            [0, 5, 4], // -y
            [2, 6, 7],
            [2, 7, 3], // +y
            [0, 2, 3],
            [0, 3, 1], // -z
            [4, 5, 7],
            [4, 7, 6], // +z
        ];
        Self { vertices, triangles, vertex_colors: None }
    }

    pub fn with_uniform_color(mut self, rgb: [f64; 3]) -> Self {
        self.vertex_colors = Some(vec![rgb; self.vertices.len()]);
        self
    }

    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.vertices.len().max(1) as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k] / n;
            }
        }
        c
    }

    /// Translates the vertex centroid to the origin and scales uniformly so
    /// the farthest vertex lies on the unit sphere.
    pub fn normalized_to_unit_sphere(&self) -> Self {
        let c = self.centroid();
        let centered: Vec<[f64; 3]> = self.vertices.iter().map(|v| [v[0] - c[0], v[1] - c[1], v[2] - c[2]]).collect();
        let radius = centered.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).fold(0.0, f64::max);
        let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
        Self {
            vertices: centered.iter().map(|v| [v[0] * scale, v[1] * scale, v[2] * scale]).collect(),
            triangles: self.triangles.clone(),
            vertex_colors: self.vertex_colors.clone(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| [v[0] * factor, v[1] * factor, v[2] * factor]).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Error)]
pub enum ObjError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("OBJ has no faces")]
    ZeroFaces,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObjStats {
    pub ignored_records: usize,
}

/// Parses `v` and `f` records; polygons are fan-triangulated from their
/// first vertex and everything else is counted and skipped.
pub fn parse_obj(text: &str) -> Result<(TriMesh, ObjStats), ObjError> {
    let mut vertices = Vec::new();
    let mut colors: Vec<Option<[f64; 3]>> = Vec::new();
    let mut faces: Vec<(usize, Vec<i64>)> = Vec::new();
    let mut stats = ObjStats::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let bad = |message: String| ObjError::Malformed { line: line_no, message };
        match parts.next() {
            Some("v") => {
                let nums: Vec<f64> = parts
                    .map(|p| p.parse::<f64>().map_err(|_| bad(format!("bad number {p:?}"))))
                    .collect::<Result<_, _>>()?;
                match nums.len() {
                    3 | 4 => {
                        vertices.push([nums[0], nums[1], nums[2]]);
                        colors.push(None);
                    }
                    6 => {
                        vertices.push([nums[0], nums[1], nums[2]]);
                        colors.push(Some([nums[3], nums[4], nums[5]]));
                    }
                    n => return Err(bad(format!("vertex record has {n} numbers"))),
                }
            }
            Some("f") => {
                let idx: Vec<i64> = parts
                    .map(|p| {
                        let head = p.split('/').next().unwrap_or("");
                        head.parse::<i64>().map_err(|_| bad(format!("bad face index {p:?}")))
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(bad(format!("face has {} vertices", idx.len())));
                }
                let resolved = idx
                    .iter()
                    .map(|&k| match k {
                        0 => Err(bad("face index 0 is invalid (OBJ is 1-based)".into())),
                        k if k > 0 => Ok(k - 1),
                        k => Ok(vertices.len() as i64 + k),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                faces.push((line_no, resolved));
            }
            Some(_) => stats.ignored_records += 1,
            None => {}
        }
    }
    if faces.is_empty() {
        return Err(ObjError::ZeroFaces);
    }
    let n = vertices.len() as i64;
    let mut triangles = Vec::new();
    for (line, idx) in &faces {
        if let Some(&k) = idx.iter().find(|&&k| k < 0 || k >= n) {
            return Err(ObjError::Malformed {
                line: *line,
                message: format!("face references vertex {} but only {n} are defined", k + 1),
            });
        }
        for j in 1..idx.len() - 1 {
            triangles.push([idx[0] as usize, idx[j] as usize, idx[j + 1] as usize]);
        }
    }
    let vertex_colors = if colors.iter().all(Option::is_some) {
        Some(colors.into_iter().flatten().collect())
    } else {
        if colors.iter().any(Option::is_some) {
            log::warn!("OBJ mixes coloured and plain vertices; dropping colours");
        }
        None
    };
    if stats.ignored_records > 0 {
        log::warn!("ignored {} unsupported OBJ records", stats.ignored_records);
    }
    Ok((TriMesh::new(vertices, triangles, vertex_colors)?, stats))
}

pub fn obj_string(mesh: &TriMesh) -> String {
    let mut out = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.vertex_colors {
            Some(c) => out.push_str(&format!("v {} {} {} {} {} {}\n", v[0], v[1], v[2], c[i][0], c[i][1], c[i][2])),
            None => out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2])),
        }
    }
    for t in &mesh.triangles {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    out
}

pub fn load_obj(path: &Path) -> Result<TriMesh, ObjError> {
    let text = fs::read_to_string(path).map_err(|source| ObjError::Io { path: path.display().to_string(), source })?;
    Ok(parse_obj(&text)?.0)
}

pub fn write_obj(mesh: &TriMesh, path: &Path) -> Result<(), ObjError> {
    fs::write(path, obj_string(mesh)).map_err(|source| ObjError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenStageConfig {
    pub t2i_steps: u32,
    pub t2i_guidance: f64,
    pub texture_resolution: u32,
    pub seed: u64,
}

impl Default for GenStageConfig {
    fn default() -> Self {
        Self { t2i_steps: 30, t2i_guidance: 4.5, texture_resolution: 1024, seed: 0 }
    }
}

impl GenStageConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.t2i_steps == 0 {
            return Err(GenError::Config("t2i_steps must be >= 1".into()));
        }
        if !(self.t2i_guidance >= 0.0 && self.t2i_guidance.is_finite()) {
            return Err(GenError::Config("t2i_guidance must be >= 0".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    Direct,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Direct => "direct",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Mode::Full),
            "direct" => Ok(Mode::Direct),
            other => Err(format!("unknown mode {other:?} (expected full or direct)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub mode: Mode,
    pub provider_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub upstream_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated<T> {
    pub value: T,
    pub provenance: Provenance,
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid stage config: {0}")]
    Config(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("input image is empty")]
    EmptyInput,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("provider returned an empty image")]
    EmptyImage,
    #[error("provider returned an invalid mesh: {0}")]
    InvalidMesh(#[from] ObjError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2iRequest {
    pub prompt: String,
    pub steps: u32,
    pub guidance: f64,
    pub seed: u64,
}

pub trait TextToImageProvider: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, request: &T2iRequest) -> Result<RgbImage, ProviderError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct To3dRequest {
    pub image: RgbImage,
    pub texture_resolution: u32,
    pub seed: u64,
}

/// Returns OBJ bytes.
pub trait ImageTo3dProvider: Send + Sync {
    fn id(&self) -> &str;
    fn reconstruct(&self, request: &To3dRequest) -> Result<Vec<u8>, ProviderError>;
}

pub fn text_to_image(
    description: &SemanticDescription,
    config: &GenStageConfig,
    provider: &dyn TextToImageProvider,
) -> Result<Generated<RgbImage>, GenError> {
    config.validate()?;
    if description.text.trim().is_empty() {
        return Err(GenError::EmptyPrompt);
    }
    let request = T2iRequest {
        prompt: description.text.clone(),
        steps: config.t2i_steps,
        guidance: config.t2i_guidance,
        seed: config.seed,
    };
    let image = provider.generate(&request)?;
    if image.width() == 0 || image.height() == 0 {
        return Err(GenError::EmptyImage);
    }
    let prompt_hash = sha256_hex(description.text.as_bytes());
    Ok(Generated {
        value: image,
        provenance: Provenance {
            stage: "t2i".into(),
            mode: Mode::Full,
            provider_id: provider.id().to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            upstream_hash: prompt_hash.clone(),
            prompt_hash: Some(prompt_hash),
        },
    })
}

fn lift(
    image: &RgbImage,
    config: &GenStageConfig,
    provider: &dyn ImageTo3dProvider,
    mode: Mode,
) -> Result<Generated<TriMesh>, GenError> {
    config.validate()?;
    if image.width() == 0 || image.height() == 0 {
        return Err(GenError::EmptyInput);
    }
    let request =
        To3dRequest { image: image.clone(), texture_resolution: config.texture_resolution, seed: config.seed };
    let bytes = provider.reconstruct(&request)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| ObjError::Malformed { line: 0, message: "OBJ payload is not UTF-8".into() })?;
    let (mesh, _) = parse_obj(&text)?;
    Ok(Generated {
        value: mesh,
        provenance: Provenance {
            stage: "to3d".into(),
            mode,
            provider_id: provider.id().to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            upstream_hash: sha256_hex(&image.to_ppm_bytes()),
            prompt_hash: None,
        },
    })
}

/// Lifts the refined image to a mesh.
pub fn image_to_mesh(
    image: &RgbImage,
    config: &GenStageConfig,
    provider: &dyn ImageTo3dProvider,
) -> Result<Generated<TriMesh>, GenError> {
    lift(image, config, provider, Mode::Full)
}

/// Lifts the decoded image straight to a mesh, skipping reasoning and
/// text-to-image.
pub fn ablation_bypass(
    decoded: &RgbImage,
    config: &GenStageConfig,
    provider: &dyn ImageTo3dProvider,
) -> Result<Generated<TriMesh>, GenError> {
    lift(decoded, config, provider, Mode::Direct)
}

/// Colour name mentioned in `prompt`, preferring the longest match.
pub fn find_colour_name(prompt: &str) -> Option<usize> {
    let lower = prompt.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    let joined = format!(" {} ", words.join(" "));
    let mut best: Option<usize> = None;
    for (i, name) in HUE_NAMES.iter().enumerate() {
        if joined.contains(&format!(" {name} ")) && best.is_none_or(|b| HUE_NAMES[b].len() < name.len()) {
            best = Some(i);
        }
    }
    best
}

/// Deterministic text-to-image stand-in: a disc in the colour named by the
/// prompt on white, its radius derived from the prompt hash and seed.
pub struct ProceduralTextToImage {
    pub side: u32,
    calls: CallCounter,
}

impl ProceduralTextToImage {
    pub fn new(side: u32) -> Self {
        Self { side, calls: CallCounter::new() }
    }

    pub fn calls(&self) -> CallCounter {
        self.calls.clone()
    }
}

impl TextToImageProvider for ProceduralTextToImage {
    fn id(&self) -> &str {
        "mock-procedural-t2i"
    }

    fn generate(&self, request: &T2iRequest) -> Result<RgbImage, ProviderError> {
        self.calls.bump();
        let digest = sha256_hex(format!("{}|{}", request.prompt, request.seed).as_bytes());
        let jitter = u8::from_str_radix(&digest[..2], 16).expect("hex digest") as f64 / 255.0;
        let colour = match find_colour_name(&request.prompt) {
            Some(i) => hsv_to_rgb(i as f64 / HUE_NAMES.len() as f64, 0.85, 0.9),
            None => [128, 128, 128],
        };
        let side = self.side;
        let mut img = RgbImage::filled(side, side, [255, 255, 255]);
        let c = (side as f64 - 1.0) / 2.0;
        let r = side as f64 * (0.3 + 0.1 * jitter);
        for y in 0..side {
            for x in 0..side {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                if dx * dx + dy * dy <= r * r {
                    img.set(x, y, colour);
                }
            }
        }
        Ok(img)
    }
}

/// Image-to-3D stand-in: a cube whose edge follows mean brightness
/// (0.5 below 1/3, 1.0 below 2/3, else 2.0), coloured with the mean of the
/// image's non-white pixels.
pub struct PrimitiveImageTo3d {
    calls: CallCounter,
}

impl PrimitiveImageTo3d {
    pub fn new() -> Self {
        Self { calls: CallCounter::new() }
    }

    pub fn calls(&self) -> CallCounter {
        self.calls.clone()
    }

    pub fn edge_for(image: &RgbImage) -> f64 {
        let b = image.mean_brightness();
        if b < 1.0 / 3.0 {
            0.5
        } else if b < 2.0 / 3.0 {
            1.0
        } else {
            2.0
        }
    }

    pub fn colour_for(image: &RgbImage) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for px in image.pixels().chunks_exact(3) {
            if px != [255, 255, 255] {
                for k in 0..3 {
                    sum[k] += px[k] as f64;
                }
                n += 1;
            }
        }
        if n == 0 {
            return [0.5, 0.5, 0.5];
        }
        sum.map(|s| s / n as f64 / 255.0)
    }
}

impl Default for PrimitiveImageTo3d {
    fn default() -> Self {
        Self::new()
    }
}

impl ImageTo3dProvider for PrimitiveImageTo3d {
    fn id(&self) -> &str {
        "mock-primitive-3d"
    }

    fn reconstruct(&self, request: &To3dRequest) -> Result<Vec<u8>, ProviderError> {
        self.calls.bump();
        let mesh = TriMesh::cube(Self::edge_for(&request.image)).with_uniform_color(Self::colour_for(&request.image));
        Ok(obj_string(&mesh).into_bytes())
    }
}

/// Text-to-image behind a JSON transport. Request `{prompt, steps,
/// guidance, seed}`; response `{image: {mime, data}}`.
pub struct RemoteTextToImage {
    id: String,
    transport: Box<dyn Transport>,
    limiter: InflightLimiter,
    calls: CallCounter,
}

impl RemoteTextToImage {
    pub fn new(id: impl Into<String>, transport: Box<dyn Transport>, max_in_flight: usize) -> Self {
        Self { id: id.into(), transport, limiter: InflightLimiter::new(max_in_flight), calls: CallCounter::new() }
    }

    pub fn calls(&self) -> CallCounter {
        self.calls.clone()
    }
}

impl TextToImageProvider for RemoteTextToImage {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &T2iRequest) -> Result<RgbImage, ProviderError> {
        let body = serde_json::to_value(request).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        let _permit = self.limiter.acquire();
        self.calls.bump();
        let response = self.transport.call(&body)?;
        if let Some(err) = response.get("error").and_then(|v| v.as_str()) {
            return Err(ProviderError::Remote(err.to_string()));
        }
        decode_image_payload(&response["image"])
    }
}

/// Image-to-3D behind a JSON transport. Request `{image, texture_resolution,
/// seed}`; response `{obj: base64}`.
pub struct RemoteImageTo3d {
    id: String,
    transport: Box<dyn Transport>,
    limiter: InflightLimiter,
    calls: CallCounter,
}

impl RemoteImageTo3d {
    pub fn new(id: impl Into<String>, transport: Box<dyn Transport>, max_in_flight: usize) -> Self {
        Self { id: id.into(), transport, limiter: InflightLimiter::new(max_in_flight), calls: CallCounter::new() }
    }

    pub fn calls(&self) -> CallCounter {
        self.calls.clone()
    }
}

impl ImageTo3dProvider for RemoteImageTo3d {
    fn id(&self) -> &str {
        &self.id
    }

    fn reconstruct(&self, request: &To3dRequest) -> Result<Vec<u8>, ProviderError> {
        let body = json!({
            "image": image_payload(&request.image),
            "texture_resolution": request.texture_resolution,
            "seed": request.seed,
        });
        let _permit = self.limiter.acquire();
        self.calls.bump();
        let response = self.transport.call(&body)?;
        if let Some(err) = response.get("error").and_then(|v| v.as_str()) {
            return Err(ProviderError::Remote(err.to_string()));
        }
        decode_bytes_field(&response, "obj")
    }
}
