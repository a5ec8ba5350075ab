//! Reproducible blocks-world scenes with a pinhole camera, analytic depth,
//! projected boxes and template questions.
//!
//! Camera frame: `x` right, `y` down, `z` forward. "above" means smaller `y`,
//! "front" means smaller `z`. Every object is rendered as its axis-aligned
//! bounding volume, so depth and boxes have exact closed forms.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{centroid_2d, BBox, DepthMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("could not place {placed} of {wanted} objects after {attempts} attempts")]
    PlacementFailed {
        placed: usize,
        wanted: usize,
        attempts: usize,
    },
    #[error("object {0} is not in front of the camera")]
    ProjectionError(String),
    #[error("no object named {0}")]
    UnknownObject(String),
    #[error("objects {a} and {b} tie on the {axis:?} axis")]
    AmbiguousRelation { a: String, b: String, axis: Axis },
    #[error("scene {0} has no unambiguous object pair for a spatial question")]
    TemplateUnsatisfiable(String),
}

pub type Result<T> = std::result::Result<T, SceneError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Sphere,
    Cylinder,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Sphere, Shape::Cylinder];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Sphere => "sphere",
            Shape::Cylinder => "cylinder",
        }
    }

    /// Bounding-volume extents relative to `size_m` (x, y, z).
    pub fn extent_factors(self) -> [f64; 3] {
        match self {
            Shape::Cube | Shape::Sphere => [1.0, 1.0, 1.0],
            Shape::Cylinder => [1.0, 1.5, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Cyan,
    Gray,
    Brown,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Cyan,
        Color::Gray,
        Color::Brown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
            Color::Gray => "gray",
            Color::Brown => "brown",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.2, 0.8, 0.25],
            Color::Blue => [0.2, 0.3, 0.9],
            Color::Yellow => [0.95, 0.9, 0.2],
            Color::Purple => [0.6, 0.25, 0.75],
            Color::Cyan => [0.2, 0.85, 0.9],
            Color::Gray => [0.55, 0.55, 0.55],
            Color::Brown => [0.55, 0.35, 0.15],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal_px: f64,
    pub width_px: u32,
    pub height_px: u32,
    pub principal: [f64; 2],
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            focal_px: 64.0,
            width_px: 64,
            height_px: 64,
            principal: [32.0, 32.0],
        }
    }
}

impl Camera {
    /// Pixel coordinates `(u, v)` of a camera-frame point with `z > 0`.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (
            self.focal_px * p[0] / p[2] + self.principal[0],
            self.focal_px * p[1] / p[2] + self.principal[1],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: String,
    pub shape: Shape,
    pub color: Color,
    pub center_m: [f64; 3],
    pub size_m: f64,
}

impl SceneObject {
    pub fn half_extents(&self) -> [f64; 3] {
        let f = self.shape.extent_factors();
        [
            f[0] * self.size_m / 2.0,
            f[1] * self.size_m / 2.0,
            f[2] * self.size_m / 2.0,
        ]
    }

    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        let h = self.half_extents();
        let c = self.center_m;
        (
            [c[0] - h[0], c[1] - h[1], c[2] - h[2]],
            [c[0] + h[0], c[1] + h[1], c[2] + h[2]],
        )
    }

    /// Depth of the camera-facing surface.
    pub fn front_depth(&self) -> f64 {
        self.aabb().0[2]
    }

    pub fn describe(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub camera: Camera,
    pub objects: Vec<SceneObject>,
    pub room_depth_m: f64,
}

impl Scene {
    pub fn object(&self, id: &str) -> Result<&SceneObject> {
        self.objects
            .iter()
            .find(|o| o.object_id == id)
            .ok_or_else(|| SceneError::UnknownObject(id.to_string()))
    }

    pub fn object_index(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.object_id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_objects: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub size_range: [f64; 2],
    pub room_depth_m: f64,
    /// Minimum center separation required on at least one axis.
    pub min_separation_m: f64,
    /// Largest allowed intersection of two projected boxes, as a fraction
    /// of the smaller box's area.
    pub max_box_overlap: f64,
    pub camera: Camera,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_objects: 5,
            x_range: [-1.6, 1.6],
            y_range: [-1.2, 1.2],
            z_range: [2.0, 7.0],
            size_range: [0.3, 0.7],
            room_depth_m: 8.0,
            min_separation_m: 0.3,
            max_box_overlap: 0.1,
            camera: Camera::default(),
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SceneError::InvalidSpec(m));
        if self.n_objects == 0 {
            return bad("n_objects must be at least 1".into());
        }
        for (name, r) in [("x", self.x_range), ("y", self.y_range), ("z", self.z_range)] {
            if !(r[1] > r[0]) {
                return bad(format!("{name} range {r:?} has zero volume"));
            }
        }
        if !(self.size_range[0] > 0.0 && self.size_range[1] >= self.size_range[0]) {
            return bad(format!("size range {:?}", self.size_range));
        }
        if !(self.z_range[0] > self.size_range[1]) {
            return bad("near depth bound must exceed the largest object size".into());
        }
        if !(self.room_depth_m > self.z_range[1] + self.size_range[1]) {
            return bad("room depth must lie behind every object".into());
        }
        if !(0.0..=1.0).contains(&self.max_box_overlap) {
            return bad(format!("max_box_overlap {} outside [0, 1]", self.max_box_overlap));
        }
        if self.camera.width_px == 0 || self.camera.height_px == 0 || !(self.camera.focal_px > 0.0) {
            return bad("degenerate camera".into());
        }
        Ok(())
    }
}

fn fully_visible(obj: &SceneObject, cam: &Camera) -> bool {
    let (lo, hi) = obj.aabb();
    if lo[2] <= 0.0 {
        return false;
    }
    corners(lo, hi).iter().all(|&p| {
        let (u, v) = cam.project(p);
        u >= 1.0 && v >= 1.0 && u <= cam.width_px as f64 - 1.0 && v <= cam.height_px as f64 - 1.0
    })
}

fn corners(lo: [f64; 3], hi: [f64; 3]) -> [[f64; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    for (i, c) in out.iter_mut().enumerate() {
        *c = [
            if i & 1 == 0 { lo[0] } else { hi[0] },
            if i & 2 == 0 { lo[1] } else { hi[1] },
            if i & 4 == 0 { lo[2] } else { hi[2] },
        ];
    }
    out
}

/// Intersection area of the two projected boxes over the smaller box area.
fn box_overlap(a: &SceneObject, b: &SceneObject, cam: &Camera) -> f64 {
    match (project_bbox(a, cam), project_bbox(b, cam)) {
        (Ok(p), Ok(q)) => {
            let w = (p.x2.min(q.x2) - p.x1.max(q.x1)).max(0.0);
            let h = (p.y2.min(q.y2) - p.y1.max(q.y1)).max(0.0);
            w * h / p.area().min(q.area())
        }
        _ => 1.0,
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Deterministic scene for `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<(Color, Shape)> = Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .collect();
    combos.shuffle(&mut rng);

    let mut objects: Vec<SceneObject> = Vec::with_capacity(spec.n_objects);
    let mut attempts = 0;
    while objects.len() < spec.n_objects {
        if attempts >= MAX_PLACEMENT_ATTEMPTS {
            return Err(SceneError::PlacementFailed {
                placed: objects.len(),
                wanted: spec.n_objects,
                attempts,
            });
        }
        attempts += 1;
        let (color, shape) = combos[objects.len() % combos.len()];
        let cand = SceneObject {
            object_id: format!("obj{}", objects.len()),
            shape,
            color,
            center_m: [
                rng.gen_range(spec.x_range[0]..spec.x_range[1]),
                rng.gen_range(spec.y_range[0]..spec.y_range[1]),
                rng.gen_range(spec.z_range[0]..spec.z_range[1]),
            ],
            size_m: rng.gen_range(spec.size_range[0]..=spec.size_range[1]),
        };
        if !fully_visible(&cand, &spec.camera) {
            continue;
        }
        let separated = objects
            .iter()
            .all(|o| (0..3).any(|a| (o.center_m[a] - cand.center_m[a]).abs() >= spec.min_separation_m));
        if separated
            && objects
                .iter()
                .all(|o| box_overlap(o, &cand, &spec.camera) <= spec.max_box_overlap)
        {
            objects.push(cand);
        }
    }
    Ok(Scene {
        scene_id: format!("scene_{seed:08}"),
        camera: spec.camera.clone(),
        objects,
        room_depth_m: spec.room_depth_m,
    })
}

/// Ray/box entry along a pixel ray with unit forward component. Returns the
/// entry depth and the axis of the entered face.
fn ray_aabb(dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 2;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if lo[a] > 0.0 || hi[a] < 0.0 {
                return None;
            }
            continue;
        }
        let (t0, t1) = {
            let ta = lo[a] / dir[a];
            let tb = hi[a] / dir[a];
            if ta < tb {
                (ta, tb)
            } else {
                (tb, ta)
            }
        };
        if t0 > t_near {
            t_near = t0;
            axis = a;
        }
        t_far = t_far.min(t1);
    }
    (t_near <= t_far && t_near > 0.0).then_some((t_near, axis))
}

fn pixel_ray(cam: &Camera, row: usize, col: usize) -> [f64; 3] {
    [
        (col as f64 + 0.5 - cam.principal[0]) / cam.focal_px,
        (row as f64 + 0.5 - cam.principal[1]) / cam.focal_px,
        1.0,
    ]
}

/// Nearest hit per pixel: `(object index, depth, face axis)`.
fn trace(scene: &Scene, row: usize, col: usize) -> Option<(usize, f64, usize)> {
    let dir = pixel_ray(&scene.camera, row, col);
    scene
        .objects
        .iter()
        .enumerate()
        .filter_map(|(i, o)| {
            let (lo, hi) = o.aabb();
            ray_aabb(dir, lo, hi).map(|(t, a)| (i, t, a))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Camera-frame depth of the nearest surface per pixel, `room_depth_m` where
/// nothing is hit.
pub fn render_depth(scene: &Scene) -> DepthMap<f32> {
    let (h, w) = (scene.camera.height_px as usize, scene.camera.width_px as usize);
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let d = trace(scene, r, c).map_or(scene.room_depth_m, |(_, t, _)| t);
            values.push(d as f32);
        }
    }
    DepthMap::new(h, w, values).expect("camera has non-zero size")
}

/// Index of the nearest object per pixel (`None` for background).
pub fn render_ids(scene: &Scene) -> Vec<Option<usize>> {
    let (h, w) = (scene.camera.height_px as usize, scene.camera.width_px as usize);
    (0..h * w)
        .map(|i| trace(scene, i / w, i % w).map(|(o, _, _)| o))
        .collect()
}

/// Channel-major RGB rendering: object albedo with face shading and depth
/// attenuation over a gray back wall.
pub fn render_image(scene: &Scene) -> crate::patches::Image {
    let (h, w) = (scene.camera.height_px as usize, scene.camera.width_px as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    let atten = |z: f64| (1.25 - 0.11 * z).clamp(0.1, 1.0) as f32;
    for r in 0..h {
        for c in 0..w {
            let (rgb, shade) = match trace(scene, r, c) {
                Some((i, t, axis)) => {
                    let face = [0.7f32, 0.85, 1.0][axis];
                    (scene.objects[i].color.rgb(), face * atten(t))
                }
                None => ([0.5, 0.5, 0.5], atten(scene.room_depth_m)),
            };
            for ch in 0..3 {
                data[ch * h * w + r * w + c] = rgb[ch] * shade;
            }
        }
    }
    crate::patches::Image::new(3, h, w, data).expect("consistent dimensions")
}

/// Tight normalized box around the projection of the object's bounding
/// volume, clamped to the image.
pub fn project_bbox(obj: &SceneObject, cam: &Camera) -> Result<BBox<f64>> {
    let (lo, hi) = obj.aabb();
    if lo[2] <= 0.0 {
        return Err(SceneError::ProjectionError(obj.object_id.clone()));
    }
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in corners(lo, hi) {
        let (u, v) = cam.project(p);
        u0 = u0.min(u);
        v0 = v0.min(v);
        u1 = u1.max(u);
        v1 = v1.max(v);
    }
    let (w, h) = (cam.width_px as f64, cam.height_px as f64);
    let b = BBox::new(
        u0.clamp(0.0, w) / w,
        v0.clamp(0.0, h) / h,
        u1.clamp(0.0, w) / w,
        v1.clamp(0.0, h) / h,
    );
    b.map_err(|_| SceneError::ProjectionError(obj.object_id.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Left,
    Right,
    Front,
    Behind,
    Above,
    Below,
    None,
}

impl Relation {
    pub fn word(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Front => "front",
            Relation::Behind => "behind",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::None => "none",
        }
    }

    pub fn from_word(w: &str) -> Option<Relation> {
        Some(match w {
            "left" => Relation::Left,
            "right" => Relation::Right,
            "front" => Relation::Front,
            "behind" => Relation::Behind,
            "above" => Relation::Above,
            "below" => Relation::Below,
            _ => return None,
        })
    }

    /// Axis and the sign of `center_a - center_b` implied by `a <rel> b`.
    pub fn axis_sign(self) -> Option<(Axis, f64)> {
        Some(match self {
            Relation::Left => (Axis::X, -1.0),
            Relation::Right => (Axis::X, 1.0),
            Relation::Above => (Axis::Y, -1.0),
            Relation::Below => (Axis::Y, 1.0),
            Relation::Front => (Axis::Z, -1.0),
            Relation::Behind => (Axis::Z, 1.0),
            Relation::None => return None,
        })
    }

    pub fn from_axis_sign(axis: Axis, negative: bool) -> Relation {
        match (axis, negative) {
            (Axis::X, true) => Relation::Left,
            (Axis::X, false) => Relation::Right,
            (Axis::Y, true) => Relation::Above,
            (Axis::Y, false) => Relation::Below,
            (Axis::Z, true) => Relation::Front,
            (Axis::Z, false) => Relation::Behind,
        }
    }
}

/// Ties closer than this (meters) are ambiguous.
pub const EPS_TIE_M: f64 = 0.05;

/// Relation of `a` to `b` from the sign of their center difference on `axis`.
pub fn oracle_relation(scene: &Scene, a: &str, b: &str, axis: Axis) -> Result<Relation> {
    let (oa, ob) = (scene.object(a)?, scene.object(b)?);
    let d = oa.center_m[axis.index()] - ob.center_m[axis.index()];
    if d.abs() < EPS_TIE_M {
        return Err(SceneError::AmbiguousRelation {
            a: a.to_string(),
            b: b.to_string(),
            axis,
        });
    }
    Ok(Relation::from_axis_sign(axis, d < 0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub question_id: String,
    pub scene_id: String,
    pub template: String,
    pub text: String,
    pub answer: String,
    pub relation: Relation,
    pub subject_id: Option<String>,
    pub object_id: Option<String>,
    pub is_spatial: bool,
}

impl QAItem {
    /// Axis a spatial question is about.
    pub fn axis(&self) -> Option<Axis> {
        self.relation.axis_sign().map(|(a, _)| a)
    }
}

/// Closed answer vocabulary, stored in the dataset header.
pub fn answer_vocabulary() -> Vec<String> {
    let mut v: Vec<String> = ["left", "right", "above", "below", "front", "behind", "yes", "no"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend(Color::ALL.iter().map(|c| c.name().to_string()));
    v.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionSpec {
    /// Share of non-spatial (color/shape) questions.
    pub nonspatial_ratio: f64,
    /// Probability that a spatial question is posed so its answer is the
    /// template's canonical one ("left", "above", "front", "yes"). Values
    /// above 0.5 build a language prior into the answer distribution.
    pub answer_bias: f64,
    /// Minimum separation of projected box centers (normalized) for x/y questions.
    pub min_image_gap: f64,
}

impl Default for QuestionSpec {
    fn default() -> Self {
        QuestionSpec {
            nonspatial_ratio: 0.3,
            answer_bias: 0.7,
            min_image_gap: 0.02,
        }
    }
}

pub const SPATIAL_TEMPLATES: [&str; 6] = [
    "lr_choice",
    "ab_choice",
    "fb_choice",
    "lr_yesno",
    "ab_yesno",
    "fb_yesno",
];

fn template_axis(t: &str) -> Axis {
    match &t[..2] {
        "lr" => Axis::X,
        "ab" => Axis::Y,
        _ => Axis::Z,
    }
}

/// Whether `a` vs `b` on `axis` is unambiguous both in 3-D and in the image.
/// Image-plane order is required to agree for x/y so box-derived supervision
/// can never contradict the answer.
fn askable(scene: &Scene, boxes: &[BBox<f64>], a: usize, b: usize, axis: Axis, spec: &QuestionSpec) -> bool {
    let (oa, ob) = (&scene.objects[a], &scene.objects[b]);
    let d = oa.center_m[axis.index()] - ob.center_m[axis.index()];
    if d.abs() < EPS_TIE_M {
        return false;
    }
    if axis == Axis::Z {
        return true;
    }
    let (ca, cb) = (centroid_2d(&boxes[a]), centroid_2d(&boxes[b]));
    let di = ca.coords[axis.index()] - cb.coords[axis.index()];
    di.abs() >= spec.min_image_gap && (di < 0.0) == (d < 0.0)
}

fn relation_phrase(r: Relation) -> &'static str {
    match r {
        Relation::Left => "left of",
        Relation::Right => "right of",
        Relation::Above => "above",
        Relation::Below => "below",
        Relation::Front => "in front of",
        Relation::Behind => "behind",
        Relation::None => "",
    }
}

/// Deterministic list of `k` questions about `scene`.
pub fn generate_questions(scene: &Scene, seed: u64, k: usize, spec: &QuestionSpec) -> Result<Vec<QAItem>> {
    if k == 0 {
        return Err(SceneError::InvalidSpec("k must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.nonspatial_ratio) || !(0.0..=1.0).contains(&spec.answer_bias) {
        return Err(SceneError::InvalidSpec("ratios must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ab_c0de);
    let boxes: Vec<BBox<f64>> = scene
        .objects
        .iter()
        .map(|o| project_bbox(o, &scene.camera))
        .collect::<Result<_>>()?;
    let n = scene.objects.len();

    let n_nonspatial = (spec.nonspatial_ratio * k as f64).round() as usize;
    let mut kinds: Vec<bool> = (0..k).map(|i| i < n_nonspatial).collect();
    kinds.shuffle(&mut rng);

    let mut out = Vec::with_capacity(k);
    for (qi, nonspatial) in kinds.into_iter().enumerate() {
        let question_id = format!("{}_q{qi:02}", scene.scene_id);
        let mut spatial = None;
        if !nonspatial {
            let mut templates = SPATIAL_TEMPLATES.to_vec();
            templates.shuffle(&mut rng);
            for t in templates {
                let axis = template_axis(t);
                let mut pairs: Vec<(usize, usize)> = (0..n)
                    .flat_map(|a| (0..n).map(move |b| (a, b)))
                    .filter(|&(a, b)| a < b && askable(scene, &boxes, a, b, axis, spec))
                    .collect();
                if pairs.is_empty() {
                    continue;
                }
                pairs.shuffle(&mut rng);
                spatial = Some((t, axis, pairs[0]));
                break;
            }
            if spatial.is_none() && spec.nonspatial_ratio == 0.0 {
                return Err(SceneError::TemplateUnsatisfiable(scene.scene_id.clone()));
            }
        }
        let item = match spatial {
            Some((t, axis, (a, b))) => {
                let canonical = rng.gen_bool(spec.answer_bias);
                let (oa, ob) = (&scene.objects[a], &scene.objects[b]);
                let a_neg = oa.center_m[axis.index()] < ob.center_m[axis.index()];
                let choice = t.ends_with("choice");
                // Canonical answers are the negative-side relation words for
                // choice questions and "yes" for yes/no questions.
                let (subj, obj) = if choice {
                    if canonical == a_neg {
                        (a, b)
                    } else {
                        (b, a)
                    }
                } else if rng.gen_bool(0.5) {
                    (a, b)
                } else {
                    (b, a)
                };
                let (s, o) = (&scene.objects[subj], &scene.objects[obj]);
                let truth = oracle_relation(scene, &s.object_id, &o.object_id, axis)?;
                let (text, answer) = if choice {
                    let opts = match axis {
                        Axis::X => "left or right of",
                        Axis::Y => "above or below",
                        Axis::Z => "in front of or behind",
                    };
                    (
                        format!("is the {} {} the {}", s.describe(), opts, o.describe()),
                        truth.word().to_string(),
                    )
                } else {
                    let asked = if canonical {
                        truth
                    } else {
                        Relation::from_axis_sign(axis, truth.axis_sign().unwrap().1 > 0.0)
                    };
                    (
                        format!(
                            "is the {} {} the {}",
                            s.describe(),
                            relation_phrase(asked),
                            o.describe()
                        ),
                        if canonical { "yes" } else { "no" }.to_string(),
                    )
                };
                QAItem {
                    question_id,
                    scene_id: scene.scene_id.clone(),
                    template: t.to_string(),
                    text,
                    answer,
                    relation: truth,
                    subject_id: Some(s.object_id.clone()),
                    object_id: Some(o.object_id.clone()),
                    is_spatial: true,
                }
            }
            None => nonspatial_question(scene, question_id, &mut rng),
        };
        out.push(item);
    }
    Ok(out)
}

fn nonspatial_question(scene: &Scene, question_id: String, rng: &mut ChaCha8Rng) -> QAItem {
    let i = rng.gen_range(0..scene.objects.len());
    let o = &scene.objects[i];
    let unique_shape = scene.objects.iter().filter(|p| p.shape == o.shape).count() == 1;
    let unique_color = scene.objects.iter().filter(|p| p.color == o.color).count() == 1;
    let ask_color = match (unique_shape, unique_color) {
        (true, true) => rng.gen_bool(0.5),
        (true, false) => true,
        (false, true) => false,
        // The color+shape pair is unique by construction.
        (false, false) => rng.gen_bool(0.5),
    };
    let (template, text, answer) = if ask_color {
        let r = if unique_shape {
            o.shape.name().to_string()
        } else {
            o.describe()
        };
        ("color", format!("what color is the {r}"), o.color.name())
    } else {
        let r = if unique_color {
            format!("{} object", o.color.name())
        } else {
            o.describe()
        };
        ("shape", format!("what shape is the {r}"), o.shape.name())
    };
    QAItem {
        question_id,
        scene_id: scene.scene_id.clone(),
        template: template.to_string(),
        text,
        answer: answer.to_string(),
        relation: Relation::None,
        subject_id: Some(o.object_id.clone()),
        object_id: None,
        is_spatial: false,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test_iid: Vec<String>,
    pub test_ood: Vec<String>,
}

/// Share of scenes per split: train, dev, test_iid; the remainder forms the
/// pool that `test_ood` is resampled from.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.7, 0.1, 0.1];

/// Target share of the training-majority answer in `test_ood`, and the
/// matching number of majority items to keep from a pool holding `n_major`
/// majority and `n_other` other items.
pub fn ood_majority_target(train_share: f64, ood_shift: f64, n_major: usize, n_other: usize) -> (f64, usize) {
    let q = train_share * (1.0 - ood_shift);
    if q >= 1.0 {
        return (q, n_major);
    }
    let keep = (q * n_other as f64 / (1.0 - q)).round() as usize;
    (q, keep.min(n_major))
}

/// Scene-level split into train/dev/test_iid plus an answer-shifted test_ood.
pub fn make_splits(items: &[QAItem], seed: u64, ood_shift: f64) -> Result<Splits> {
    if items.is_empty() {
        return Err(SceneError::InvalidSpec("dataset is empty".into()));
    }
    if !(0.0..1.0).contains(&ood_shift) {
        return Err(SceneError::InvalidSpec(format!("ood_shift {ood_shift} outside [0, 1)")));
    }
    let mut scenes: Vec<&str> = {
        let mut seen = HashSet::new();
        items
            .iter()
            .map(|q| q.scene_id.as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    };
    scenes.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5911_7000);
    scenes.shuffle(&mut rng);
    let ns = scenes.len() as f64;
    let c1 = (SPLIT_FRACTIONS[0] * ns).round() as usize;
    let c2 = c1 + (SPLIT_FRACTIONS[1] * ns).round() as usize;
    let c3 = c2 + (SPLIT_FRACTIONS[2] * ns).round() as usize;
    let part: BTreeMap<&str, usize> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                *s,
                if i < c1 {
                    0
                } else if i < c2 {
                    1
                } else if i < c3 {
                    2
                } else {
                    3
                },
            )
        })
        .collect();

    let mut splits = Splits::default();
    let mut pool: Vec<&QAItem> = Vec::new();
    for q in items {
        match part[q.scene_id.as_str()] {
            0 => splits.train.push(q.question_id.clone()),
            1 => splits.dev.push(q.question_id.clone()),
            2 => splits.test_iid.push(q.question_id.clone()),
            _ => pool.push(q),
        }
    }

    let train_ids: HashSet<&str> = splits.train.iter().map(String::as_str).collect();
    let mut train_hist: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for q in items.iter().filter(|q| train_ids.contains(q.question_id.as_str())) {
        *train_hist.entry(&q.template).or_default().entry(&q.answer).or_default() += 1;
    }
    let mut by_template: BTreeMap<&str, Vec<&QAItem>> = BTreeMap::new();
    for q in pool {
        by_template.entry(&q.template).or_default().push(q);
    }
    for (template, mut qs) in by_template {
        let Some(hist) = train_hist.get(template) else {
            splits.test_ood.extend(qs.iter().map(|q| q.question_id.clone()));
            continue;
        };
        let total: usize = hist.values().sum();
        // Ties resolve to the lexicographically smallest answer.
        let (&major, &count) = hist
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("non-empty histogram");
        let share = count as f64 / total as f64;
        qs.shuffle(&mut rng);
        let n_major = qs.iter().filter(|q| q.answer == major).count();
        let (_, keep) = ood_majority_target(share, ood_shift, n_major, qs.len() - n_major);
        let mut kept_major = 0;
        for q in qs {
            if q.answer == major {
                if kept_major < keep {
                    kept_major += 1;
                    splits.test_ood.push(q.question_id.clone());
                }
            } else {
                splits.test_ood.push(q.question_id.clone());
            }
        }
    }
    splits.test_ood.sort();
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::centroid_2d;

    fn one_object_scene(z: f64, size: f64) -> Scene {
        Scene {
            scene_id: "s".into(),
            camera: Camera::default(),
            objects: vec![SceneObject {
                object_id: "a".into(),
                shape: Shape::Cube,
                color: Color::Red,
                center_m: [0.0, 0.0, z],
                size_m: size,
            }],
            room_depth_m: 5.0,
        }
    }

    #[test]
    fn generate_scene_is_deterministic_and_in_bounds() {
        let spec = SceneSpec::default();
        let a = generate_scene(42, &spec).unwrap();
        let b = generate_scene(42, &spec).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.objects.len(), 5);
        for o in &a.objects {
            for ax in 0..3 {
                let r = [spec.x_range, spec.y_range, spec.z_range][ax];
                assert!(o.center_m[ax] >= r[0] && o.center_m[ax] < r[1]);
            }
            assert!(o.center_m[2] > 0.0 && o.size_m > 0.0);
        }
        for (i, p) in a.objects.iter().enumerate() {
            for q in &a.objects[i + 1..] {
                assert!((0..3).any(|ax| (p.center_m[ax] - q.center_m[ax]).abs() >= 0.3));
            }
        }
    }

    #[test]
    fn generate_scene_rejects_bad_specs() {
        let spec = SceneSpec {
            n_objects: 0,
            ..Default::default()
        };
        assert!(matches!(generate_scene(42, &spec), Err(SceneError::InvalidSpec(_))));
        let spec = SceneSpec {
            x_range: [1.0, 1.0],
            ..Default::default()
        };
        assert!(matches!(generate_scene(42, &spec), Err(SceneError::InvalidSpec(_))));
    }

    #[test]
    fn single_cube_depth() {
        let scene = one_object_scene(2.25, 0.5); // front face at z = 2.0
        let depth = render_depth(&scene);
        let b = project_bbox(&scene.objects[0], &scene.camera).unwrap();
        let (u0, u1) = (b.x1 * 64.0, b.x2 * 64.0);
        for r in 0..64 {
            for c in 0..64 {
                let d = depth.get(r, c);
                let (pu, pv) = (c as f64 + 0.5, r as f64 + 0.5);
                let inside_front = pu > 24.0 && pu < 40.0 && pv > 24.0 && pv < 40.0;
                if inside_front {
                    assert!((d - 2.0).abs() < 1e-6, "({r},{c}) = {d}");
                } else if pu < u0 || pu > u1 {
                    assert_eq!(d, 5.0);
                }
            }
        }
    }

    #[test]
    fn nearest_surface_wins() {
        let mut scene = one_object_scene(2.25, 0.5);
        let mut far = scene.objects[0].clone();
        far.object_id = "b".into();
        far.center_m = [0.1, 0.0, 3.25];
        scene.objects.push(far);
        let depth = render_depth(&scene);
        assert!((depth.get(32, 33) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn projection_symmetry_magnification_and_errors() {
        let cam = Camera::default();
        let scene = one_object_scene(4.0, 0.4);
        let b = project_bbox(&scene.objects[0], &cam).unwrap();
        let c = centroid_2d(&b);
        assert!((c.coords[0] - 0.5).abs() < 1e-12 && (c.coords[1] - 0.5).abs() < 1e-12);

        let far = one_object_scene(6.0, 0.05);
        let near = one_object_scene(3.0, 0.05);
        let side = |s: &Scene| {
            let b = project_bbox(&s.objects[0], &cam).unwrap();
            b.x2 - b.x1
        };
        let ratio = side(&near) / side(&far);
        assert!((ratio - 2.0).abs() / 2.0 < 0.01, "ratio {ratio}");

        let behind = one_object_scene(-1.0, 0.4);
        assert!(matches!(
            project_bbox(&behind.objects[0], &cam),
            Err(SceneError::ProjectionError(_))
        ));
    }

    #[test]
    fn oracle_relation_sign_convention() {
        let mut scene = one_object_scene(1.0, 0.2);
        let mut b = scene.objects[0].clone();
        b.object_id = "b".into();
        scene.objects[0].center_m = [0.4, 0.0, 1.0];
        b.center_m = [1.0, 0.0, 3.0];
        scene.objects.push(b);
        assert_eq!(oracle_relation(&scene, "a", "b", Axis::X).unwrap(), Relation::Left);
        assert_eq!(oracle_relation(&scene, "a", "b", Axis::Z).unwrap(), Relation::Front);
        assert_eq!(oracle_relation(&scene, "b", "a", Axis::Z).unwrap(), Relation::Behind);
        assert!(matches!(
            oracle_relation(&scene, "a", "b", Axis::Y),
            Err(SceneError::AmbiguousRelation { .. })
        ));
        assert!(matches!(
            oracle_relation(&scene, "a", "zz", Axis::Y),
            Err(SceneError::UnknownObject(_))
        ));
    }

    #[test]
    fn left_right_question_answer() {
        let mut scene = one_object_scene(3.0, 0.3);
        scene.objects[0].center_m = [-0.8, 0.0, 3.0];
        let mut b = scene.objects[0].clone();
        b.object_id = "b".into();
        b.color = Color::Blue;
        b.center_m = [0.8, 0.0, 3.0];
        scene.objects.push(b);
        let spec = QuestionSpec {
            nonspatial_ratio: 0.0,
            ..Default::default()
        };
        let qs = generate_questions(&scene, 1, 20, &spec).unwrap();
        let lr: Vec<_> = qs.iter().filter(|q| q.template == "lr_choice").collect();
        assert!(!lr.is_empty());
        for q in lr {
            let expect = if q.subject_id.as_deref() == Some("a") {
                "left"
            } else {
                "right"
            };
            assert_eq!(q.answer, expect, "{}", q.text);
        }
    }

    #[test]
    fn question_generation_contracts() {
        let scene = generate_scene(7, &SceneSpec::default()).unwrap();
        let spec = QuestionSpec::default();
        let a = generate_questions(&scene, 3, 10, &spec).unwrap();
        assert_eq!(a, generate_questions(&scene, 3, 10, &spec).unwrap());
        assert_eq!(a.len(), 10);
        assert!(a.iter().any(|q| !q.is_spatial));
        for q in a.iter().filter(|q| q.is_spatial) {
            let axis = q.axis().unwrap();
            let rel = oracle_relation(
                &scene,
                q.subject_id.as_ref().unwrap(),
                q.object_id.as_ref().unwrap(),
                axis,
            )
            .unwrap();
            assert_eq!(rel, q.relation);
        }

        let single = one_object_scene(3.0, 0.3);
        let spatial_only = QuestionSpec {
            nonspatial_ratio: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            generate_questions(&single, 1, 3, &spatial_only),
            Err(SceneError::TemplateUnsatisfiable(_))
        ));
    }

    #[test]
    fn ood_target_reweighting() {
        // 80% majority in training, shift 0.5: majority drops to 40%.
        let (q, keep) = ood_majority_target(0.8, 0.5, 80, 20);
        assert!((q - 0.4).abs() < 1e-12);
        // keep / (keep + 20) = 0.4  =>  keep = 13.33 -> 13
        assert_eq!(keep, 13);
        let (q0, keep0) = ood_majority_target(0.8, 0.0, 80, 20);
        assert!((q0 - 0.8).abs() < 1e-12);
        assert_eq!(keep0, 80);
    }
}
