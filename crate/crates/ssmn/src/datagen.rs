//! Synthetic point-annotated diagram benchmark: category prototypes are
//! stroke skeletons with named anchor points; instances are rendered under
//! random pose transforms, giving pairs whose gold matching is the
//! name-identity permutation.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{write_manifest, write_pairs, ImageRecord, PartPoint};
use crate::error::{Result, SsmnError};
use crate::imaging::GrayImage;
use crate::pgm::write_pgm;

pub const RASTER_SIZE: usize = 128;
pub const MOTIF_COUNT: usize = 12;

/// Shared part-name vocabulary; names recur across categories.
pub const NAME_VOCAB: [&str; 40] = [
    "arm", "axle", "base", "beam", "blade", "bolt", "brace", "cap", "clamp", "coil", "cone",
    "crank", "dial", "disc", "duct", "fin", "flange", "fork", "gear", "grip", "hinge", "hook",
    "hub", "joint", "knob", "latch", "lever", "lip", "mast", "node", "pin", "plate", "prong",
    "rail", "rim", "rod", "spoke", "stem", "strut", "vane",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPrototype {
    pub k: usize,
    /// Anchor points in [0.05, 0.95]^2, pairwise distance >= 0.05.
    pub anchors: Vec<(f64, f64)>,
    pub names: Vec<String>,
    /// Distinct local motif per anchor.
    pub motifs: Vec<usize>,
    /// Skeleton edges (spanning tree plus extras) between anchor indices.
    pub edges: Vec<(usize, usize)>,
}

const MIN_ANCHOR_DIST: f64 = 0.15;

pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Deterministic prototype generator; K anchors with distinct motifs and
/// names sampled without replacement from the shared vocabulary.
pub fn gen_prototype(seed: u64, k: usize) -> Result<CategoryPrototype> {
    if !(2..=12).contains(&k) {
        return Err(SsmnError::Invalid(format!("prototype K {k} outside [2, 12]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors: Vec<(f64, f64)> = Vec::with_capacity(k);
    while anchors.len() < k {
        let p = (rng.gen_range(0.08..0.92), rng.gen_range(0.08..0.92));
        if anchors
            .iter()
            .all(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() >= MIN_ANCHOR_DIST)
        {
            anchors.push(p);
        }
    }
    let mut name_idx: Vec<usize> = (0..NAME_VOCAB.len()).collect();
    for i in (1..name_idx.len()).rev() {
        name_idx.swap(i, rng.gen_range(0..=i));
    }
    let names = name_idx[..k]
        .iter()
        .map(|&i| NAME_VOCAB[i].to_string())
        .collect();
    let mut motifs: Vec<usize> = (0..MOTIF_COUNT).collect();
    for i in (1..motifs.len()).rev() {
        motifs.swap(i, rng.gen_range(0..=i));
    }
    motifs.truncate(k);
    // random spanning tree plus an occasional chord
    let mut edges: Vec<(usize, usize)> = (1..k).map(|i| (rng.gen_range(0..i), i)).collect();
    if k >= 4 && rng.gen_bool(0.7) {
        let a = rng.gen_range(0..k);
        let b = rng.gen_range(0..k);
        if a != b && !edges.contains(&(a.min(b), a.max(b))) {
            edges.push((a.min(b), a.max(b)));
        }
    }
    Ok(CategoryPrototype {
        k,
        anchors,
        names,
        motifs,
        edges,
    })
}

/// Pose/style parameters for one rendered instance.
#[derive(Debug, Clone)]
pub struct InstanceTransform {
    /// Rotation in radians about the image center.
    pub rot: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub flip: bool,
    /// Per-anchor positional jitter, normalized coordinates.
    pub jitter: Vec<(f64, f64)>,
    /// Stroke width in pixels.
    pub stroke_width: f64,
}

impl InstanceTransform {
    pub fn identity(k: usize) -> InstanceTransform {
        InstanceTransform {
            rot: 0.0,
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
            flip: false,
            jitter: vec![(0.0, 0.0); k],
            stroke_width: 1.6,
        }
    }

    fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let x = if self.flip { 1.0 - p.0 } else { p.0 };
        let (dx, dy) = (x - 0.5, p.1 - 0.5);
        let (c, s) = (self.rot.cos(), self.rot.sin());
        (
            0.5 + self.scale * (c * dx - s * dy) + self.tx,
            0.5 + self.scale * (s * dx + c * dy) + self.ty,
        )
    }

    /// Rotate/flip/scale a local offset vector (for motif geometry).
    fn apply_dir(&self, d: (f64, f64)) -> (f64, f64) {
        let dx = if self.flip { -d.0 } else { d.0 };
        let (c, s) = (self.rot.cos(), self.rot.sin());
        (
            self.scale * (c * dx - s * d.1),
            self.scale * (s * dx + c * d.1),
        )
    }
}

/// Transform sampling ranges.
#[derive(Debug, Clone)]
pub struct TransformRanges {
    /// Max absolute rotation, radians.
    pub rot: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Max absolute translation, normalized.
    pub trans: f64,
    pub flip_p: f64,
    pub jitter_sigma: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        TransformRanges {
            rot: 30.0_f64.to_radians(),
            scale_min: 0.8,
            scale_max: 1.2,
            trans: 0.1,
            flip_p: 0.2,
            jitter_sigma: 0.01,
        }
    }
}

fn blend_ink(img: &mut GrayImage, x: usize, y: usize, alpha: f64) {
    let v = img.get(x, y);
    let ink = 1.0 - alpha;
    if ink < v {
        img.set(x, y, ink);
    }
}

/// Anti-aliased segment in pixel coordinates.
fn draw_segment(img: &mut GrayImage, p0: (f64, f64), p1: (f64, f64), width: f64) {
    let half = width / 2.0;
    let pad = half + 1.5;
    let x0 = ((p0.0.min(p1.0) - pad).floor().max(0.0)) as usize;
    let x1 = ((p0.0.max(p1.0) + pad).ceil().min((img.width - 1) as f64)) as usize;
    let y0 = ((p0.1.min(p1.1) - pad).floor().max(0.0)) as usize;
    let y1 = ((p0.1.max(p1.1) + pad).ceil().min((img.height - 1) as f64)) as usize;
    let (vx, vy) = (p1.0 - p0.0, p1.1 - p0.1);
    let len2 = vx * vx + vy * vy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - p0.0, y as f64 - p0.1);
            let t = if len2 > 0.0 {
                ((px * vx + py * vy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (dx, dy) = (px - t * vx, py - t * vy);
            let d = (dx * dx + dy * dy).sqrt();
            let alpha = (half + 0.5 - d).clamp(0.0, 1.0);
            if alpha > 0.0 {
                blend_ink(img, x, y, alpha);
            }
        }
    }
}

fn draw_polyline(img: &mut GrayImage, pts: &[(f64, f64)], width: f64) {
    for w in pts.windows(2) {
        draw_segment(img, w[0], w[1], width);
    }
}

fn draw_circle_outline(img: &mut GrayImage, c: (f64, f64), r: f64, width: f64) {
    let n = (r * 4.0).max(12.0) as usize;
    let pts: Vec<(f64, f64)> = (0..=n)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            (c.0 + r * a.cos(), c.1 + r * a.sin())
        })
        .collect();
    draw_polyline(img, &pts, width);
}

fn draw_disc(img: &mut GrayImage, c: (f64, f64), r: f64) {
    let pad = r + 1.5;
    let x0 = ((c.0 - pad).floor().max(0.0)) as usize;
    let x1 = ((c.0 + pad).ceil().min((img.width - 1) as f64)) as usize;
    let y0 = ((c.1 - pad).floor().max(0.0)) as usize;
    let y1 = ((c.1 + pad).ceil().min((img.height - 1) as f64)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 - c.0).powi(2) + (y as f64 - c.1).powi(2)).sqrt();
            let alpha = (r + 0.5 - d).clamp(0.0, 1.0);
            if alpha > 0.0 {
                blend_ink(img, x, y, alpha);
            }
        }
    }
}

/// Draw motif `id` around pixel-space `center`; offsets go through the
/// instance transform so the style rotates with the pose.
fn draw_motif(img: &mut GrayImage, id: usize, center: (f64, f64), t: &InstanceTransform, w: f64) {
    let r = 5.0 * t.scale;
    let px = |d: (f64, f64)| -> (f64, f64) {
        let v = t.apply_dir((d.0, d.1));
        (center.0 + v.0 * 5.0, center.1 + v.1 * 5.0)
    };
    match id % MOTIF_COUNT {
        0 => draw_circle_outline(img, center, r, w),
        1 => draw_disc(img, center, r * 0.55),
        2 => {
            draw_segment(img, px((-1.0, 0.0)), px((1.0, 0.0)), w);
            draw_segment(img, px((0.0, -1.0)), px((0.0, 1.0)), w);
        }
        3 => {
            draw_segment(img, px((-0.8, -0.8)), px((0.8, 0.8)), w);
            draw_segment(img, px((-0.8, 0.8)), px((0.8, -0.8)), w);
        }
        4 => {
            let pts = [
                px((-0.8, -0.8)),
                px((0.8, -0.8)),
                px((0.8, 0.8)),
                px((-0.8, 0.8)),
                px((-0.8, -0.8)),
            ];
            draw_polyline(img, &pts, w);
        }
        5 => {
            draw_segment(img, px((-0.9, -0.9)), px((0.9, -0.9)), w);
            draw_segment(img, px((0.0, -0.9)), px((0.0, 0.9)), w);
        }
        6 => {
            draw_segment(img, px((-0.9, 0.9)), px((0.0, -0.9)), w);
            draw_segment(img, px((0.9, 0.9)), px((0.0, -0.9)), w);
        }
        7 => {
            draw_circle_outline(img, center, r, w);
            draw_circle_outline(img, center, r * 0.5, w);
        }
        8 => {
            let pts = [
                px((0.0, -1.0)),
                px((0.9, 0.7)),
                px((-0.9, 0.7)),
                px((0.0, -1.0)),
            ];
            draw_polyline(img, &pts, w);
        }
        9 => draw_segment(img, px((0.0, -1.0)), px((0.0, 1.0)), w * 1.8),
        10 => draw_segment(img, px((-1.0, 0.0)), px((1.0, 0.0)), w * 1.8),
        _ => {
            draw_disc(img, px((-0.6, 0.0)), r * 0.3);
            draw_disc(img, px((0.6, 0.0)), r * 0.3);
        }
    }
}

const ANCHOR_MARGIN: f64 = 0.03;

/// Render one instance under an explicit transform. Errors if any anchor
/// leaves the in-bounds margin.
pub fn render_with_transform(
    proto: &CategoryPrototype,
    t: &InstanceTransform,
) -> Result<(GrayImage, Vec<PartPoint>)> {
    if t.jitter.len() != proto.k {
        return Err(SsmnError::Invalid("jitter length != K".into()));
    }
    let mut anchors = Vec::with_capacity(proto.k);
    for (i, &a) in proto.anchors.iter().enumerate() {
        let p = t.apply(a);
        let p = (p.0 + t.jitter[i].0, p.1 + t.jitter[i].1);
        if !(ANCHOR_MARGIN..=1.0 - ANCHOR_MARGIN).contains(&p.0)
            || !(ANCHOR_MARGIN..=1.0 - ANCHOR_MARGIN).contains(&p.1)
        {
            return Err(SsmnError::Invalid(format!(
                "anchor {i} out of bounds at ({:.3}, {:.3})",
                p.0, p.1
            )));
        }
        anchors.push(p);
    }
    let mut img = GrayImage::from_pixels(
        RASTER_SIZE,
        RASTER_SIZE,
        vec![1.0; RASTER_SIZE * RASTER_SIZE],
    )?;
    let scale_px = (RASTER_SIZE - 1) as f64;
    let to_px = |p: (f64, f64)| (p.0 * scale_px, p.1 * scale_px);
    for &(a, b) in &proto.edges {
        draw_segment(&mut img, to_px(anchors[a]), to_px(anchors[b]), t.stroke_width);
    }
    for i in 0..proto.k {
        draw_motif(&mut img, proto.motifs[i], to_px(anchors[i]), t, t.stroke_width);
    }
    let parts = (0..proto.k)
        .map(|i| PartPoint {
            name: proto.names[i].clone(),
            x: anchors[i].0,
            y: anchors[i].1,
        })
        .collect();
    Ok((img, parts))
}

/// Sample a transform from `ranges` and render, retrying out-of-bounds
/// transforms up to 100 times.
pub fn render_instance(
    proto: &CategoryPrototype,
    rng: &mut ChaCha8Rng,
    ranges: &TransformRanges,
) -> Result<(GrayImage, Vec<PartPoint>)> {
    for _ in 0..100 {
        let t = InstanceTransform {
            rot: rng.gen_range(-ranges.rot..=ranges.rot),
            scale: rng.gen_range(ranges.scale_min..=ranges.scale_max),
            tx: rng.gen_range(-ranges.trans..=ranges.trans),
            ty: rng.gen_range(-ranges.trans..=ranges.trans),
            flip: rng.gen_bool(ranges.flip_p),
            jitter: (0..proto.k)
                .map(|_| {
                    (
                        ranges.jitter_sigma * sample_normal(rng),
                        ranges.jitter_sigma * sample_normal(rng),
                    )
                })
                .collect(),
            stroke_width: 1.6 + 0.4 * rng.gen_range(-1.0..1.0),
        };
        if let Ok(out) = render_with_transform(proto, &t) {
            return Ok(out);
        }
    }
    Err(SsmnError::Data(
        "transform sampling failed 100 times (anchors out of bounds)".into(),
    ))
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub categories: usize,
    pub per_category: usize,
    pub k: usize,
    /// (train, val, test) fractions, summing to 1.
    pub split_fracs: (f64, f64, f64),
    pub seed: u64,
    pub ranges: TransformRanges,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            categories: 50,
            per_category: 5,
            k: 10,
            split_fracs: (0.8, 0.1, 0.1),
            seed: 0,
            ranges: TransformRanges::default(),
        }
    }
}

/// Generate a dataset under `out_dir`: rasters, manifest, per-split ordered
/// pair lists. Deterministic in the spec seed.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<()> {
    let (ftr, fva, fte) = spec.split_fracs;
    if !(ftr >= 0.0 && fva >= 0.0 && fte >= 0.0 && (ftr + fva + fte - 1.0).abs() < 1e-9) {
        return Err(SsmnError::Invalid(format!(
            "split fractions ({ftr}, {fva}, {fte}) must be non-negative and sum to 1"
        )));
    }
    if spec.categories == 0 || spec.per_category < 2 {
        return Err(SsmnError::Invalid(
            "need at least 1 category and 2 images per category".into(),
        ));
    }
    let n_val = (fva * spec.categories as f64).round() as usize;
    let n_test = (fte * spec.categories as f64).round() as usize;
    if n_val + n_test >= spec.categories {
        return Err(SsmnError::Invalid("split fractions leave no training categories".into()));
    }
    let n_train = spec.categories - n_val - n_test;
    std::fs::create_dir_all(out_dir.join("rasters"))?;

    let mut records = Vec::new();
    let mut pairs: std::collections::BTreeMap<&str, Vec<(String, String)>> =
        std::collections::BTreeMap::new();
    for c in 0..spec.categories {
        let split = if c < n_train {
            "train"
        } else if c < n_train + n_val {
            "val"
        } else {
            "test"
        };
        let proto = gen_prototype(derive_seed(spec.seed, c as u64, 0), spec.k)?;
        let mut ids = Vec::with_capacity(spec.per_category);
        for i in 0..spec.per_category {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, c as u64, 1 + i as u64));
            let (img, mut parts) = render_instance(&proto, &mut rng, &spec.ranges)?;
            // per-instance part-order shuffle so index identity is never the
            // gold matching by construction
            for j in (1..parts.len()).rev() {
                parts.swap(j, rng.gen_range(0..=j));
            }
            let id = format!("c{c:03}i{i}");
            let raster_path = format!("rasters/{id}.pgm");
            write_pgm(&out_dir.join(&raster_path), &img)?;
            let rec = ImageRecord {
                id: id.clone(),
                category: format!("cat{c:03}"),
                split: split.to_string(),
                raster_path,
                parts,
            };
            rec.validate()?;
            records.push(rec);
            ids.push(id);
        }
        let list = pairs.entry(split).or_default();
        for a in &ids {
            for b in &ids {
                if a != b {
                    list.push((a.clone(), b.clone()));
                }
            }
        }
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    for (split, list) in &pairs {
        write_pairs(&out_dir.join(format!("pairs_{split}.tsv")), list)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gold_by_name, Dataset};
    use crate::pgm::{encode_pgm, read_pgm};

    #[test]
    fn same_seed_gives_identical_prototype() {
        let a = gen_prototype(42, 10).unwrap();
        let b = gen_prototype(42, 10).unwrap();
        assert_eq!(a, b);
        let c = gen_prototype(43, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn prototype_invariants_k10() {
        let p = gen_prototype(7, 10).unwrap();
        assert_eq!(p.anchors.len(), 10);
        assert_eq!(p.names.len(), 10);
        for i in 0..10 {
            let (x, y) = p.anchors[i];
            assert!((0.05..=0.95).contains(&x) && (0.05..=0.95).contains(&y));
            for j in (i + 1)..10 {
                let d = ((x - p.anchors[j].0).powi(2) + (y - p.anchors[j].1).powi(2)).sqrt();
                assert!(d >= 0.05, "anchors {i},{j} too close: {d}");
            }
        }
        // distinct motifs and names
        let mut motifs = p.motifs.clone();
        motifs.sort_unstable();
        motifs.dedup();
        assert_eq!(motifs.len(), 10);
        let mut names = p.names.clone();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 10);
    }

    #[test]
    fn k_out_of_range_rejected() {
        assert!(gen_prototype(1, 1).is_err());
        assert!(gen_prototype(1, 13).is_err());
    }

    #[test]
    fn identity_transform_preserves_anchors() {
        let p = gen_prototype(3, 6).unwrap();
        let (img, parts) = render_with_transform(&p, &InstanceTransform::identity(6)).unwrap();
        assert_eq!(img.width, RASTER_SIZE);
        for (i, part) in parts.iter().enumerate() {
            assert!((part.x - p.anchors[i].0).abs() < 1e-12);
            assert!((part.y - p.anchors[i].1).abs() < 1e-12);
        }
        // something was drawn
        assert!(img.pixels.iter().any(|&v| v < 0.5));
    }

    #[test]
    fn pure_translation_shifts_anchors() {
        let p = gen_prototype(5, 4).unwrap();
        let mut t = InstanceTransform::identity(4);
        t.tx = 0.05;
        let (_, parts) = render_with_transform(&p, &t).unwrap();
        for (i, part) in parts.iter().enumerate() {
            assert!((part.x - (p.anchors[i].0 + 0.05)).abs() < 1e-12);
            assert!((part.y - p.anchors[i].1).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_mirrors_x() {
        let p = gen_prototype(9, 4).unwrap();
        let mut t = InstanceTransform::identity(4);
        t.flip = true;
        let (_, parts) = render_with_transform(&p, &t).unwrap();
        for (i, part) in parts.iter().enumerate() {
            assert!((part.x - (1.0 - p.anchors[i].0)).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_transform_is_an_error() {
        let p = gen_prototype(3, 4).unwrap();
        let mut t = InstanceTransform::identity(4);
        t.tx = 0.9;
        assert!(render_with_transform(&p, &t).is_err());
    }

    #[test]
    fn build_dataset_counts_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            categories: 10,
            per_category: 5,
            k: 4,
            split_fracs: (0.6, 0.2, 0.2),
            seed: 11,
            ranges: TransformRanges::default(),
        };
        build_dataset(&spec, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.images.len(), 50);
        assert_eq!(ds.pairs["train"].len(), 6 * 5 * 4);
        assert_eq!(ds.pairs["val"].len(), 2 * 5 * 4);
        assert_eq!(ds.pairs["test"].len(), 2 * 5 * 4);
        // gold matching is a valid permutation for every pair
        for (s, t) in ds.pairs["train"].iter().take(10) {
            let gold = gold_by_name(&ds.images[s].parts, &ds.images[t].parts).unwrap();
            let mut sorted = gold.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..4).collect::<Vec<_>>());
        }
        // raster round-trip is bit-exact
        let rec = ds.images.values().next().unwrap();
        let img = read_pgm(&ds.raster_path(rec)).unwrap();
        let bytes = std::fs::read(ds.raster_path(rec)).unwrap();
        assert_eq!(encode_pgm(&img), bytes);
    }

    #[test]
    fn build_dataset_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            categories: 3,
            per_category: 2,
            k: 3,
            split_fracs: (0.34, 0.33, 0.33),
            seed: 5,
            ranges: TransformRanges::default(),
        };
        build_dataset(&spec, d1.path()).unwrap();
        build_dataset(&spec, d2.path()).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m1, m2);
        let r1 = std::fs::read(d1.path().join("rasters/c000i0.pgm")).unwrap();
        let r2 = std::fs::read(d2.path().join("rasters/c000i0.pgm")).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn bad_split_fractions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = DatasetSpec {
            categories: 5,
            per_category: 2,
            k: 3,
            split_fracs: (0.5, 0.2, 0.2),
            seed: 1,
            ranges: TransformRanges::default(),
        };
        assert!(build_dataset(&spec, dir.path()).is_err());
        spec.split_fracs = (0.0, 0.5, 0.5);
        assert!(build_dataset(&spec, dir.path()).is_err());
    }
}
