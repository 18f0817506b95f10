//! Visual semantics at three granularities: a natural-language description,
//! the top-K object labels, and a dense patch-feature matrix.
//!
//! Real extractors live behind [`VisualBackend`]; [`StubVisualBackend`] is a
//! pure function of `(image_ref, seed)` so the whole pipeline runs offline.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::hash::keyed_rng;
use crate::matrix::Matrix;

pub const DEFAULT_MAX_OBJECTS: usize = 36;
pub const DEFAULT_PATCHES: usize = 50;
pub const DEFAULT_FEATURE_WIDTH: usize = 768;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDescription {
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLabel {
    pub label: String,
    pub confidence: f64,
}

/// Detected objects, sorted by descending confidence. Duplicate labels are
/// kept: every detection is its own token source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectLabelSet {
    pub labels: Vec<ObjectLabel>,
}

impl ObjectLabelSet {
    pub fn tokens(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.label.clone()).collect()
    }
}

/// Patch features before projection, `m × D_f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualFeatureMatrix {
    pub values: Matrix,
}

impl VisualFeatureMatrix {
    pub fn patches(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }
}

pub trait VisualBackend {
    /// Recorded into enrichment output for provenance.
    fn version(&self) -> String;

    fn describe(&self, image_ref: &str) -> Result<ImageDescription>;

    /// Raw detections in emission order; ranking happens in [`detect_objects`].
    fn detect(&self, image_ref: &str) -> Result<Vec<ObjectLabel>>;

    fn embed(&self, image_ref: &str) -> Result<VisualFeatureMatrix>;
}

pub fn describe_image(image_ref: &str, backend: &dyn VisualBackend) -> Result<ImageDescription> {
    backend.describe(image_ref)
}

/// Keeps the `k_max` most confident detections. Ties keep emission order.
pub fn detect_objects(image_ref: &str, k_max: usize, backend: &dyn VisualBackend) -> Result<ObjectLabelSet> {
    if k_max == 0 {
        return Ok(ObjectLabelSet::default());
    }
    let raw = backend.detect(image_ref)?;
    Ok(top_k_labels(raw, k_max))
}

pub fn top_k_labels(mut raw: Vec<ObjectLabel>, k_max: usize) -> ObjectLabelSet {
    raw.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    raw.truncate(k_max);
    ObjectLabelSet { labels: raw }
}

pub fn embed_image(image_ref: &str, backend: &dyn VisualBackend) -> Result<VisualFeatureMatrix> {
    let features = backend.embed(image_ref)?;
    if !features.values.is_finite() {
        return Err(CoreError::NonFinite("visual features".to_string()));
    }
    Ok(features)
}

/// Maps `m` patch rows onto `N` sequence positions: `proj (N×m) · features (m×D_f)`.
pub fn project_visual(features: &VisualFeatureMatrix, proj: &Matrix) -> Result<Matrix> {
    if proj.cols() != features.patches() {
        return Err(CoreError::Shape {
            op: "project_visual",
            lhs: proj.shape(),
            rhs: features.values.shape(),
        });
    }
    proj.matmul(&features.values)
}

const STUB_SCENE_WORDS: [&str; 24] = [
    "a", "man", "woman", "dog", "cat", "street", "car", "sitting", "standing", "table", "with",
    "on", "holding", "sign", "phone", "crowd", "empty", "chairs", "room", "snow", "road", "park",
    "food", "plate",
];

const STUB_OBJECT_CLASSES: [&str; 16] = [
    "person", "car", "dog", "cat", "chair", "table", "cup", "bottle", "phone", "truck", "bench",
    "laptop", "book", "clock", "umbrella", "bicycle",
];

/// Offline backend whose outputs are pure functions of `(image_ref, seed)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubVisualBackend {
    pub seed: u64,
    pub patches: usize,
    pub width: usize,
    /// Number of raw detections emitted per image.
    pub candidates: usize,
}

impl Default for StubVisualBackend {
    fn default() -> Self {
        Self {
            seed: 0,
            patches: DEFAULT_PATCHES,
            width: DEFAULT_FEATURE_WIDTH,
            candidates: 40,
        }
    }
}

impl StubVisualBackend {
    pub fn with_shape(seed: u64, patches: usize, width: usize) -> Self {
        Self {
            seed,
            patches,
            width,
            ..Self::default()
        }
    }
}

impl VisualBackend for StubVisualBackend {
    fn version(&self) -> String {
        alloc::format!("stub-visual-v1/seed={}", self.seed)
    }

    fn describe(&self, image_ref: &str) -> Result<ImageDescription> {
        let mut rng = keyed_rng(image_ref, self.seed ^ 0xD5);
        let len = rng.gen_range(4..10);
        let tokens = (0..len)
            .map(|_| STUB_SCENE_WORDS[rng.gen_range(0..STUB_SCENE_WORDS.len())].to_string())
            .collect();
        Ok(ImageDescription { tokens })
    }

    fn detect(&self, image_ref: &str) -> Result<Vec<ObjectLabel>> {
        let mut rng = keyed_rng(image_ref, self.seed ^ 0x0B);
        Ok((0..self.candidates)
            .map(|_| ObjectLabel {
                label: STUB_OBJECT_CLASSES[rng.gen_range(0..STUB_OBJECT_CLASSES.len())].to_string(),
                confidence: rng.gen_range(0.0..1.0),
            })
            .collect())
    }

    fn embed(&self, image_ref: &str) -> Result<VisualFeatureMatrix> {
        let mut rng = keyed_rng(image_ref, self.seed ^ 0xE3);
        Ok(VisualFeatureMatrix {
            values: Matrix::random_uniform(self.patches, self.width, 1.0, &mut rng),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    struct Fixed(Vec<ObjectLabel>);

    impl VisualBackend for Fixed {
        fn version(&self) -> String {
            "fixed".into()
        }
        fn describe(&self, _: &str) -> Result<ImageDescription> {
            Err(CoreError::Backend("unavailable".into()))
        }
        fn detect(&self, _: &str) -> Result<Vec<ObjectLabel>> {
            Ok(self.0.clone())
        }
        fn embed(&self, _: &str) -> Result<VisualFeatureMatrix> {
            Ok(VisualFeatureMatrix {
                values: Matrix::from_rows(&[&[f64::NAN]]),
            })
        }
    }

    #[test]
    fn stub_is_deterministic_and_ref_sensitive() {
        let b = StubVisualBackend::default();
        assert_eq!(b.describe("a.jpg").unwrap(), b.describe("a.jpg").unwrap());
        assert!(!b.describe("a.jpg").unwrap().tokens.is_empty());
        let refs = ["a.jpg", "b.jpg", "c.jpg", "img/0001.png", "img/0002.png"];
        for (i, x) in refs.iter().enumerate() {
            for y in &refs[i + 1..] {
                assert_ne!(b.describe(x).unwrap(), b.describe(y).unwrap(), "{x} {y}");
            }
        }
    }

    #[test]
    fn default_embedding_shape() {
        let b = StubVisualBackend::default();
        let e = embed_image("a.jpg", &b).unwrap();
        assert_eq!(e.values.shape(), (50, 768));
        assert_eq!(e, embed_image("a.jpg", &b).unwrap());
        let toy = StubVisualBackend::with_shape(1, 5, 8);
        assert_eq!(embed_image("a.jpg", &toy).unwrap().values.shape(), (5, 8));
    }

    #[test]
    fn top_k_keeps_most_confident() {
        let b = StubVisualBackend::default();
        let raw = b.detect("x.jpg").unwrap();
        assert_eq!(raw.len(), 40);
        let got = detect_objects("x.jpg", DEFAULT_MAX_OBJECTS, &b).unwrap();
        assert_eq!(got.labels.len(), 36);
        // sort-and-slice oracle
        let mut conf: Vec<f64> = raw.iter().map(|l| l.confidence).collect();
        conf.sort_by(|a, c| c.partial_cmp(a).unwrap());
        let kept: Vec<f64> = got.labels.iter().map(|l| l.confidence).collect();
        assert_eq!(kept, conf[..36]);
        assert!(detect_objects("x.jpg", 0, &b).unwrap().labels.is_empty());
    }

    #[test]
    fn ties_keep_emission_order() {
        let mk = |l: &str, c| ObjectLabel { label: l.into(), confidence: c };
        let b = Fixed(vec![mk("a", 0.5), mk("b", 0.9), mk("c", 0.5), mk("a", 0.5)]);
        let got = detect_objects("x", 3, &b).unwrap();
        assert_eq!(got.tokens(), ["b", "a", "c"]);
    }

    #[test]
    fn backend_failures_are_typed() {
        let b = Fixed(vec![]);
        assert!(matches!(describe_image("x", &b), Err(CoreError::Backend(_))));
        assert!(matches!(embed_image("x", &b), Err(CoreError::NonFinite(_))));
    }

    #[test]
    fn projection_matches_hand_product() {
        let features = VisualFeatureMatrix {
            values: Matrix::from_rows(&[
                &[0.5, -1.0, 2.0, 0.0],
                &[1.5, 0.25, -0.5, 1.0],
                &[-2.0, 3.0, 1.0, -1.0],
            ]),
        };
        let proj = Matrix::from_rows(&[&[1.0, 0.0, 2.0], &[0.0, -1.0, 0.5]]);
        let out = project_visual(&features, &proj).unwrap();
        let expected = Matrix::from_rows(&[
            &[0.5 - 4.0, -1.0 + 6.0, 2.0 + 2.0, 0.0 - 2.0],
            &[-1.5 - 1.0, -0.25 + 1.5, 0.5 + 0.5, -1.0 - 0.5],
        ]);
        assert_eq!(out, expected);
        assert_eq!(project_visual(&features, &Matrix::identity(3)).unwrap(), features.values);
        assert!(project_visual(&features, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn default_projection_shape() {
        let b = StubVisualBackend::default();
        let f = embed_image("a.jpg", &b).unwrap();
        let proj = Matrix::zeros(256, 50);
        assert_eq!(project_visual(&f, &proj).unwrap().shape(), (256, 768));
    }

    #[test]
    fn projection_is_linear() {
        let b = StubVisualBackend::with_shape(3, 6, 4);
        let x = b.embed("x").unwrap().values;
        let y = b.embed("y").unwrap().values;
        let proj = b.embed("p").unwrap().values.slice_rows(0, 6).transpose().slice_rows(0, 3);
        let (a, c) = (0.7, -1.3);
        let combo = VisualFeatureMatrix { values: x.scale(a).add(&y.scale(c)).unwrap() };
        let lhs = project_visual(&combo, &proj).unwrap();
        let px = project_visual(&VisualFeatureMatrix { values: x }, &proj).unwrap();
        let py = project_visual(&VisualFeatureMatrix { values: y }, &proj).unwrap();
        let rhs = px.scale(a).add(&py.scale(c)).unwrap();
        for (l, r) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            assert!((l - r).abs() <= 1e-6 * r.abs().max(1.0));
        }
    }
}
