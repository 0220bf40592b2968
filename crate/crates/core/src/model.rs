//! Model intermediate representation: a flat, feed-forward list of layers
//! with fully inferred shapes.
//!
//! The JSON wire format carries `{name, input_shape, layers: [{id, kind,
//! ...kind fields}]}`. Shapes are chained from `input_shape`; a layer may
//! declare `shape_in` as a cross-check, and `Linear` must declare
//! `shape_out` since its fan-out is a free parameter.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::digest::json_digest;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model schema error: {0}")]
    Schema(String),
    #[error("unknown layer kind `{kind}` in layer `{layer}`")]
    UnknownKind { layer: String, kind: String },
    #[error("shape mismatch at layer `{layer}`: {detail}")]
    ShapeMismatch { layer: String, detail: String },
}

/// Layer operation plus its kind-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum LayerOp {
    /// Dense matrix product; fan-out is declared in the wire document.
    Linear,
    /// Valid (unpadded) 2-D convolution with a square `kernel x kernel` window.
    Conv2d {
        kernel: usize,
        stride: usize,
        channels_in: usize,
        channels_out: usize,
    },
    /// Polynomial activation of the given degree with a declared
    /// approximation-error bound for the backend polynomial.
    ActPoly { act_degree: u32, act_error: f64 },
    /// Non-overlapping average pool with a `stride x stride` window.
    /// The window multiply burns one multiplicative level.
    AvgPool { stride: usize },
    /// Reshape to rank one. Free: no ciphertext operation.
    Flatten,
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Linear => "Linear",
            LayerOp::Conv2d { .. } => "Conv2d",
            LayerOp::ActPoly { .. } => "ActPoly",
            LayerOp::AvgPool { .. } => "AvgPool",
            LayerOp::Flatten => "Flatten",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub op: LayerOp,
    pub shape_in: Vec<usize>,
    pub shape_out: Vec<usize>,
}

impl LayerSpec {
    pub fn in_elems(&self) -> usize {
        self.shape_in.iter().product()
    }

    pub fn out_elems(&self) -> usize {
        self.shape_out.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelGraph {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Compact description used for seeding proposals and for policy requests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub layer_count: usize,
    pub kind_counts: BTreeMap<String, usize>,
    /// Sum of per-layer multiplicative depth costs at declared act degrees.
    pub depth_lower_bound: u32,
    pub widest_layer_id: String,
    pub widest_layer_elems: usize,
    pub layers: Vec<SummaryLayer>,
    /// Digest over layer kinds and shapes; identical architectures collide
    /// on purpose so earlier runs can seed later ones.
    pub signature: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryLayer {
    pub id: String,
    pub kind: String,
    pub shape_in: Vec<usize>,
    pub shape_out: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<RawLayer>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    id: String,
    kind: String,
    #[serde(default)]
    shape_in: Option<Vec<usize>>,
    #[serde(default)]
    shape_out: Option<Vec<usize>>,
    #[serde(default)]
    kernel: Option<usize>,
    #[serde(default)]
    stride: Option<usize>,
    #[serde(default)]
    channels_in: Option<usize>,
    #[serde(default)]
    channels_out: Option<usize>,
    #[serde(default)]
    act_degree: Option<u32>,
    #[serde(default)]
    act_error: Option<f64>,
}

impl RawLayer {
    fn require<T: Copy>(&self, field: Option<T>, name: &str) -> Result<T, ModelError> {
        field.ok_or_else(|| {
            ModelError::Schema(format!(
                "layer `{}` ({}) is missing required field `{}`",
                self.id, self.kind, name
            ))
        })
    }

    fn forbid<T>(&self, field: &Option<T>, name: &str) -> Result<(), ModelError> {
        if field.is_some() {
            return Err(ModelError::Schema(format!(
                "layer `{}` ({}) does not accept field `{}`",
                self.id, self.kind, name
            )));
        }
        Ok(())
    }
}

impl ModelGraph {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let raw: RawModel =
            serde_json::from_str(text).map_err(|e| ModelError::Schema(e.to_string()))?;
        Self::from_raw(raw)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ModelError> {
        let raw: RawModel =
            serde_json::from_value(value).map_err(|e| ModelError::Schema(e.to_string()))?;
        Self::from_raw(raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    fn from_raw(raw: RawModel) -> Result<Self, ModelError> {
        if raw.name.is_empty() {
            return Err(ModelError::Schema("model name must be non-empty".into()));
        }
        if raw.input_shape.is_empty() || raw.input_shape.contains(&0) {
            return Err(ModelError::Schema(
                "input_shape must be non-empty with positive dims".into(),
            ));
        }
        if raw.layers.is_empty() {
            return Err(ModelError::Schema(
                "model must have at least one layer".into(),
            ));
        }

        let mut seen = std::collections::BTreeSet::new();
        let mut layers = Vec::with_capacity(raw.layers.len());
        let mut cur = raw.input_shape.clone();

        for rl in &raw.layers {
            if rl.id.is_empty() {
                return Err(ModelError::Schema("layer id must be non-empty".into()));
            }
            if !seen.insert(rl.id.clone()) {
                return Err(ModelError::Schema(format!(
                    "duplicate layer id `{}`",
                    rl.id
                )));
            }
            if let Some(declared) = &rl.shape_in {
                if *declared != cur {
                    return Err(ModelError::ShapeMismatch {
                        layer: rl.id.clone(),
                        detail: format!("declared shape_in {declared:?}, inferred {cur:?}"),
                    });
                }
            }
            let (op, shape_out) = build_layer(rl, &cur)?;
            layers.push(LayerSpec {
                id: rl.id.clone(),
                op,
                shape_in: cur.clone(),
                shape_out: shape_out.clone(),
            });
            cur = shape_out;
        }

        Ok(ModelGraph {
            name: raw.name,
            input_shape: raw.input_shape,
            layers,
        })
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.layers.last().expect("non-empty graph").shape_out
    }

    pub fn summarize(&self) -> ModelSummary {
        let mut kind_counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut widest = (self.layers[0].id.clone(), 0usize);
        let mut depth = 0u32;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            *kind_counts.entry(l.op.kind_name().to_string()).or_insert(0) += 1;
            let elems = l.out_elems();
            if elems > widest.1 {
                widest = (l.id.clone(), elems);
            }
            depth += crate::analyzer::layer_depth_cost(&l.op, None);
            layers.push(SummaryLayer {
                id: l.id.clone(),
                kind: l.op.kind_name().to_string(),
                shape_in: l.shape_in.clone(),
                shape_out: l.shape_out.clone(),
            });
        }
        ModelSummary {
            name: self.name.clone(),
            layer_count: self.layers.len(),
            kind_counts,
            depth_lower_bound: depth,
            widest_layer_id: widest.0,
            widest_layer_elems: widest.1,
            signature: self.signature(),
            layers,
        }
    }

    /// Digest of the architecture alone: kinds, shapes, and declared
    /// activation parameters, independent of the model name.
    pub fn signature(&self) -> String {
        type SkeletonRow<'a> = (&'a str, &'a Vec<usize>, &'a Vec<usize>, Option<(u32, f64)>);
        let skeleton: Vec<SkeletonRow> = self
            .layers
            .iter()
            .map(|l| {
                let act = match l.op {
                    LayerOp::ActPoly {
                        act_degree,
                        act_error,
                    } => Some((act_degree, act_error)),
                    _ => None,
                };
                (l.op.kind_name(), &l.shape_in, &l.shape_out, act)
            })
            .collect();
        json_digest(&(&self.input_shape, skeleton))
    }
}

/// A declared `shape_out` is never trusted, only checked against inference.
fn check_declared_out(rl: &RawLayer, inferred: &[usize]) -> Result<(), ModelError> {
    if let Some(out) = &rl.shape_out {
        if out != inferred {
            return Err(ModelError::ShapeMismatch {
                layer: rl.id.clone(),
                detail: format!("declared shape_out {out:?}, inferred {inferred:?}"),
            });
        }
    }
    Ok(())
}

fn build_layer(rl: &RawLayer, cur: &[usize]) -> Result<(LayerOp, Vec<usize>), ModelError> {
    let mismatch = |detail: String| ModelError::ShapeMismatch {
        layer: rl.id.clone(),
        detail,
    };
    match rl.kind.as_str() {
        "Linear" => {
            rl.forbid(&rl.kernel, "kernel")?;
            rl.forbid(&rl.stride, "stride")?;
            rl.forbid(&rl.channels_in, "channels_in")?;
            rl.forbid(&rl.channels_out, "channels_out")?;
            rl.forbid(&rl.act_degree, "act_degree")?;
            rl.forbid(&rl.act_error, "act_error")?;
            let out = rl.shape_out.clone().ok_or_else(|| {
                ModelError::Schema(format!("Linear layer `{}` must declare shape_out", rl.id))
            })?;
            if cur.len() != 1 {
                return Err(mismatch(format!(
                    "Linear expects rank-1 input, got {cur:?} (flatten first)"
                )));
            }
            if out.len() != 1 || out[0] == 0 {
                return Err(mismatch(format!(
                    "Linear shape_out must be [n>0], got {out:?}"
                )));
            }
            Ok((LayerOp::Linear, out))
        }
        "Conv2d" => {
            rl.forbid(&rl.act_degree, "act_degree")?;
            rl.forbid(&rl.act_error, "act_error")?;
            let kernel = rl.require(rl.kernel, "kernel")?;
            let stride = rl.require(rl.stride, "stride")?;
            let channels_in = rl.require(rl.channels_in, "channels_in")?;
            let channels_out = rl.require(rl.channels_out, "channels_out")?;
            if kernel == 0 || stride == 0 || channels_in == 0 || channels_out == 0 {
                return Err(ModelError::Schema(format!(
                    "Conv2d layer `{}` parameters must be positive",
                    rl.id
                )));
            }
            if let Some(out) = &rl.shape_out {
                // Declared conv outputs are validated after inference below.
                if out.len() != 3 {
                    return Err(mismatch(format!(
                        "Conv2d shape_out must be rank 3, got {out:?}"
                    )));
                }
            }
            let [c, h, w]: [usize; 3] = cur.try_into().map_err(|_| {
                mismatch(format!("Conv2d expects rank-3 [C,H,W] input, got {cur:?}"))
            })?;
            if c != channels_in {
                return Err(mismatch(format!(
                    "channels_in {channels_in} does not match incoming channels {c}"
                )));
            }
            if h < kernel || w < kernel {
                return Err(mismatch(format!(
                    "kernel {kernel} exceeds spatial input {h}x{w}"
                )));
            }
            let oh = (h - kernel) / stride + 1;
            let ow = (w - kernel) / stride + 1;
            let inferred = vec![channels_out, oh, ow];
            if let Some(out) = &rl.shape_out {
                if *out != inferred {
                    return Err(mismatch(format!(
                        "declared shape_out {out:?}, inferred {inferred:?}"
                    )));
                }
            }
            Ok((
                LayerOp::Conv2d {
                    kernel,
                    stride,
                    channels_in,
                    channels_out,
                },
                inferred,
            ))
        }
        "ActPoly" => {
            rl.forbid(&rl.kernel, "kernel")?;
            rl.forbid(&rl.stride, "stride")?;
            rl.forbid(&rl.channels_in, "channels_in")?;
            rl.forbid(&rl.channels_out, "channels_out")?;
            let act_degree = rl.require(rl.act_degree, "act_degree")?;
            let act_error = rl.require(rl.act_error, "act_error")?;
            if act_degree == 0 {
                return Err(ModelError::Schema(format!(
                    "ActPoly layer `{}` act_degree must be >= 1",
                    rl.id
                )));
            }
            if !act_error.is_finite() || act_error < 0.0 {
                return Err(ModelError::Schema(format!(
                    "ActPoly layer `{}` act_error must be finite and >= 0",
                    rl.id
                )));
            }
            check_declared_out(rl, cur)?;
            Ok((
                LayerOp::ActPoly {
                    act_degree,
                    act_error,
                },
                cur.to_vec(),
            ))
        }
        "AvgPool" => {
            rl.forbid(&rl.kernel, "kernel")?;
            rl.forbid(&rl.channels_in, "channels_in")?;
            rl.forbid(&rl.channels_out, "channels_out")?;
            rl.forbid(&rl.act_degree, "act_degree")?;
            rl.forbid(&rl.act_error, "act_error")?;
            let stride = rl.require(rl.stride, "stride")?;
            if stride == 0 {
                return Err(ModelError::Schema(format!(
                    "AvgPool layer `{}` stride must be positive",
                    rl.id
                )));
            }
            let [c, h, w]: [usize; 3] = cur.try_into().map_err(|_| {
                mismatch(format!("AvgPool expects rank-3 [C,H,W] input, got {cur:?}"))
            })?;
            if h < stride || w < stride {
                return Err(mismatch(format!(
                    "pool window {stride} exceeds spatial input {h}x{w}"
                )));
            }
            let oh = (h - stride) / stride + 1;
            let ow = (w - stride) / stride + 1;
            let inferred = vec![c, oh, ow];
            check_declared_out(rl, &inferred)?;
            Ok((LayerOp::AvgPool { stride }, inferred))
        }
        "Flatten" => {
            rl.forbid(&rl.kernel, "kernel")?;
            rl.forbid(&rl.stride, "stride")?;
            rl.forbid(&rl.channels_in, "channels_in")?;
            rl.forbid(&rl.channels_out, "channels_out")?;
            rl.forbid(&rl.act_degree, "act_degree")?;
            rl.forbid(&rl.act_error, "act_error")?;
            let inferred = vec![cur.iter().product()];
            check_declared_out(rl, &inferred)?;
            Ok((LayerOp::Flatten, inferred))
        }
        other => Err(ModelError::UnknownKind {
            layer: rl.id.clone(),
            kind: other.to_string(),
        }),
    }
}

#[cfg(test)]
pub(crate) mod testdata {
    pub(crate) fn lenet_json() -> &'static str {
        r#"{
            "name": "lenet",
            "input_shape": [1, 32, 32],
            "layers": [
                {"id": "conv1", "kind": "Conv2d", "kernel": 5, "stride": 1, "channels_in": 1, "channels_out": 6},
                {"id": "act1", "kind": "ActPoly", "act_degree": 31, "act_error": 1e-4},
                {"id": "pool1", "kind": "AvgPool", "stride": 2},
                {"id": "conv2", "kind": "Conv2d", "kernel": 5, "stride": 1, "channels_in": 6, "channels_out": 16},
                {"id": "act2", "kind": "ActPoly", "act_degree": 31, "act_error": 1e-4},
                {"id": "pool2", "kind": "AvgPool", "stride": 2},
                {"id": "flat", "kind": "Flatten"},
                {"id": "fc1", "kind": "Linear", "shape_out": [120]},
                {"id": "fc2", "kind": "Linear", "shape_out": [10]}
            ]
        }"#
    }
}

#[cfg(test)]
mod tests {
    use super::testdata::lenet_json;
    use super::*;

    fn single_linear() -> &'static str {
        r#"{
            "name": "tiny",
            "input_shape": [784],
            "layers": [{"id": "fc", "kind": "Linear", "shape_out": [10]}]
        }"#
    }

    #[test]
    fn parses_single_linear_and_infers_shapes() {
        let g = ModelGraph::from_json(single_linear()).unwrap();
        assert_eq!(g.layers.len(), 1);
        assert_eq!(g.layers[0].shape_in, vec![784]);
        assert_eq!(g.layers[0].shape_out, vec![10]);
        assert_eq!(g.layers[0].op, LayerOp::Linear);
    }

    #[test]
    fn lenet_chains_nine_layers() {
        let g = ModelGraph::from_json(lenet_json()).unwrap();
        assert_eq!(g.layers.len(), 9);
        assert_eq!(g.layer("conv1").unwrap().shape_out, vec![6, 28, 28]);
        assert_eq!(g.layer("pool1").unwrap().shape_out, vec![6, 14, 14]);
        assert_eq!(g.layer("conv2").unwrap().shape_out, vec![16, 10, 10]);
        assert_eq!(g.layer("pool2").unwrap().shape_out, vec![16, 5, 5]);
        assert_eq!(g.layer("flat").unwrap().shape_out, vec![400]);
        assert_eq!(g.layer("fc1").unwrap().shape_out, vec![120]);
        assert_eq!(g.output_shape(), &[10]);
        let s = g.summarize();
        assert_eq!(s.depth_lower_bound, 16);
        assert_eq!(s.kind_counts["Conv2d"], 2);
        assert_eq!(s.widest_layer_id, "conv1");
        assert_eq!(s.widest_layer_elems, 6 * 28 * 28);
    }

    #[test]
    fn conv_into_linear_without_flatten_is_shape_mismatch() {
        let text = r#"{
            "name": "bad",
            "input_shape": [1, 8, 8],
            "layers": [
                {"id": "c", "kind": "Conv2d", "kernel": 3, "stride": 1, "channels_in": 1, "channels_out": 16},
                {"id": "fc", "kind": "Linear", "shape_out": [10]}
            ]
        }"#;
        match ModelGraph::from_json(text) {
            Err(ModelError::ShapeMismatch { layer, .. }) => assert_eq!(layer, "fc"),
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn declared_shape_in_is_checked() {
        let text = r#"{
            "name": "bad",
            "input_shape": [16],
            "layers": [{"id": "fc", "kind": "Linear", "shape_in": [400], "shape_out": [10]}]
        }"#;
        assert!(matches!(
            ModelGraph::from_json(text),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn unknown_kind_is_its_own_error() {
        let text = r#"{
            "name": "bad",
            "input_shape": [4],
            "layers": [{"id": "x", "kind": "Softmax"}]
        }"#;
        assert!(matches!(
            ModelGraph::from_json(text),
            Err(ModelError::UnknownKind { .. })
        ));
    }

    #[test]
    fn missing_required_field_is_schema_error() {
        let text = r#"{
            "name": "bad",
            "input_shape": [1, 8, 8],
            "layers": [{"id": "c", "kind": "Conv2d", "kernel": 3, "stride": 1, "channels_in": 1}]
        }"#;
        assert!(matches!(
            ModelGraph::from_json(text),
            Err(ModelError::Schema(_))
        ));
    }

    #[test]
    fn extra_field_is_schema_error() {
        let text = r#"{
            "name": "bad",
            "input_shape": [4],
            "layers": [{"id": "fc", "kind": "Linear", "shape_out": [2], "padding": 1}]
        }"#;
        assert!(matches!(
            ModelGraph::from_json(text),
            Err(ModelError::Schema(_))
        ));
    }

    #[test]
    fn round_trips_through_serialization() {
        let g = ModelGraph::from_json(lenet_json()).unwrap();
        let back = ModelGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn signature_ignores_name_but_not_shapes() {
        let a = ModelGraph::from_json(single_linear()).unwrap();
        let mut renamed = a.clone();
        renamed.name = "other".into();
        assert_eq!(a.signature(), renamed.signature());
        let b = ModelGraph::from_json(
            r#"{"name":"tiny","input_shape":[784],"layers":[{"id":"fc","kind":"Linear","shape_out":[16]}]}"#,
        )
        .unwrap();
        assert_ne!(a.signature(), b.signature());
    }
}
