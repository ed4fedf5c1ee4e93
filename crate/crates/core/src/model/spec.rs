//! JSON model-spec documents and their validation.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, LayerKind};

/// Specs shipped with the crate: `(name, JSON text)`.
pub const BUNDLED_MODELS: [(&str, &str); 3] = [
    ("toy_teacher", include_str!("../../assets/models/toy_teacher.json")),
    ("vgg16_cifar", include_str!("../../assets/models/vgg16_cifar.json")),
    ("resnet_blocks_demo", include_str!("../../assets/models/resnet_blocks_demo.json")),
];

pub fn bundled_spec(name: &str) -> Option<&'static str> {
    BUNDLED_MODELS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// One feature block as written in the document: a convolution, optionally
/// followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: String,
    /// Optional; checked against the previous block's output when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Defaults to `kernel / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    #[serde(default = "yes")]
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierDoc {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
}

/// The raw document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub name: String,
    pub input_shape: [usize; 3],
    pub blocks: Vec<BlockDoc>,
    pub classifier: Vec<ClassifierDoc>,
}

/// A validated feature block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: bool,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierLayer {
    GlobalAvgPool,
    Dense { in_features: usize, out_features: usize },
}

/// A validated, shape-checked model description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub blocks: Vec<BlockSpec>,
    pub classifier: Vec<ClassifierLayer>,
    pub classes: usize,
}

fn block_kind(kind: &str) -> Option<LayerKind> {
    match kind {
        "conv3x3" => Some(LayerKind::Conv3x3),
        "conv1x1" => Some(LayerKind::Conv1x1),
        _ => None,
    }
}

/// Parse and validate a model-spec document. Every shape is checked here.
pub fn parse_model_spec(text: &str) -> Result<ModelSpec> {
    let doc: ModelDoc = serde_json::from_str(text)
        .map_err(|e| Error::spec(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    validate(&doc)
}

pub fn validate(doc: &ModelDoc) -> Result<ModelSpec> {
    let [c, mut h, mut w] = doc.input_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::spec("input_shape", "dimensions must be positive"));
    }
    if doc.blocks.is_empty() {
        return Err(Error::spec("blocks", "at least one block is required"));
    }
    let mut seen = HashSet::new();
    let mut blocks = Vec::with_capacity(doc.blocks.len());
    let mut channels = c;
    for (i, b) in doc.blocks.iter().enumerate() {
        let name = b.name.clone().unwrap_or_else(|| format!("block{i}"));
        let loc = format!("blocks[{i}] `{name}`");
        if !seen.insert(name.clone()) {
            return Err(Error::spec(loc, format!("duplicate block name `{name}`")));
        }
        let kind = block_kind(&b.kind)
            .ok_or_else(|| Error::spec(&loc, format!("unknown layer kind `{}`", b.kind)))?;
        if let Some(expected) = b.in_channels {
            if expected != channels {
                let prev = match i {
                    0 => "the input".to_string(),
                    _ => format!("blocks[{}] `{}`", i - 1, blocks.last().map_or("", |p: &BlockSpec| &p.name)),
                };
                return Err(Error::spec(
                    &loc,
                    format!("expects {expected} input channels but {prev} emits {channels}"),
                ));
            }
        }
        if b.out_channels == 0 {
            return Err(Error::spec(&loc, "out_channels must be positive"));
        }
        if b.stride == 0 {
            return Err(Error::spec(&loc, "stride must be positive"));
        }
        let k = kind.kernel_size();
        let padding = b.padding.unwrap_or(k / 2);
        h = ops::conv_output_dim(h, k, b.stride, padding).map_err(|e| Error::spec(&loc, e.to_string()))?;
        w = ops::conv_output_dim(w, k, b.stride, padding).map_err(|e| Error::spec(&loc, e.to_string()))?;
        blocks.push(BlockSpec {
            name,
            kind,
            in_channels: channels,
            out_channels: b.out_channels,
            stride: b.stride,
            padding,
            batch_norm: b.batch_norm,
            relu: b.relu,
        });
        channels = b.out_channels;
    }

    let mut classifier = Vec::new();
    let mut features = channels * h * w;
    for (i, l) in doc.classifier.iter().enumerate() {
        let loc = format!("classifier[{i}]");
        match l.kind.as_str() {
            "global_avg_pool" => {
                if classifier.iter().any(|c| matches!(c, ClassifierLayer::Dense { .. })) {
                    return Err(Error::spec(loc, "global_avg_pool must precede dense layers"));
                }
                features = channels;
                classifier.push(ClassifierLayer::GlobalAvgPool);
            }
            "dense" => {
                let out = l
                    .out_channels
                    .filter(|&o| o > 0)
                    .ok_or_else(|| Error::spec(&loc, "dense needs a positive out_channels"))?;
                classifier.push(ClassifierLayer::Dense {
                    in_features: features,
                    out_features: out,
                });
                features = out;
            }
            other => return Err(Error::spec(loc, format!("unknown layer kind `{other}`"))),
        }
    }
    if !matches!(classifier.last(), Some(ClassifierLayer::Dense { .. })) {
        return Err(Error::spec("classifier", "must end with a dense layer"));
    }
    if features < 2 {
        return Err(Error::spec("classifier", "needs at least two classes"));
    }
    Ok(ModelSpec {
        name: doc.name.clone(),
        input_shape: doc.input_shape,
        blocks,
        classifier,
        classes: features,
    })
}

impl ModelSpec {
    pub fn bundled(name: &str) -> Result<Self> {
        let text = bundled_spec(name).ok_or_else(|| {
            let names: Vec<_> = BUNDLED_MODELS.iter().map(|(n, _)| *n).collect();
            Error::invalid(format!("no bundled model `{name}` (have {})", names.join(", ")))
        })?;
        parse_model_spec(text)
    }

    /// Load a bundled spec by name, or a JSON file by path.
    pub fn load(name_or_path: &str) -> Result<Self> {
        match bundled_spec(name_or_path) {
            Some(text) => parse_model_spec(text),
            None => parse_model_spec(&std::fs::read_to_string(name_or_path)?),
        }
    }

    pub fn to_doc(&self) -> ModelDoc {
        ModelDoc {
            name: self.name.clone(),
            input_shape: self.input_shape,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockDoc {
                    name: Some(b.name.clone()),
                    kind: b.kind.name().to_string(),
                    in_channels: Some(b.in_channels),
                    out_channels: b.out_channels,
                    stride: b.stride,
                    padding: Some(b.padding),
                    batch_norm: b.batch_norm,
                    relu: b.relu,
                })
                .collect(),
            classifier: self
                .classifier
                .iter()
                .map(|c| match c {
                    ClassifierLayer::GlobalAvgPool => ClassifierDoc {
                        kind: "global_avg_pool".into(),
                        out_channels: None,
                    },
                    ClassifierLayer::Dense { out_features, .. } => ClassifierDoc {
                        kind: "dense".into(),
                        out_channels: Some(*out_features),
                    },
                })
                .collect(),
        }
    }

    /// Indices of every convolution block whose kernel is larger than 1×1.
    pub fn identify_replaceable(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind.is_conv() && b.kind.kernel_size() > 1)
            .map(|(i, _)| i)
            .collect()
    }
}
