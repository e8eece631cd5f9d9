//! Encoder–fusion–decoder networks predicting steering angle and speed.
//!
//! Every variant maps a [`Batch`] to one normalized angle and one normalized
//! speed per sample. Image branches take `B×T×C×H×W` tensors, oldest step
//! first.

mod backbone;
mod batch;
pub mod checkpoint;
pub mod layers;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{NormStats, SEQUENCE_FRAMES};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use layers::{BiGru, Builder, Ctx, Head, Lstm, Mlp};

pub use backbone::{
    adapt_first_layer, scaled, Backbone, BackboneFamily, BackboneSpec, PRETRAINED_ENV,
};
pub use batch::{eligible_positions, BatchBuilder, SampleRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    M1,
    M2Single,
    M2Stacked,
    M2Sequence,
    M3,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::M1,
        Variant::M2Single,
        Variant::M2Stacked,
        Variant::M2Sequence,
        Variant::M3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::M1 => "m1",
            Self::M2Single => "m2_single",
            Self::M2Stacked => "m2_stacked",
            Self::M2Sequence => "m2_sequence",
            Self::M3 => "m3",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model variant {s:?}")))
    }
}

/// What an image branch consumes per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    /// Normalized front RGB.
    Front,
    /// Front RGB followed by one-hot mask planes; `frames` of them stacked
    /// along channels.
    Stacked { frames: usize },
    /// Normalized map RGB of the current frame.
    Map,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputSpec {
    pub name: &'static str,
    pub kind: InputKind,
    pub steps: usize,
    pub channels: usize,
}

/// Declarative description of one architecture. Widths are given at scale 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// (width, height) of every image input.
    pub image_size: (usize, usize),
    /// One per image branch, in the variant's branch order.
    pub backbones: Vec<BackboneSpec>,
    /// 0 (no semantic input), 20 or 47.
    pub semantic_dim: usize,
    pub sequence_length: usize,
    /// Positions between consecutive sequence steps.
    pub frame_offset: usize,
    pub recurrent_hidden: usize,
    pub recurrent_layers: usize,
    pub semantic_hidden: Vec<usize>,
    pub fusion_dims: Vec<usize>,
    pub fusion_dropout: f64,
    pub decoder_dims: Vec<usize>,
    pub dropout: f64,
    pub head_batch_norm: bool,
    pub n_seg_classes: usize,
    pub scale: f64,
}

fn bb(family: BackboneFamily, in_channels: usize, feature_dim: usize) -> BackboneSpec {
    BackboneSpec {
        family,
        pretrained: family != BackboneFamily::ToyConv,
        in_channels,
        feature_dim,
    }
}

impl ModelSpec {
    /// Defaults for a variant. `families` overrides the backbone family of
    /// each branch (e.g. all `ToyConv` for desk-scale runs).
    pub fn new(
        variant: Variant,
        image_size: (usize, usize),
        families: Option<&[BackboneFamily]>,
    ) -> Result<Self> {
        use BackboneFamily::*;
        let n_classes = crate::dataset::N_SEG_CLASSES;
        let stacked = 3 + n_classes;
        let mut spec = match variant {
            Variant::M1 => Self {
                variant,
                image_size,
                backbones: vec![bb(Residual34, 3, 512)],
                semantic_dim: 0,
                sequence_length: 2,
                frame_offset: 4,
                recurrent_hidden: 128,
                recurrent_layers: 1,
                semantic_hidden: vec![256, 128],
                fusion_dims: vec![],
                fusion_dropout: 0.0,
                decoder_dims: vec![1024, 512, 256],
                dropout: 0.1,
                head_batch_norm: false,
                n_seg_classes: n_classes,
                scale: 1.0,
            },
            Variant::M2Single | Variant::M2Stacked => Self {
                variant,
                image_size,
                backbones: vec![bb(
                    Dense121,
                    if variant == Variant::M2Single {
                        stacked
                    } else {
                        stacked * SEQUENCE_FRAMES
                    },
                    1024,
                )],
                semantic_dim: 0,
                sequence_length: 1,
                frame_offset: 1,
                recurrent_hidden: 0,
                recurrent_layers: 0,
                semantic_hidden: vec![],
                fusion_dims: vec![],
                fusion_dropout: 0.0,
                decoder_dims: vec![200, 50, 10],
                dropout: 0.0,
                head_batch_norm: true,
                n_seg_classes: n_classes,
                scale: 1.0,
            },
            Variant::M2Sequence => Self {
                variant,
                image_size,
                backbones: vec![
                    bb(Residual34, 3, 512),
                    bb(Dense201, 3, 1920),
                    bb(Dense121, stacked, 1024),
                ],
                semantic_dim: 0,
                sequence_length: SEQUENCE_FRAMES,
                frame_offset: 1,
                recurrent_hidden: 64,
                recurrent_layers: 3,
                semantic_hidden: vec![],
                fusion_dims: vec![512, 128],
                fusion_dropout: 0.2,
                decoder_dims: vec![256, 128, 32],
                dropout: 0.0,
                head_batch_norm: false,
                n_seg_classes: n_classes,
                scale: 1.0,
            },
            Variant::M3 => Self {
                variant,
                image_size,
                backbones: vec![bb(Residual50, 3, 2048), bb(Residual34, 3, 512)],
                semantic_dim: 20,
                sequence_length: 2,
                frame_offset: 4,
                recurrent_hidden: 128,
                recurrent_layers: 1,
                semantic_hidden: vec![64],
                fusion_dims: vec![],
                fusion_dropout: 0.0,
                decoder_dims: vec![64, 32],
                dropout: 0.2,
                head_batch_norm: false,
                n_seg_classes: n_classes,
                scale: 1.0,
            },
        };
        if let Some(fams) = families {
            if fams.len() != spec.backbones.len() {
                return Err(Error::invalid(format!(
                    "{variant} has {} image branches, got {} backbone families",
                    spec.backbones.len(),
                    fams.len()
                )));
            }
            for (b, f) in spec.backbones.iter_mut().zip(fams) {
                *b = bb(
                    *f,
                    b.in_channels,
                    if *f == ToyConv { 256 } else { b.feature_dim },
                );
            }
        }
        Ok(spec)
    }

    /// Adjusts the gap between the two steps of m1/m3 so it spans the same
    /// time (four raw frames) on data kept every `stride` frames.
    pub fn with_frame_stride(mut self, stride: u32) -> Self {
        if matches!(self.variant, Variant::M1 | Variant::M3) {
            self.frame_offset = ((4.0 / f64::from(stride.max(1))).round() as usize).max(1);
        }
        self
    }

    /// Same spec with every backbone replaced by the small CNN.
    pub fn with_toy_backbones(mut self) -> Self {
        for b in &mut self.backbones {
            *b = bb(BackboneFamily::ToyConv, b.in_channels, 256);
        }
        self
    }

    pub fn inputs(&self) -> Vec<InputSpec> {
        let stacked = 3 + self.n_seg_classes;
        let t = self.sequence_length;
        match self.variant {
            Variant::M1 => vec![InputSpec {
                name: "front",
                kind: InputKind::Front,
                steps: t,
                channels: 3,
            }],
            Variant::M2Single => vec![InputSpec {
                name: "stacked",
                kind: InputKind::Stacked { frames: 1 },
                steps: 1,
                channels: stacked,
            }],
            Variant::M2Stacked => vec![InputSpec {
                name: "stacked",
                kind: InputKind::Stacked {
                    frames: SEQUENCE_FRAMES,
                },
                steps: 1,
                channels: stacked * SEQUENCE_FRAMES,
            }],
            Variant::M2Sequence => vec![
                InputSpec {
                    name: "front",
                    kind: InputKind::Front,
                    steps: t,
                    channels: 3,
                },
                InputSpec {
                    name: "stacked",
                    kind: InputKind::Stacked { frames: 1 },
                    steps: t,
                    channels: stacked,
                },
            ],
            Variant::M3 => vec![
                InputSpec {
                    name: "front",
                    kind: InputKind::Front,
                    steps: t,
                    channels: 3,
                },
                InputSpec {
                    name: "map",
                    kind: InputKind::Map,
                    steps: 1,
                    channels: 3,
                },
            ],
        }
    }

    /// Positions of history needed before the predicted frame.
    pub fn history(&self) -> usize {
        match self.variant {
            Variant::M2Stacked => SEQUENCE_FRAMES - 1,
            _ => (self.sequence_length - 1) * self.frame_offset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if ![0, 20, 47].contains(&self.semantic_dim) {
            return Err(Error::invalid(format!(
                "semantic_dim must be 0, 20 or 47, got {}",
                self.semantic_dim
            )));
        }
        if self.sequence_length == 0 || self.frame_offset == 0 {
            return Err(Error::invalid(
                "sequence_length and frame_offset must be positive",
            ));
        }
        let (w, h) = self.image_size;
        if w == 0 || h == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        let expected_branches = match self.variant {
            Variant::M1 | Variant::M2Single | Variant::M2Stacked => 1,
            Variant::M3 => 2,
            Variant::M2Sequence => 3,
        };
        if self.backbones.len() != expected_branches {
            return Err(Error::invalid(format!(
                "{} needs {expected_branches} backbones, got {}",
                self.variant,
                self.backbones.len()
            )));
        }
        let inputs = self.inputs();
        let needed: Vec<usize> = match self.variant {
            Variant::M2Sequence => vec![3, 3, inputs[1].channels],
            _ => inputs.iter().map(|i| i.channels).collect(),
        };
        for (b, c) in self.backbones.iter().zip(needed) {
            if b.in_channels != c {
                return Err(Error::invalid(format!(
                    "{} backbone expects {} input channels, {} input provides {c}",
                    b.family.name(),
                    b.in_channels,
                    self.variant
                )));
            }
        }
        if self.recurrent_hidden == 0
            && matches!(
                self.variant,
                Variant::M1 | Variant::M2Sequence | Variant::M3
            )
        {
            return Err(Error::invalid("recurrent_hidden must be positive"));
        }
        for p in [self.dropout, self.fusion_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!(
                    "dropout must lie in [0, 1), got {p}"
                )));
            }
        }
        Ok(())
    }

    fn w(&self, width: usize) -> usize {
        scaled(width, self.scale)
    }

    fn dims(&self, widths: &[usize]) -> Vec<usize> {
        widths.iter().map(|w| self.w(*w)).collect()
    }
}

/// Model inputs for B samples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// One `B×T×C×H×W` tensor per image input, see [`ModelSpec::inputs`].
    pub images: Vec<Tensor>,
    /// `B×T×D` semantic features aligned with the front steps.
    pub semantic: Option<Tensor>,
    /// `B×2` normalized (angle, speed).
    pub targets: Option<Tensor>,
    pub zone_tags: Vec<BTreeSet<String>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.first().map_or(0, |t| t.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub angle_norm: Vec<f64>,
    pub speed_norm: Vec<f64>,
    pub angle_deg: Option<Vec<f64>>,
    pub speed_kmh: Option<Vec<f64>>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.angle_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angle_norm.is_empty()
    }

    pub fn attach_stats(&mut self, stats: &NormStats) {
        let (a, s): (Vec<f64>, Vec<f64>) = self
            .angle_norm
            .iter()
            .zip(&self.speed_norm)
            .map(|(a, s)| stats.denormalize_targets(*a, *s))
            .unzip();
        self.angle_deg = Some(a);
        self.speed_kmh = Some(s);
    }
}

#[derive(Clone, Debug)]
enum Net {
    M1 {
        front: Backbone,
        sem: Option<Mlp>,
        lstm: Lstm,
    },
    M2 {
        trunk: Backbone,
    },
    M2Sequence {
        res: Backbone,
        dense: Backbone,
        trunk: Backbone,
        fusion: Mlp,
        gru: BiGru,
    },
    M3 {
        front: Backbone,
        lstm: Lstm,
        map: Backbone,
        sem: Option<Mlp>,
    },
}

/// A built network: its spec, parameters and layer wiring.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    net: Net,
    angle: Head,
    speed: Head,
}

fn build_backbone(
    bd: &mut Builder,
    name: &str,
    spec: &BackboneSpec,
    model: &ModelSpec,
) -> Result<Backbone> {
    let (w, h) = model.image_size;
    let have_weights = spec.pretrained && backbone_weights_available(spec.family);
    if spec.pretrained && !have_weights {
        log::warn!(
            "pretrained {} weights not found (set {PRETRAINED_ENV}); using random initialisation",
            spec.family.name()
        );
    }
    if !have_weights {
        let plain = BackboneSpec {
            pretrained: false,
            ..spec.clone()
        };
        return Backbone::new(bd, name, &plain, model.scale, (h, w));
    }
    let rgb = BackboneSpec {
        in_channels: 3,
        ..spec.clone()
    };
    let mut b = Backbone::new(bd, name, &rgb, model.scale, (h, w))?;
    b.load_pretrained(bd.store, name)?;
    adapt_first_layer(&mut b, bd.store, spec.in_channels)?;
    Ok(b)
}

fn backbone_weights_available(family: BackboneFamily) -> bool {
    std::env::var_os(PRETRAINED_ENV)
        .map(|d| {
            std::path::Path::new(&d)
                .join(format!("{}.safetensors", family.name()))
                .is_file()
        })
        .unwrap_or(false)
}

/// Builds the variant graph with parameters drawn from a seeded generator.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bd = Builder::new(&mut store, &mut rng);
    let sem_in = spec.semantic_dim;
    let (net, head_in) = match spec.variant {
        Variant::M1 => {
            let front = build_backbone(&mut bd, "front", &spec.backbones[0], spec)?;
            let sem = (sem_in > 0).then(|| {
                Mlp::new(
                    &mut bd,
                    "semantic",
                    sem_in,
                    &spec.dims(&spec.semantic_hidden),
                    0.0,
                )
            });
            let sem_out = sem.as_ref().map_or(0, |m| m.out_dim(sem_in));
            let hidden = spec.w(spec.recurrent_hidden);
            let lstm = Lstm::new(&mut bd, "lstm", front.feature_dim + sem_out, hidden);
            (Net::M1 { front, sem, lstm }, hidden + sem_out)
        }
        Variant::M2Single | Variant::M2Stacked => {
            let trunk = build_backbone(&mut bd, "trunk", &spec.backbones[0], spec)?;
            let d = trunk.feature_dim;
            (Net::M2 { trunk }, d)
        }
        Variant::M2Sequence => {
            let res = build_backbone(&mut bd, "residual", &spec.backbones[0], spec)?;
            let dense = build_backbone(&mut bd, "dense", &spec.backbones[1], spec)?;
            let trunk = build_backbone(&mut bd, "trunk", &spec.backbones[2], spec)?;
            let cat = res.feature_dim + dense.feature_dim + trunk.feature_dim;
            let fusion = Mlp::new(
                &mut bd,
                "fusion",
                cat,
                &spec.dims(&spec.fusion_dims),
                spec.fusion_dropout,
            );
            let z = fusion.out_dim(cat);
            let hidden = spec.w(spec.recurrent_hidden);
            let gru = BiGru::new(&mut bd, "gru", z, hidden, spec.recurrent_layers.max(1));
            (
                Net::M2Sequence {
                    res,
                    dense,
                    trunk,
                    fusion,
                    gru,
                },
                2 * hidden + z,
            )
        }
        Variant::M3 => {
            let front = build_backbone(&mut bd, "front", &spec.backbones[0], spec)?;
            let hidden = spec.w(spec.recurrent_hidden);
            let lstm = Lstm::new(&mut bd, "lstm", front.feature_dim, hidden);
            let map = build_backbone(&mut bd, "map", &spec.backbones[1], spec)?;
            let sem = (sem_in > 0).then(|| {
                Mlp::new(
                    &mut bd,
                    "semantic",
                    sem_in,
                    &spec.dims(&spec.semantic_hidden),
                    0.0,
                )
            });
            let sem_out = sem.as_ref().map_or(0, |m| m.out_dim(sem_in));
            let d = hidden + map.feature_dim + sem_out;
            (
                Net::M3 {
                    front,
                    lstm,
                    map,
                    sem,
                },
                d,
            )
        }
    };
    let dec = spec.dims(&spec.decoder_dims);
    let angle = Head::new(
        &mut bd,
        "angle_head",
        head_in,
        &dec,
        spec.head_batch_norm,
        spec.dropout,
    );
    let speed = Head::new(
        &mut bd,
        "speed_head",
        head_in,
        &dec,
        spec.head_batch_norm,
        spec.dropout,
    );
    Ok(Model {
        spec: spec.clone(),
        store,
        net,
        angle,
        speed,
    })
}

/// Runs a backbone over every step of a `B×T×C×H×W` input; returns T
/// tensors of `B×F`.
fn per_step(cx: &mut Ctx, backbone: &Backbone, input: &Tensor) -> Result<Vec<Var>> {
    let sh = input.shape();
    let (b, t) = (sh[0], sh[1]);
    let flat = input
        .view()
        .into_shape_with_order(ndarray::IxDyn(&[b * t, sh[2], sh[3], sh[4]]))
        .map_err(|e| Error::shape("image input", "contiguous B×T×C×H×W", e.to_string()))?
        .to_owned();
    let x = cx.g.input(flat);
    let f = backbone.forward(cx, x)?;
    let d = backbone.feature_dim;
    if t == 1 {
        return Ok(vec![f]);
    }
    let wide = cx.g.reshape(f, &[b, t * d])?;
    (0..t)
        .map(|k| cx.g.slice(wide, 1, k * d, (k + 1) * d))
        .collect()
}

fn semantic_step(semantic: &Tensor, step: usize) -> Tensor {
    semantic.slice(s![.., step, ..]).to_owned().into_dyn()
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn check_batch(&self, batch: &Batch) -> Result<usize> {
        let inputs = self.spec.inputs();
        if batch.images.len() != inputs.len() {
            return Err(Error::shape(
                format!("{} image inputs", self.spec.variant),
                inputs.iter().map(|i| i.name).collect::<Vec<_>>(),
                batch.images.len(),
            ));
        }
        let n = batch.len();
        let (w, h) = self.spec.image_size;
        for (spec, t) in inputs.iter().zip(&batch.images) {
            let expected = [n, spec.steps, spec.channels, h, w];
            if t.shape() != expected {
                return Err(Error::shape(
                    format!("{} branch '{}'", self.spec.variant, spec.name),
                    expected,
                    t.shape(),
                ));
            }
        }
        match (&batch.semantic, self.spec.semantic_dim) {
            (_, 0) => {}
            (Some(sem), d) => {
                let steps = inputs[0].steps;
                if sem.shape() != [n, steps, d] {
                    return Err(Error::shape("semantic input", [n, steps, d], sem.shape()));
                }
            }
            (None, d) => return Err(Error::shape("semantic input", format!("B×T×{d}"), "absent")),
        }
        if let Some(t) = &batch.targets {
            if t.shape() != [n, 2] {
                return Err(Error::shape("targets", [n, 2], t.shape()));
            }
        }
        Ok(n)
    }

    /// Records the forward pass on `cx` and returns the `B×1` angle and
    /// speed outputs.
    pub fn forward_graph(&self, cx: &mut Ctx, batch: &Batch) -> Result<(Var, Var)> {
        self.check_batch(batch)?;
        let fused = match &self.net {
            Net::M1 { front, sem, lstm } => {
                let feats = per_step(cx, front, &batch.images[0])?;
                let mut steps = Vec::with_capacity(feats.len());
                let mut current = None;
                for (k, f) in feats.into_iter().enumerate() {
                    match (sem, &batch.semantic) {
                        (Some(mlp), Some(s)) => {
                            let x = cx.g.input(semantic_step(s, k));
                            let e = mlp.forward(cx, x)?;
                            current = Some(e);
                            steps.push(cx.g.concat(&[f, e], 1)?);
                        }
                        _ => steps.push(f),
                    }
                }
                let h = lstm.forward(cx, &steps)?;
                match current {
                    Some(e) => cx.g.concat(&[h, e], 1)?,
                    None => h,
                }
            }
            Net::M2 { trunk } => per_step(cx, trunk, &batch.images[0])?.remove(0),
            Net::M2Sequence {
                res,
                dense,
                trunk,
                fusion,
                gru,
            } => {
                let r = per_step(cx, res, &batch.images[0])?;
                let d = per_step(cx, dense, &batch.images[0])?;
                let t = per_step(cx, trunk, &batch.images[1])?;
                let mut z = Vec::with_capacity(r.len());
                for k in 0..r.len() {
                    let cat = cx.g.concat(&[r[k], d[k], t[k]], 1)?;
                    z.push(fusion.forward(cx, cat)?);
                }
                let out = gru.forward(cx, &z)?;
                cx.g.concat(&[*out.last().unwrap(), *z.last().unwrap()], 1)?
            }
            Net::M3 {
                front,
                lstm,
                map,
                sem,
            } => {
                let feats = per_step(cx, front, &batch.images[0])?;
                let h = lstm.forward(cx, &feats)?;
                let m = per_step(cx, map, &batch.images[1])?.remove(0);
                let mut parts = vec![h, m];
                if let (Some(mlp), Some(s)) = (sem, &batch.semantic) {
                    let last = s.shape()[1] - 1;
                    let x = cx.g.input(semantic_step(s, last));
                    parts.push(mlp.forward(cx, x)?);
                }
                cx.g.concat(&parts, 1)?
            }
        };
        let a = self.angle.forward(cx, fused)?;
        let v = self.speed.forward(cx, fused)?;
        Ok((a, v))
    }

    /// Evaluation-mode prediction (dropout off, running batch statistics).
    pub fn forward(&self, batch: &Batch) -> Result<Prediction> {
        let mut g = Graph::new(&self.store);
        let mut cx = Ctx::eval(&mut g);
        let (a, v) = self.forward_graph(&mut cx, batch)?;
        Ok(Prediction {
            angle_norm: g.value(a).iter().copied().collect(),
            speed_norm: g.value(v).iter().copied().collect(),
            angle_deg: None,
            speed_kmh: None,
        })
    }

    /// Sets the final layer of both heads to zero.
    pub fn zero_output_layers(&mut self) {
        for head in [&self.angle, &self.speed] {
            self.store.value_mut(head.out.w).fill(0.0);
            self.store.value_mut(head.out.b).fill(0.0);
        }
    }
}

/// Sum of the mean squared angle error and the mean squared speed error on
/// the tape; `pred_*` are `B×1`, `targets` is `B×2`.
pub fn loss_graph(g: &mut Graph, angle: Var, speed: Var, targets: &Tensor) -> Result<Var> {
    let n = targets.shape()[0];
    let ta = g.input(targets.slice(s![.., 0..1]).to_owned().into_dyn());
    let ts = g.input(targets.slice(s![.., 1..2]).to_owned().into_dyn());
    if g.shape(angle) != [n, 1] || g.shape(speed) != [n, 1] {
        return Err(Error::shape("loss", [n, 1], g.shape(angle)));
    }
    let da = g.sub(angle, ta)?;
    let ds = g.sub(speed, ts)?;
    let sa = g.mul(da, da)?;
    let ss = g.mul(ds, ds)?;
    let ma = g.mean(sa);
    let ms = g.mean(ss);
    g.add(ma, ms)
}

/// Convenience for row-major `B×T×...` construction.
pub fn stack_axis0(rows: &[Tensor]) -> Result<Tensor> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::shape("batch stacking", "equal sample shapes", e.to_string()))
}
