//! Image feature extractors: a small strided CNN plus residual and densely
//! connected families with the standard block layouts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Builder, Conv, Ctx, Linear};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Var};

/// Environment variable naming a directory of `<family>.safetensors`
/// backbone weights.
pub const PRETRAINED_ENV: &str = "DRIVEFUSION_PRETRAINED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    Residual34,
    Residual50,
    Residual152,
    Dense121,
    Dense201,
    ToyConv,
}

impl BackboneFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Residual34 => "residual34",
            Self::Residual50 => "residual50",
            Self::Residual152 => "residual152",
            Self::Dense121 => "dense121",
            Self::Dense201 => "dense201",
            Self::ToyConv => "toy_conv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    pub pretrained: bool,
    pub in_channels: usize,
    /// Output feature length at scale 1.
    pub feature_dim: usize,
}

/// Width multiplier applied to every hidden size; never below one unit.
pub fn scaled(width: usize, scale: f64) -> usize {
    ((width as f64 * scale).round() as usize).max(1)
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        bd: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        bd.scoped(name, |bd| Self {
            conv: Conv::new(bd, "conv", cin, cout, k, stride, pad, false),
            bn: BatchNorm::new(bd, "bn", cout),
        })
    }

    fn forward(&self, cx: &mut Ctx, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(if relu { cx.g.relu(y) } else { y })
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    convs: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

impl ResBlock {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut y = x;
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            y = c.forward(cx, y, i < last)?;
        }
        let s = match &self.shortcut {
            Some(sc) => sc.forward(cx, x, false)?,
            None => x,
        };
        let y = cx.g.add(y, s)?;
        Ok(cx.g.relu(y))
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    bn1: BatchNorm,
    conv1: Conv,
    bn2: BatchNorm,
    conv2: Conv,
}

#[derive(Clone, Debug)]
struct Transition {
    bn: BatchNorm,
    conv: Conv,
}

#[derive(Clone, Debug)]
enum Body {
    Toy {
        blocks: Vec<ConvBn>,
        pool: bool,
    },
    Residual {
        stem: ConvBn,
        blocks: Vec<ResBlock>,
    },
    Dense {
        stem: ConvBn,
        blocks: Vec<Vec<DenseLayer>>,
        transitions: Vec<Transition>,
        final_bn: BatchNorm,
    },
}

/// A built backbone: maps N×C×H×W images to N×feature_dim features.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    body: Body,
    proj: Linear,
    pub feature_dim: usize,
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

impl Backbone {
    /// `image_hw` is needed by the small CNN, whose flattened feature map
    /// size depends on the input size.
    pub fn new(
        bd: &mut Builder,
        name: &str,
        spec: &BackboneSpec,
        scale: f64,
        image_hw: (usize, usize),
    ) -> Result<Self> {
        if spec.in_channels == 0 {
            return Err(Error::invalid("backbone needs at least one input channel"));
        }
        let feature_dim = scaled(spec.feature_dim, scale);
        bd.scoped(name, |bd| {
            let (body, flat) = match spec.family {
                BackboneFamily::ToyConv => build_toy(bd, spec.in_channels, scale, image_hw),
                BackboneFamily::Residual34 => {
                    build_residual(bd, spec.in_channels, scale, &[3, 4, 6, 3], false)
                }
                BackboneFamily::Residual50 => {
                    build_residual(bd, spec.in_channels, scale, &[3, 4, 6, 3], true)
                }
                BackboneFamily::Residual152 => {
                    build_residual(bd, spec.in_channels, scale, &[3, 8, 36, 3], true)
                }
                BackboneFamily::Dense121 => {
                    build_dense(bd, spec.in_channels, scale, &[6, 12, 24, 16])
                }
                BackboneFamily::Dense201 => {
                    build_dense(bd, spec.in_channels, scale, &[6, 12, 48, 32])
                }
            };
            let proj = Linear::new(bd, "proj", flat, feature_dim);
            Ok(Self {
                spec: spec.clone(),
                body,
                proj,
                feature_dim,
            })
        })
    }

    pub fn first_conv(&self) -> &Conv {
        match &self.body {
            Body::Toy { blocks, .. } => &blocks[0].conv,
            Body::Residual { stem, .. } | Body::Dense { stem, .. } => &stem.conv,
        }
    }

    fn first_conv_mut(&mut self) -> &mut Conv {
        match &mut self.body {
            Body::Toy { blocks, .. } => &mut blocks[0].conv,
            Body::Residual { stem, .. } | Body::Dense { stem, .. } => &mut stem.conv,
        }
    }

    /// Output of the first convolution alone (before normalisation).
    pub fn first_layer(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        self.first_conv().forward(cx, x)
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = cx.g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::shape(
                format!("{} backbone input", self.spec.family.name()),
                format!("N×{}×H×W", self.spec.in_channels),
                shape,
            ));
        }
        let feat = match &self.body {
            Body::Toy { blocks, pool } => {
                let mut y = x;
                for b in blocks {
                    y = b.forward(cx, y, true)?;
                }
                if *pool {
                    y = cx.g.avg_pool2d(y, 2, 2)?;
                }
                let n = cx.g.shape(y)[0];
                let flat: usize = cx.g.shape(y)[1..].iter().product();
                cx.g.reshape(y, &[n, flat])?
            }
            Body::Residual { stem, blocks } => {
                let mut y = stem.forward(cx, x, true)?;
                y = cx.g.max_pool2d(y, 3, 2, 1)?;
                for b in blocks {
                    y = b.forward(cx, y)?;
                }
                cx.g.global_avg_pool(y)?
            }
            Body::Dense {
                stem,
                blocks,
                transitions,
                final_bn,
            } => {
                let mut y = stem.forward(cx, x, true)?;
                y = cx.g.max_pool2d(y, 3, 2, 1)?;
                for (i, block) in blocks.iter().enumerate() {
                    for layer in block {
                        let h = layer.bn1.forward(cx, y)?;
                        let h = cx.g.relu(h);
                        let h = layer.conv1.forward(cx, h)?;
                        let h = layer.bn2.forward(cx, h)?;
                        let h = cx.g.relu(h);
                        let h = layer.conv2.forward(cx, h)?;
                        y = cx.g.concat(&[y, h], 1)?;
                    }
                    if let Some(t) = transitions.get(i) {
                        let h = t.bn.forward(cx, y)?;
                        let h = cx.g.relu(h);
                        y = t.conv.forward(cx, h)?;
                        let s = cx.g.shape(y);
                        if s[2] >= 2 && s[3] >= 2 {
                            y = cx.g.avg_pool2d(y, 2, 2)?;
                        }
                    }
                }
                let y = final_bn.forward(cx, y)?;
                let y = cx.g.relu(y);
                cx.g.global_avg_pool(y)?
            }
        };
        let out = self.proj.forward(cx, feat)?;
        Ok(cx.g.relu(out))
    }

    /// Loads `<dir>/<family>.safetensors` when pretrained weights are
    /// requested. Tensor names are relative to the backbone scope. Returns
    /// whether weights were loaded.
    pub fn load_pretrained(&mut self, store: &mut ParamStore, scope: &str) -> Result<bool> {
        if !self.spec.pretrained {
            return Ok(false);
        }
        let Some(path) = pretrained_path(self.spec.family) else {
            log::warn!(
                "no pretrained weights for {} (set {PRETRAINED_ENV}); using random initialisation",
                self.spec.family.name()
            );
            return Ok(false);
        };
        self.load_weights(store, scope, &path)?;
        Ok(true)
    }

    /// Copies matching tensors of a weight file into this backbone. A first
    /// convolution stored with fewer input channels fills the leading ones
    /// and leaves the rest at zero.
    pub fn load_weights(&mut self, store: &mut ParamStore, scope: &str, path: &Path) -> Result<()> {
        let tensors = super::checkpoint::read_tensors(path)?;
        let prefix = format!("{scope}.");
        let first_w = self.first_conv().w;
        for (id, entry) in store
            .iter()
            .map(|(id, e)| (id, e.name.clone()))
            .collect::<Vec<_>>()
        {
            let Some(local) = entry.strip_prefix(&prefix) else {
                continue;
            };
            let Some((_, value)) = tensors.iter().find(|(n, _)| n == local) else {
                continue;
            };
            let target = store.value(id).shape().to_vec();
            if value.shape() == target.as_slice() {
                *store.value_mut(id) = value.clone();
            } else if id == first_w && value.shape()[1] <= target[1] {
                // stored kernels cover only the leading input channels
                let in_ch = self.spec.in_channels;
                let conv = self.first_conv_mut();
                conv.in_ch = value.shape()[1];
                *store.value_mut(id) = value.clone();
                adapt_first_layer(self, store, in_ch)?;
            } else {
                return Err(Error::Load {
                    path: path.to_path_buf(),
                    reason: format!(
                        "tensor {local}: shape {:?}, model expects {target:?}",
                        value.shape()
                    ),
                });
            }
        }
        Ok(())
    }
}

fn pretrained_path(family: BackboneFamily) -> Option<PathBuf> {
    let dir = std::env::var_os(PRETRAINED_ENV)?;
    let p = PathBuf::from(dir).join(format!("{}.safetensors", family.name()));
    p.is_file().then_some(p)
}

/// Widens the first convolution to `in_channels` inputs. Existing kernels
/// keep their channels and the added ones start at zero, so inputs whose
/// extra channels are zero give exactly the original activations.
pub fn adapt_first_layer(
    backbone: &mut Backbone,
    store: &mut ParamStore,
    in_channels: usize,
) -> Result<()> {
    if in_channels < 3 {
        return Err(Error::invalid(format!(
            "in_channels must be at least 3, got {in_channels}"
        )));
    }
    let conv = backbone.first_conv_mut();
    if conv.in_ch == in_channels {
        backbone.spec.in_channels = in_channels;
        return Ok(());
    }
    let old = store.value(conv.w).clone();
    let (o, c, k) = (old.shape()[0], old.shape()[1], old.shape()[2]);
    let keep = c.min(in_channels);
    let mut w = crate::tensor::params::zeros(&[o, in_channels, k, k]);
    w.slice_each_axis_mut(|ax| match ax.axis.index() {
        1 => ndarray::Slice::from(0..keep),
        _ => ndarray::Slice::from(..),
    })
    .assign(&old.slice_each_axis(|ax| match ax.axis.index() {
        1 => ndarray::Slice::from(0..keep),
        _ => ndarray::Slice::from(..),
    }));
    *store.value_mut(conv.w) = w;
    conv.in_ch = in_channels;
    backbone.spec.in_channels = in_channels;
    Ok(())
}

fn build_toy(bd: &mut Builder, cin: usize, scale: f64, (h, w): (usize, usize)) -> (Body, usize) {
    let widths = [32, 64, 64, 128].map(|c| scaled(c, scale));
    let mut c = cin;
    let (mut hh, mut ww) = (h, w);
    let blocks = widths
        .iter()
        .enumerate()
        .map(|(i, &cout)| {
            let b = ConvBn::new(bd, &format!("block{i}"), c, cout, 3, 2, 1);
            c = cout;
            hh = conv_out(hh, 3, 2, 1);
            ww = conv_out(ww, 3, 2, 1);
            b
        })
        .collect();
    let pool = hh >= 2 && ww >= 2;
    if pool {
        hh = conv_out(hh, 2, 2, 0);
        ww = conv_out(ww, 2, 2, 0);
    }
    (Body::Toy { blocks, pool }, c * hh * ww)
}

fn build_residual(
    bd: &mut Builder,
    cin: usize,
    scale: f64,
    layout: &[usize],
    bottleneck: bool,
) -> (Body, usize) {
    let base = scaled(64, scale);
    let stem = ConvBn::new(bd, "stem", cin, base, 7, 2, 3);
    let expansion = if bottleneck { 4 } else { 1 };
    let mut c = base;
    let mut blocks = Vec::new();
    for (stage, &n) in layout.iter().enumerate() {
        let width = scaled(64 << stage, scale);
        for i in 0..n {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let out = width * expansion;
            let name = format!("stage{stage}.block{i}");
            let block = bd.scoped(&name, |bd| {
                let convs = if bottleneck {
                    vec![
                        ConvBn::new(bd, "a", c, width, 1, 1, 0),
                        ConvBn::new(bd, "b", width, width, 3, stride, 1),
                        ConvBn::new(bd, "c", width, out, 1, 1, 0),
                    ]
                } else {
                    vec![
                        ConvBn::new(bd, "a", c, width, 3, stride, 1),
                        ConvBn::new(bd, "b", width, width, 3, 1, 1),
                    ]
                };
                let shortcut = (stride != 1 || c != out)
                    .then(|| ConvBn::new(bd, "down", c, out, 1, stride, 0));
                ResBlock { convs, shortcut }
            });
            blocks.push(block);
            c = out;
        }
    }
    (Body::Residual { stem, blocks }, c)
}

fn build_dense(bd: &mut Builder, cin: usize, scale: f64, layout: &[usize]) -> (Body, usize) {
    let growth = scaled(32, scale);
    let init = scaled(64, scale);
    let stem = ConvBn::new(bd, "stem", cin, init, 7, 2, 3);
    let mut c = init;
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    for (bi, &n) in layout.iter().enumerate() {
        let layers = (0..n)
            .map(|li| {
                bd.scoped(&format!("dense{bi}.layer{li}"), |bd| {
                    let l = DenseLayer {
                        bn1: BatchNorm::new(bd, "bn1", c),
                        conv1: Conv::new(bd, "conv1", c, 4 * growth, 1, 1, 0, false),
                        bn2: BatchNorm::new(bd, "bn2", 4 * growth),
                        conv2: Conv::new(bd, "conv2", 4 * growth, growth, 3, 1, 1, false),
                    };
                    c += growth;
                    l
                })
            })
            .collect();
        blocks.push(layers);
        if bi + 1 < layout.len() {
            let out = (c / 2).max(1);
            transitions.push(bd.scoped(&format!("transition{bi}"), |bd| Transition {
                bn: BatchNorm::new(bd, "bn", c),
                conv: Conv::new(bd, "conv", c, out, 1, 1, 0, false),
            }));
            c = out;
        }
    }
    let final_bn = BatchNorm::new(bd, "final_bn", c);
    (
        Body::Dense {
            stem,
            blocks,
            transitions,
            final_bn,
        },
        c,
    )
}
