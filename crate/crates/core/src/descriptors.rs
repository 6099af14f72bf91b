//! CNN and FPGA platform descriptors.
//!
//! A [`CnnModel`] is an ordered list of convolution layers. Everything the
//! cost model needs (weights, IFM/OFM sizes, MACs, live residual copies) is
//! derived from the layer geometry here, once, at load time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Standard,
    Depthwise,
    Pointwise,
}

/// The six-loop iteration space of a convolution (no batching).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LoopNest {
    pub filters: u64,
    pub out_h: u64,
    pub out_w: u64,
    /// Input channels reduced per output element; 1 for depthwise.
    pub reduction: u64,
    pub kernel_h: u64,
    pub kernel_w: u64,
}

impl LoopNest {
    pub fn macs(&self) -> u64 {
        self.filters * self.out_h * self.out_w * self.reduction * self.kernel_h * self.kernel_w
    }

    /// Same nest restricted to `rows` output rows.
    pub fn with_rows(&self, rows: u64) -> LoopNest {
        LoopNest { out_h: rows, ..*self }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    /// 1-based position in topological order.
    pub index: usize,
    pub kind: LayerKind,
    pub num_filters: u64,
    pub kernel_h: u64,
    pub kernel_w: u64,
    pub in_channels: u64,
    pub ifm_h: u64,
    pub ifm_w: u64,
    pub ofm_h: u64,
    pub ofm_w: u64,
    pub stride: u64,
    pub residual_sources: Vec<usize>,
    pub word_bytes: u64,
    /// OFM dims were given explicitly and differ from same-padding dims.
    pub ofm_override: bool,
}

impl ConvLayer {
    pub fn reduction_depth(&self) -> u64 {
        match self.kind {
            LayerKind::Depthwise => 1,
            _ => self.in_channels,
        }
    }

    pub fn loop_nest(&self) -> LoopNest {
        LoopNest {
            filters: self.num_filters,
            out_h: self.ofm_h,
            out_w: self.ofm_w,
            reduction: self.reduction_depth(),
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
        }
    }

    pub fn macs(&self) -> u64 {
        self.loop_nest().macs()
    }

    pub fn weight_count(&self) -> u64 {
        self.num_filters * self.kernel_h * self.kernel_w * self.reduction_depth()
    }

    pub fn weights_bytes(&self) -> u64 {
        self.weight_count() * self.word_bytes
    }

    pub fn ifms_bytes(&self) -> u64 {
        self.ifm_h * self.ifm_w * self.in_channels * self.word_bytes
    }

    pub fn ofms_bytes(&self) -> u64 {
        self.ofm_h * self.ofm_w * self.num_filters * self.word_bytes
    }

    /// Weights of one concurrently processed batch of `filter_factor` filters.
    pub fn weights_tile_bytes(&self, filter_factor: u64) -> u64 {
        filter_factor.min(self.num_filters) * self.kernel_h * self.kernel_w * self.reduction_depth() * self.word_bytes
    }

    /// One OFM row across all filters.
    pub fn ofm_row_bytes(&self) -> u64 {
        self.ofm_w * self.num_filters * self.word_bytes
    }

    /// Input rows needed to produce one output row.
    pub fn ifm_band_bytes(&self) -> u64 {
        self.kernel_h.min(self.ifm_h) * self.ifm_w * self.in_channels * self.word_bytes
    }
}

pub fn layer_macs(layer: &ConvLayer) -> u64 {
    layer.macs()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CnnModel {
    pub name: String,
    pub word_bytes: u64,
    pub layers: Vec<ConvLayer>,
    live_copy_bytes: Vec<u64>,
    live_sources: Vec<Vec<usize>>,
    last_use: Vec<usize>,
    consumers: Vec<Vec<usize>>,
}

impl CnnModel {
    pub fn new(name: impl Into<String>, word_bytes: u64, layers: Vec<ConvLayer>) -> Result<Self> {
        if word_bytes == 0 {
            return Err(Error::Malformed("non-positive word_bytes".into()));
        }
        if layers.is_empty() {
            return Err(Error::EmptyModel);
        }
        for (pos, layer) in layers.iter().enumerate() {
            validate_layer(pos + 1, layer)?;
        }
        let n = layers.len();
        let mut last_use = vec![0usize; n + 1];
        let mut consumers = vec![Vec::new(); n + 1];
        for l in &layers {
            for &s in &l.residual_sources {
                last_use[s] = last_use[s].max(l.index);
                consumers[s].push(l.index);
            }
        }
        let mut live_sources = vec![Vec::new(); n + 1];
        for (s, &last) in last_use.iter().enumerate().skip(1) {
            for live in live_sources.iter_mut().take(last + 1).skip(s + 1) {
                live.push(s);
            }
        }
        let live_copy_bytes = (1..=n)
            .map(|i| live_sources[i].iter().map(|&s| layers[s - 1].ofms_bytes()).sum())
            .collect();
        Ok(CnnModel {
            name: name.into(),
            word_bytes,
            layers,
            live_copy_bytes,
            live_sources,
            last_use,
            consumers,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: CnnFile = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        file.into_model()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer by 1-based index.
    pub fn layer(&self, index: usize) -> &ConvLayer {
        &self.layers[index - 1]
    }

    /// Bytes of residual OFM copies that must stay live while `index` runs.
    pub fn live_copy_bytes(&self, index: usize) -> u64 {
        self.live_copy_bytes[index - 1]
    }

    /// Earlier layers whose OFMs must be kept while `index` runs.
    pub fn live_sources(&self, index: usize) -> &[usize] {
        &self.live_sources[index]
    }

    /// Layers that read the OFMs of `source` through a residual link.
    pub fn residual_consumers(&self, source: usize) -> &[usize] {
        &self.consumers[source]
    }

    /// Bytes of all OFMs produced before layer `index` that are still
    /// needed from `index` on: the previous layer's output plus live copies.
    pub fn crossing_bytes(&self, index: usize) -> u64 {
        let prev = self.layer(index - 1).ofms_bytes();
        let prev_live = self.last_use[index - 1] >= index;
        prev + self.live_copy_bytes(index) - if prev_live { prev } else { 0 }
    }

    /// IFMs + OFMs + live residual copies of a layer.
    pub fn fms_bytes(&self, index: usize) -> u64 {
        let l = self.layer(index);
        l.ifms_bytes() + l.ofms_bytes() + self.live_copy_bytes(index)
    }

    pub fn total_weights(&self) -> u64 {
        self.layers.iter().map(ConvLayer::weight_count).sum()
    }

    pub fn total_weight_bytes(&self) -> u64 {
        self.layers.iter().map(ConvLayer::weights_bytes).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(ConvLayer::macs).sum()
    }

    /// Layers whose OFM dims were given explicitly and disagree with
    /// same-padding.
    pub fn ofm_overrides(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.ofm_override).map(|l| l.index).collect()
    }

    pub fn to_descriptor(&self) -> CnnFile {
        CnnFile {
            name: self.name.clone(),
            word_bytes: self.word_bytes as i64,
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    index: l.index as i64,
                    kind: l.kind,
                    filters: l.num_filters as i64,
                    kernel: [l.kernel_h as i64, l.kernel_w as i64],
                    in_channels: l.in_channels as i64,
                    ifm: [l.ifm_h as i64, l.ifm_w as i64],
                    stride: l.stride as i64,
                    residual_sources: l.residual_sources.iter().map(|&s| s as i64).collect(),
                    ofm: l.ofm_override.then_some([l.ofm_h as i64, l.ofm_w as i64]),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_descriptor()).expect("descriptor serializes")
    }
}

fn validate_layer(position: usize, l: &ConvLayer) -> Result<()> {
    if l.index != position {
        return Err(Error::layer(
            position,
            format!("index {} breaks contiguous numbering", l.index),
        ));
    }
    for (name, v) in [
        ("filters", l.num_filters),
        ("kernel_h", l.kernel_h),
        ("kernel_w", l.kernel_w),
        ("in_channels", l.in_channels),
        ("ifm_h", l.ifm_h),
        ("ifm_w", l.ifm_w),
        ("ofm_h", l.ofm_h),
        ("ofm_w", l.ofm_w),
        ("stride", l.stride),
        ("word_bytes", l.word_bytes),
    ] {
        if v == 0 {
            return Err(Error::layer(position, format!("non-positive {name}")));
        }
    }
    match l.kind {
        LayerKind::Pointwise if l.kernel_h != 1 || l.kernel_w != 1 => {
            return Err(Error::layer(position, "pointwise layer must have a 1x1 kernel"));
        }
        LayerKind::Depthwise if l.num_filters != l.in_channels => {
            return Err(Error::layer(
                position,
                "depthwise layer must have filters == in_channels",
            ));
        }
        _ => {}
    }
    for &src in &l.residual_sources {
        if src == 0 || src >= position {
            return Err(Error::layer(position, format!("dangling residual reference {src}")));
        }
    }
    Ok(())
}

/// On-disk CNN descriptor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CnnFile {
    pub name: String,
    #[serde(default = "one")]
    pub word_bytes: i64,
    pub layers: Vec<LayerFile>,
}

fn one() -> i64 {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerFile {
    pub index: i64,
    pub kind: LayerKind,
    pub filters: i64,
    pub kernel: [i64; 2],
    pub in_channels: i64,
    pub ifm: [i64; 2],
    pub stride: i64,
    #[serde(default)]
    pub residual_sources: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ofm: Option<[i64; 2]>,
}

impl CnnFile {
    pub fn into_model(self) -> Result<CnnModel> {
        if self.word_bytes <= 0 {
            return Err(Error::Malformed("non-positive word_bytes".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::EmptyModel);
        }
        let word_bytes = self.word_bytes as u64;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (pos, lf) in self.layers.into_iter().enumerate() {
            let position = pos + 1;
            let positive = |name: &str, v: i64| -> Result<u64> {
                if v <= 0 {
                    Err(Error::layer(position, format!("non-positive {name}")))
                } else {
                    Ok(v as u64)
                }
            };
            let stride = positive("stride", lf.stride)?;
            let ifm_h = positive("ifm height", lf.ifm[0])?;
            let ifm_w = positive("ifm width", lf.ifm[1])?;
            let same_h = ifm_h.div_ceil(stride);
            let same_w = ifm_w.div_ceil(stride);
            let (ofm_h, ofm_w) = match lf.ofm {
                Some([h, w]) => (positive("ofm height", h)?, positive("ofm width", w)?),
                None => (same_h, same_w),
            };
            let index = if lf.index <= 0 { 0 } else { lf.index as usize };
            let mut residual_sources = Vec::with_capacity(lf.residual_sources.len());
            for s in lf.residual_sources {
                if s <= 0 {
                    return Err(Error::layer(position, format!("dangling residual reference {s}")));
                }
                residual_sources.push(s as usize);
            }
            residual_sources.sort_unstable();
            residual_sources.dedup();
            layers.push(ConvLayer {
                index,
                kind: lf.kind,
                num_filters: positive("filters", lf.filters)?,
                kernel_h: positive("kernel height", lf.kernel[0])?,
                kernel_w: positive("kernel width", lf.kernel[1])?,
                in_channels: positive("in_channels", lf.in_channels)?,
                ifm_h,
                ifm_w,
                ofm_h,
                ofm_w,
                stride,
                residual_sources,
                word_bytes,
                ofm_override: (ofm_h, ofm_w) != (same_h, same_w),
            });
        }
        CnnModel::new(self.name, word_bytes, layers)
    }
}

pub fn load_cnn(path: impl AsRef<Path>) -> Result<CnnModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    CnnModel::from_json_str(&text)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FpgaPlatform {
    pub name: String,
    /// DSP slices, one MAC per cycle each.
    pub pe_count: u64,
    pub on_chip_bytes: u64,
    /// Off-chip bandwidth in bytes per second.
    pub bandwidth: u64,
    pub clock_hz: u64,
    /// The descriptor did not state a clock, so the default was used.
    pub clock_assumed: bool,
}

pub const DEFAULT_CLOCK_HZ: u64 = 200_000_000;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlatformFile {
    pub name: Option<String>,
    pub pe_count: Option<f64>,
    pub on_chip_bytes: Option<f64>,
    pub bandwidth_bytes_per_s: Option<f64>,
    pub clock_hz: Option<f64>,
}

impl FpgaPlatform {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: PlatformFile = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        let field = |name: &str, v: Option<f64>| -> Result<u64> {
            let v = v.ok_or_else(|| Error::Platform(format!("missing field {name}")))?;
            if v.is_nan() || v < 1.0 || v.is_infinite() {
                return Err(Error::Platform(format!("non-positive {name}")));
            }
            Ok(v.round() as u64)
        };
        let name = file.name.ok_or_else(|| Error::Platform("missing field name".into()))?;
        Ok(FpgaPlatform {
            name,
            pe_count: field("pe_count", file.pe_count)?,
            on_chip_bytes: field("on_chip_bytes", file.on_chip_bytes)?,
            bandwidth: field("bandwidth", file.bandwidth_bytes_per_s)?,
            clock_assumed: file.clock_hz.is_none(),
            clock_hz: match file.clock_hz {
                Some(_) => field("clock_hz", file.clock_hz)?,
                None => DEFAULT_CLOCK_HZ,
            },
        })
    }

    pub fn with_clock(mut self, clock_hz: u64) -> Self {
        self.clock_hz = clock_hz;
        self.clock_assumed = false;
        self
    }

    pub fn with_on_chip_bytes(mut self, bytes: u64) -> Self {
        self.on_chip_bytes = bytes;
        self
    }

    pub fn to_json(&self) -> String {
        let file = serde_json::json!({
            "name": self.name,
            "pe_count": self.pe_count,
            "on_chip_bytes": self.on_chip_bytes,
            "bandwidth_bytes_per_s": self.bandwidth,
            "clock_hz": self.clock_hz,
        });
        serde_json::to_string_pretty(&file).expect("platform serializes")
    }
}

pub fn load_platform(path: impl AsRef<Path>) -> Result<FpgaPlatform> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    FpgaPlatform::from_json_str(&text)
}

/// Descriptors shipped with the crate.
pub mod bundled {
    use super::*;

    pub const CNNS: [(&str, &str); 5] = [
        ("resnet152", include_str!("../data/cnns/resnet152.json")),
        ("resnet50", include_str!("../data/cnns/resnet50.json")),
        ("xception", include_str!("../data/cnns/xception.json")),
        ("densenet121", include_str!("../data/cnns/densenet121.json")),
        ("mobilenetv2", include_str!("../data/cnns/mobilenetv2.json")),
    ];

    /// Ordered by on-chip memory.
    pub const PLATFORMS: [(&str, &str); 4] = [
        ("zc706", include_str!("../data/platforms/zc706.json")),
        ("vcu110", include_str!("../data/platforms/vcu110.json")),
        ("vcu108", include_str!("../data/platforms/vcu108.json")),
        ("zcu102", include_str!("../data/platforms/zcu102.json")),
    ];

    pub fn cnn(name: &str) -> Option<CnnModel> {
        let key = name.to_ascii_lowercase();
        CNNS.iter()
            .find(|(n, _)| *n == key)
            .map(|(_, text)| CnnModel::from_json_str(text).expect("bundled descriptor is valid"))
    }

    pub fn platform(name: &str) -> Option<FpgaPlatform> {
        let key = name.to_ascii_lowercase();
        PLATFORMS
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, text)| FpgaPlatform::from_json_str(text).expect("bundled descriptor is valid"))
    }
}
