//! Network container (ordered conv layers + activation tags), FLOPs and
//! speed-up accounting, and the on-disk container format.
//!
//! The container is a human-readable JSON manifest next to one raw buffer
//! file of little-endian IEEE-754 f32 values. The manifest records layer
//! structure, element offsets into the buffer, a format version and the
//! CRC-32 of the buffer file. Writes are atomic (temp file + rename), loads
//! verify length and checksum before constructing anything.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::convcore::{
    conv2d_reference, fold_separable, out_extent, separable_forward, RegularConvLayer,
    SeparableConvLayer, Tensor4, TensorRole,
};
use crate::error::{DwdError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            other => Err(DwdError::Format(format!("unknown activation '{other}'"))),
        }
    }

    fn apply(self, t: &mut Tensor4) {
        if self == Activation::Relu {
            for v in t.data_mut() {
                *v = v.max(0.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Regular(RegularConvLayer),
    Separable(SeparableConvLayer),
}

impl Layer {
    pub fn in_channels(&self) -> usize {
        match self {
            Layer::Regular(l) => l.in_channels(),
            Layer::Separable(l) => l.channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Layer::Regular(l) => l.out_channels(),
            Layer::Separable(l) => l.out_channels,
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        match self {
            Layer::Regular(l) => l.kernel(),
            Layer::Separable(l) => (l.kh, l.kw),
        }
    }

    pub fn stride(&self) -> (usize, usize) {
        match self {
            Layer::Regular(l) => l.stride,
            Layer::Separable(l) => l.stride,
        }
    }

    pub fn padding(&self) -> (usize, usize) {
        match self {
            Layer::Regular(l) => l.padding,
            Layer::Separable(l) => l.padding,
        }
    }

    pub fn is_separable(&self) -> bool {
        matches!(self, Layer::Separable(_))
    }

    /// Multiplies per output position: n·c·kh·kw for a regular layer,
    /// c·kh·kw + n·c for a separable pair.
    pub fn flops_per_position(&self) -> u64 {
        let c = self.in_channels() as u64;
        let n = self.out_channels() as u64;
        let (kh, kw) = self.kernel();
        let kk = (kh * kw) as u64;
        match self {
            Layer::Regular(_) => n * c * kk,
            Layer::Separable(_) => c * kk + n * c,
        }
    }
}

/// Ordered chain of conv layers, each with an activation tag applied after
/// it, plus the input signature (channels, height, width) the chain expects.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub name: String,
    pub input_signature: (usize, usize, usize),
    layers: Vec<(Layer, Activation)>,
}

impl NetworkModel {
    pub fn new(
        name: impl Into<String>,
        input_signature: (usize, usize, usize),
        layers: Vec<(Layer, Activation)>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(DwdError::Shape("model must have at least one layer".into()));
        }
        let mut channels = input_signature.0;
        for (i, (layer, _)) in layers.iter().enumerate() {
            if layer.in_channels() != channels {
                return Err(DwdError::Shape(format!(
                    "layer {i} expects {} input channels but receives {channels}",
                    layer.in_channels()
                )));
            }
            channels = layer.out_channels();
        }
        Ok(Self {
            name: name.into(),
            input_signature,
            layers,
        })
    }

    pub fn layers(&self) -> &[(Layer, Activation)] {
        &self.layers
    }

    pub fn layer(&self, id: usize) -> Result<&(Layer, Activation)> {
        self.layers
            .get(id)
            .ok_or_else(|| DwdError::Input(format!("layer id {id} out of range")))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Replace layer `id`, preserving its activation tag.
    pub(crate) fn replace_layer(&mut self, id: usize, layer: Layer) {
        self.layers[id].0 = layer;
    }

    /// Replace layer `id` by a sequence of (layer, activation) entries.
    pub(crate) fn splice_layer(&mut self, id: usize, entries: Vec<(Layer, Activation)>) {
        self.layers.splice(id..=id, entries);
    }

    fn check_signature(&self, input: &Tensor4) -> Result<()> {
        let [_, c, h, w] = input.dims();
        let (sc, sh, sw) = self.input_signature;
        if (c, h, w) != (sc, sh, sw) {
            return Err(DwdError::Shape(format!(
                "input {c}x{h}x{w} does not match model signature {sc}x{sh}x{sw}"
            )));
        }
        Ok(())
    }

    fn apply_layer(input: &Tensor4, layer: &Layer) -> Result<Tensor4> {
        match layer {
            Layer::Regular(l) => conv2d_reference(input, l),
            Layer::Separable(l) => separable_forward(input, l),
        }
    }

    /// Run all layers and activations.
    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        self.check_signature(input)?;
        let mut act = input.clone();
        for (layer, tag) in &self.layers {
            act = Self::apply_layer(&act, layer)?;
            tag.apply(&mut act);
        }
        Ok(act)
    }

    /// Activations entering layer `upto` — runs layers `0..upto` including
    /// their activation tags.
    pub fn forward_upto(&self, input: &Tensor4, upto: usize) -> Result<Tensor4> {
        if upto > self.layers.len() {
            return Err(DwdError::Input(format!("layer id {upto} out of range")));
        }
        self.check_signature(input)?;
        let mut act = input.clone();
        for (layer, tag) in &self.layers[..upto] {
            act = Self::apply_layer(&act, layer)?;
            tag.apply(&mut act);
        }
        Ok(act)
    }

    /// Spatial extents of the activations entering each layer, plus the
    /// final output extents.
    pub fn spatial_plan(&self) -> Result<Vec<(usize, usize)>> {
        let (_, mut h, mut w) = self.input_signature;
        let mut plan = Vec::with_capacity(self.layers.len() + 1);
        for (layer, _) in &self.layers {
            plan.push((h, w));
            let (kh, kw) = layer.kernel();
            let (sh, sw) = layer.stride();
            let (ph, pw) = layer.padding();
            h = out_extent(h, kh, sh, ph)?;
            w = out_extent(w, kw, sw, pw)?;
        }
        plan.push((h, w));
        Ok(plan)
    }

    /// Replace every separable layer by its exact regular equivalent.
    /// Returns the folded model and how many layers were folded.
    pub fn fold_all(&self) -> (NetworkModel, usize) {
        let mut folded = self.clone();
        let mut count = 0;
        for (layer, _) in &mut folded.layers {
            if let Layer::Separable(sep) = layer {
                *layer = Layer::Regular(fold_separable(sep));
                count += 1;
            }
        }
        (folded, count)
    }
}

// ── FLOPs accounting ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerFlops {
    pub layer_id: usize,
    pub kind: &'static str,
    pub per_position: u64,
    pub positions: u64,
    pub total: u64,
}

#[derive(Debug, Clone)]
pub struct ModelFlops {
    pub layers: Vec<LayerFlops>,
    pub total: u64,
}

#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub reference: ModelFlops,
    pub transformed: Option<ModelFlops>,
    /// reference total / transformed total.
    pub speedup: Option<f64>,
}

fn model_flops(model: &NetworkModel, signature: (usize, usize, usize)) -> Result<ModelFlops> {
    if model.input_signature.0 != signature.0 {
        return Err(DwdError::Shape(format!(
            "model expects {} input channels, signature provides {}",
            model.input_signature.0, signature.0
        )));
    }
    let (_, mut h, mut w) = signature;
    let mut layers = Vec::new();
    let mut total = 0u64;
    for (id, (layer, _)) in model.layers.iter().enumerate() {
        let (kh, kw) = layer.kernel();
        let (sh, sw) = layer.stride();
        let (ph, pw) = layer.padding();
        let ho = out_extent(h, kh, sh, ph)?;
        let wo = out_extent(w, kw, sw, pw)?;
        let per_position = layer.flops_per_position();
        let positions = (ho * wo) as u64;
        let entry = LayerFlops {
            layer_id: id,
            kind: if layer.is_separable() {
                "separable"
            } else {
                "regular"
            },
            per_position,
            positions,
            total: per_position * positions,
        };
        total += entry.total;
        layers.push(entry);
        h = ho;
        w = wo;
    }
    Ok(ModelFlops { layers, total })
}

/// Multiply counts per layer and in total for `reference`, and when `other`
/// is given, for it too along with the speed-up ratio reference/other.
pub fn flops_and_speedup(
    reference: &NetworkModel,
    other: Option<&NetworkModel>,
    signature: (usize, usize, usize),
) -> Result<FlopsReport> {
    let ref_flops = model_flops(reference, signature)?;
    let transformed = other.map(|m| model_flops(m, signature)).transpose()?;
    let speedup = transformed
        .as_ref()
        .map(|t| ref_flops.total as f64 / t.total as f64);
    Ok(FlopsReport {
        reference: ref_flops,
        transformed,
        speedup,
    })
}

// ── container primitives (shared with the patch-set format) ────────────────

/// Write `bytes` to `path` atomically: temp file in the same directory,
/// then rename over the destination.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = PathBuf::from(path);
    let file_name = path
        .file_name()
        .ok_or_else(|| DwdError::Input(format!("invalid output path {}", path.display())))?;
    tmp.set_file_name(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn buffer_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub(crate) fn crc32_hex(bytes: &[u8]) -> String {
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(bytes);
    format!("{:08x}", hasher.finalize())
}

/// Buffer file name recorded in (and resolved relative to) the manifest.
pub(crate) fn buffer_file_name(manifest_path: &Path) -> Result<String> {
    let name = manifest_path
        .file_name()
        .ok_or_else(|| DwdError::Input(format!("invalid path {}", manifest_path.display())))?;
    Ok(format!("{}.bin", name.to_string_lossy()))
}

/// Read and verify a buffer file: length first, then checksum.
pub(crate) fn read_buffer(
    manifest_path: &Path,
    buffer_file: &str,
    declared_len: u64,
    checksum: &str,
) -> Result<Vec<f32>> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(buffer_file))?;
    let actual_len = (bytes.len() / 4) as u64;
    if bytes.len() % 4 != 0 || actual_len != declared_len {
        return Err(DwdError::TruncatedBuffer {
            declared: declared_len,
            actual: actual_len,
        });
    }
    let actual_crc = crc32_hex(&bytes);
    if actual_crc != checksum {
        return Err(DwdError::ChecksumMismatch {
            expected: checksum.to_string(),
            actual: actual_crc,
        });
    }
    let mut values = Vec::with_capacity(declared_len as usize);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(values)
}

pub(crate) fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(DwdError::VersionMismatch {
            found,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

// ── model manifest ──────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct LayerManifest {
    kind: String,
    activation: String,
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    stride: [usize; 2],
    padding: [usize; 2],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    weights_offset: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    depthwise_offset: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pointwise_offset: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bias_offset: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    kind: String,
    name: String,
    input_signature: [usize; 3],
    buffer_file: String,
    buffer_len: u64,
    checksum_crc32: String,
    layers: Vec<LayerManifest>,
}

/// Persist a model: JSON manifest at `path`, raw f32 buffer next to it.
pub fn serialize_model(model: &NetworkModel, path: &Path) -> Result<()> {
    let mut buffer: Vec<f32> = Vec::new();
    let mut layers = Vec::with_capacity(model.layers.len());
    for (layer, activation) in &model.layers {
        let mut entry = LayerManifest {
            kind: String::new(),
            activation: activation.as_str().to_string(),
            out_channels: layer.out_channels(),
            in_channels: layer.in_channels(),
            kh: layer.kernel().0,
            kw: layer.kernel().1,
            stride: [layer.stride().0, layer.stride().1],
            padding: [layer.padding().0, layer.padding().1],
            weights_offset: None,
            depthwise_offset: None,
            pointwise_offset: None,
            bias_offset: None,
        };
        match layer {
            Layer::Regular(l) => {
                entry.kind = "regular".into();
                entry.weights_offset = Some(buffer.len() as u64);
                buffer.extend_from_slice(l.weights.data());
                if let Some(b) = &l.bias {
                    entry.bias_offset = Some(buffer.len() as u64);
                    buffer.extend_from_slice(b);
                }
            }
            Layer::Separable(l) => {
                entry.kind = "separable".into();
                entry.depthwise_offset = Some(buffer.len() as u64);
                buffer.extend_from_slice(&l.depthwise);
                entry.pointwise_offset = Some(buffer.len() as u64);
                buffer.extend_from_slice(&l.pointwise);
                if let Some(b) = &l.bias {
                    entry.bias_offset = Some(buffer.len() as u64);
                    buffer.extend_from_slice(b);
                }
            }
        }
        layers.push(entry);
    }

    let bytes = buffer_to_bytes(&buffer);
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        kind: "network".into(),
        name: model.name.clone(),
        input_signature: [
            model.input_signature.0,
            model.input_signature.1,
            model.input_signature.2,
        ],
        buffer_file: buffer_file_name(path)?,
        buffer_len: buffer.len() as u64,
        checksum_crc32: crc32_hex(&bytes),
        layers,
    };

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    write_atomic(&dir.join(&manifest.buffer_file), &bytes)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DwdError::Format(format!("manifest encode: {e}")))?;
    write_atomic(path, json.as_bytes())
}

fn take_slice<'a>(buffer: &'a [f32], offset: u64, len: usize, what: &str) -> Result<&'a [f32]> {
    let start = offset as usize;
    let end = start
        .checked_add(len)
        .ok_or_else(|| DwdError::Format(format!("{what}: offset overflow")))?;
    buffer
        .get(start..end)
        .ok_or_else(|| DwdError::Format(format!("{what}: range {start}..{end} outside buffer")))
}

/// Load a model container, verifying version, buffer length and checksum.
pub fn deserialize_model(path: &Path) -> Result<NetworkModel> {
    let text = fs::read_to_string(path)?;
    let manifest: ModelManifest = serde_json::from_str(&text)
        .map_err(|e| DwdError::Format(format!("manifest parse: {e}")))?;
    check_version(manifest.format_version)?;
    if manifest.kind != "network" {
        return Err(DwdError::Format(format!(
            "expected a network container, found kind '{}'",
            manifest.kind
        )));
    }
    let buffer = read_buffer(
        path,
        &manifest.buffer_file,
        manifest.buffer_len,
        &manifest.checksum_crc32,
    )?;

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, lm) in manifest.layers.iter().enumerate() {
        let activation = Activation::parse(&lm.activation)?;
        let (n, c, kh, kw) = (lm.out_channels, lm.in_channels, lm.kh, lm.kw);
        let bias = match lm.bias_offset {
            Some(off) => Some(take_slice(&buffer, off, n, "bias")?.to_vec()),
            None => None,
        };
        let layer = match lm.kind.as_str() {
            "regular" => {
                let off = lm.weights_offset.ok_or_else(|| {
                    DwdError::Format(format!("layer {i}: regular layer missing weights_offset"))
                })?;
                let data = take_slice(&buffer, off, n * c * kh * kw, "weights")?.to_vec();
                let weights = Tensor4::new(TensorRole::WeightNckk, [n, c, kh, kw], data)?;
                Layer::Regular(RegularConvLayer::new(
                    weights,
                    (lm.stride[0], lm.stride[1]),
                    (lm.padding[0], lm.padding[1]),
                    bias,
                )?)
            }
            "separable" => {
                let doff = lm.depthwise_offset.ok_or_else(|| {
                    DwdError::Format(format!(
                        "layer {i}: separable layer missing depthwise_offset"
                    ))
                })?;
                let poff = lm.pointwise_offset.ok_or_else(|| {
                    DwdError::Format(format!(
                        "layer {i}: separable layer missing pointwise_offset"
                    ))
                })?;
                let depthwise = take_slice(&buffer, doff, c * kh * kw, "depthwise")?.to_vec();
                let pointwise = take_slice(&buffer, poff, n * c, "pointwise")?.to_vec();
                Layer::Separable(SeparableConvLayer::new(
                    c,
                    n,
                    kh,
                    kw,
                    depthwise,
                    pointwise,
                    (lm.stride[0], lm.stride[1]),
                    (lm.padding[0], lm.padding[1]),
                    bias,
                )?)
            }
            other => {
                return Err(DwdError::Format(format!(
                    "layer {i}: unknown layer kind '{other}'"
                )))
            }
        };
        layers.push((layer, activation));
    }

    NetworkModel::new(
        manifest.name,
        (
            manifest.input_signature[0],
            manifest.input_signature[1],
            manifest.input_signature[2],
        ),
        layers,
    )
}
