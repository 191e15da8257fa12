//! Response-patch extraction: for a target layer, sample matched rows of
//! X (input receptive fields, taken after the preceding activation) and
//! Y (1×1 pre-activation output responses, bias excluded).
//!
//! Positions are drawn uniformly over the valid output grid, without
//! replacement per image when the grid is large enough. Every image uses an
//! independent substream of the config seed, so a patch set is a pure
//! function of (model, source, layer, config) regardless of evaluation
//! order.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::convcore::{out_extent, receptive_field_row, weights_matrix, Tensor4, TensorRole};
use crate::error::{DwdError, Result};
use crate::netmodel::{
    buffer_file_name, buffer_to_bytes, check_version, crc32_hex, read_buffer, write_atomic, Layer,
    NetworkModel, FORMAT_VERSION,
};
use crate::seed::{rng_for, tags};

#[derive(Debug, Clone, Copy)]
pub struct SamplingConfig {
    pub per_image: usize,
    pub num_images: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(per_image: usize, num_images: usize, seed: u64) -> Result<Self> {
        if per_image == 0 || num_images == 0 {
            return Err(DwdError::Input("sampling counts must be at least 1".into()));
        }
        Ok(Self {
            per_image,
            num_images,
            seed,
        })
    }
}

impl Default for SamplingConfig {
    /// 10 patches per image over 300 images.
    fn default() -> Self {
        Self {
            per_image: 10,
            num_images: 300,
            seed: 42,
        }
    }
}

/// Where sample images come from: a seeded Gaussian generator, or a
/// directory of raw little-endian f32 tensors (`*.f32`, one image per file,
/// c·H·W values, sorted by file name).
#[derive(Debug, Clone)]
pub enum ImageSource {
    Synthetic { seed: u64 },
    Directory(PathBuf),
}

impl ImageSource {
    /// Image `index` with the given (c, H, W) signature, shaped 1×c×H×W.
    pub fn image(&self, index: usize, sig: (usize, usize, usize)) -> Result<Tensor4> {
        let (c, h, w) = sig;
        match self {
            ImageSource::Synthetic { seed } => {
                let mut rng = rng_for(*seed, tags::IMAGE, index as u64);
                let data = (0..c * h * w)
                    .map(|_| rng.sample::<f32, _>(StandardNormal))
                    .collect();
                Tensor4::new(TensorRole::ActivationNchw, [1, c, h, w], data)
            }
            ImageSource::Directory(dir) => {
                let files = Self::list_raw_files(dir)?;
                let path = files.get(index).ok_or_else(|| {
                    DwdError::Input(format!(
                        "image source {} has only {} images, index {index} requested",
                        dir.display(),
                        files.len()
                    ))
                })?;
                let bytes = std::fs::read(path)?;
                if bytes.len() != c * h * w * 4 {
                    return Err(DwdError::Shape(format!(
                        "{}: {} bytes does not match signature {c}x{h}x{w}",
                        path.display(),
                        bytes.len()
                    )));
                }
                let data = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Tensor4::new(TensorRole::ActivationNchw, [1, c, h, w], data)
            }
        }
    }

    pub fn ensure_count(&self, needed: usize) -> Result<()> {
        if let ImageSource::Directory(dir) = self {
            let n = Self::list_raw_files(dir)?.len();
            if n < needed {
                return Err(DwdError::Input(format!(
                    "image source {} provides {n} images, {needed} required",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    fn list_raw_files(dir: &Path) -> Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "f32"))
            .collect();
        files.sort();
        Ok(files)
    }
}

/// Sampled response matrices for one layer: X rows are receptive fields in
/// im2col ordering, Y rows the matching pre-activation responses, so that
/// `Y = X·W` for the layer's weight matrix.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub layer_id: usize,
    pub seed: u64,
    pub channels: usize,
    pub kernel: (usize, usize),
    /// (image, output row, output col) provenance per sampled row.
    pub positions: Vec<(u32, u32, u32)>,
}

impl PatchSet {
    /// Build directly from an X matrix and weight matrix (`Y = X·W`); used
    /// by the random-data harness where no network is involved.
    pub fn from_matrices(
        x: Array2<f64>,
        w: &Array2<f64>,
        channels: usize,
        kernel: (usize, usize),
        layer_id: usize,
        seed: u64,
    ) -> Result<Self> {
        let kk = kernel.0 * kernel.1;
        if x.ncols() != channels * kk {
            return Err(DwdError::Shape(format!(
                "X has {} columns, expected c*kh*kw = {}",
                x.ncols(),
                channels * kk
            )));
        }
        if w.nrows() != channels * kk {
            return Err(DwdError::Shape(format!(
                "W has {} rows, expected c*kh*kw = {}",
                w.nrows(),
                channels * kk
            )));
        }
        let rows = x.nrows();
        let y = x.dot(w);
        Ok(Self {
            x,
            y,
            layer_id,
            seed,
            channels,
            kernel,
            positions: vec![(0, 0, 0); rows],
        })
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }
}

/// X block of channel `i` together with the matching rows of the weight
/// matrix (`W_i`, kh·kw × n). Concatenating `X_i·W_i` over all channels
/// reproduces `Y = X·W`.
pub fn channel_slice<'a>(
    ps: &'a PatchSet,
    w: &'a Array2<f64>,
    i: usize,
) -> Result<(ArrayView2<'a, f64>, ArrayView2<'a, f64>)> {
    if i >= ps.channels {
        return Err(DwdError::Input(format!(
            "channel index {i} out of range (c = {})",
            ps.channels
        )));
    }
    let kk = ps.kernel.0 * ps.kernel.1;
    if w.nrows() != ps.channels * kk {
        return Err(DwdError::Shape(format!(
            "weight matrix has {} rows, expected {}",
            w.nrows(),
            ps.channels * kk
        )));
    }
    let xi = ps.x.slice(s![.., i * kk..(i + 1) * kk]);
    let wi = w.slice(s![i * kk..(i + 1) * kk, ..]);
    Ok((xi, wi))
}

struct LayerContext {
    w: Array2<f64>,
    channels: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    out_grid: (usize, usize),
}

fn layer_context(model: &NetworkModel, layer_id: usize) -> Result<LayerContext> {
    let (layer, _) = model.layer(layer_id)?;
    let reg = match layer {
        Layer::Regular(l) => l,
        Layer::Separable(_) => {
            return Err(DwdError::Input(format!(
                "layer {layer_id} is already separable; patches are sampled from regular layers"
            )))
        }
    };
    let plan = model.spatial_plan()?;
    let (h, w) = plan[layer_id];
    let (kh, kw) = reg.kernel();
    let ho = out_extent(h, kh, reg.stride.0, reg.padding.0)?;
    let wo = out_extent(w, kw, reg.stride.1, reg.padding.1)?;
    if ho == 0 || wo == 0 {
        return Err(DwdError::Shape(format!(
            "layer {layer_id} has no spatial output positions"
        )));
    }
    Ok(LayerContext {
        w: weights_matrix(reg),
        channels: reg.in_channels(),
        kernel: (kh, kw),
        stride: reg.stride,
        padding: reg.padding,
        out_grid: (ho, wo),
    })
}

/// Sample `cfg.per_image` positions for each of `cfg.num_images` images and
/// extract (X, Y) for `layer_id`. X comes from the model's activations
/// entering the layer; Y = X·W excludes bias and precedes the layer's own
/// activation.
pub fn sample_patches(
    model: &NetworkModel,
    images: &ImageSource,
    layer_id: usize,
    cfg: &SamplingConfig,
) -> Result<PatchSet> {
    images.ensure_count(cfg.num_images)?;
    let ctx = layer_context(model, layer_id)?;
    let (ho, wo) = ctx.out_grid;
    let grid = ho * wo;

    let rows = cfg.per_image * cfg.num_images;
    let cols = ctx.channels * ctx.kernel.0 * ctx.kernel.1;
    let mut x = Array2::zeros((rows, cols));
    let mut positions = Vec::with_capacity(rows);

    let mut row = 0;
    for img_idx in 0..cfg.num_images {
        let mut rng = rng_for(cfg.seed, tags::IMAGE, img_idx as u64);
        let picks: Vec<usize> = if grid >= cfg.per_image {
            rand::seq::index::sample(&mut rng, grid, cfg.per_image).into_vec()
        } else {
            (0..cfg.per_image)
                .map(|_| rng.random_range(0..grid))
                .collect()
        };

        let image = images.image(img_idx, model.input_signature)?;
        let acts = model.forward_upto(&image, layer_id)?;
        for pick in picks {
            let (or_, oc_) = (pick / wo, pick % wo);
            receptive_field_row(
                &acts,
                0,
                or_,
                oc_,
                ctx.kernel.0,
                ctx.kernel.1,
                ctx.stride,
                ctx.padding,
                x.row_mut(row).as_slice_mut().expect("contiguous row"),
            );
            positions.push((img_idx as u32, or_ as u32, oc_ as u32));
            row += 1;
        }
    }

    let y = x.dot(&ctx.w);
    Ok(PatchSet {
        x,
        y,
        layer_id,
        seed: cfg.seed,
        channels: ctx.channels,
        kernel: ctx.kernel,
        positions,
    })
}

/// Extract (X, Y) for `layer_id` at previously sampled positions. Used to
/// evaluate a second model (e.g. the pristine original) at positions that
/// were drawn against another model with the same layer geometry.
pub fn sample_at_positions(
    model: &NetworkModel,
    images: &ImageSource,
    layer_id: usize,
    positions: &[(u32, u32, u32)],
    seed: u64,
) -> Result<PatchSet> {
    let ctx = layer_context(model, layer_id)?;
    let (ho, wo) = ctx.out_grid;

    let rows = positions.len();
    let cols = ctx.channels * ctx.kernel.0 * ctx.kernel.1;
    let mut x = Array2::zeros((rows, cols));

    let mut current_img: Option<(u32, Tensor4)> = None;
    for (row, &(img_idx, or_, oc_)) in positions.iter().enumerate() {
        if or_ as usize >= ho || oc_ as usize >= wo {
            return Err(DwdError::Input(format!(
                "position ({img_idx},{or_},{oc_}) outside the {ho}x{wo} output grid"
            )));
        }
        let reuse = matches!(&current_img, Some((idx, _)) if *idx == img_idx);
        if !reuse {
            let image = images.image(img_idx as usize, model.input_signature)?;
            let acts = model.forward_upto(&image, layer_id)?;
            current_img = Some((img_idx, acts));
        }
        let acts = &current_img.as_ref().unwrap().1;
        receptive_field_row(
            acts,
            0,
            or_ as usize,
            oc_ as usize,
            ctx.kernel.0,
            ctx.kernel.1,
            ctx.stride,
            ctx.padding,
            x.row_mut(row).as_slice_mut().expect("contiguous row"),
        );
    }

    let y = x.dot(&ctx.w);
    Ok(PatchSet {
        x,
        y,
        layer_id,
        seed,
        channels: ctx.channels,
        kernel: ctx.kernel,
        positions: positions.to_vec(),
    })
}

// ── persistence ─────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct PatchSetManifest {
    format_version: u32,
    kind: String,
    layer_id: usize,
    seed: u64,
    rows: usize,
    channels: usize,
    kh: usize,
    kw: usize,
    out_channels: usize,
    buffer_file: String,
    buffer_len: u64,
    checksum_crc32: String,
    x_offset: u64,
    y_offset: u64,
    positions: Vec<(u32, u32, u32)>,
}

/// Persist a patch set in the same manifest+buffer container as models.
/// Matrix entries are stored as f32.
pub fn save_patchset(ps: &PatchSet, path: &Path) -> Result<()> {
    let mut buffer: Vec<f32> = Vec::with_capacity(ps.x.len() + ps.y.len());
    let x_offset = 0u64;
    buffer.extend(ps.x.iter().map(|v| *v as f32));
    let y_offset = buffer.len() as u64;
    buffer.extend(ps.y.iter().map(|v| *v as f32));
    let bytes = buffer_to_bytes(&buffer);

    let manifest = PatchSetManifest {
        format_version: FORMAT_VERSION,
        kind: "patchset".into(),
        layer_id: ps.layer_id,
        seed: ps.seed,
        rows: ps.rows(),
        channels: ps.channels,
        kh: ps.kernel.0,
        kw: ps.kernel.1,
        out_channels: ps.y.ncols(),
        buffer_file: buffer_file_name(path)?,
        buffer_len: buffer.len() as u64,
        checksum_crc32: crc32_hex(&bytes),
        x_offset,
        y_offset,
        positions: ps.positions.clone(),
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    write_atomic(&dir.join(&manifest.buffer_file), &bytes)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DwdError::Format(format!("manifest encode: {e}")))?;
    write_atomic(path, json.as_bytes())
}

pub fn load_patchset(path: &Path) -> Result<PatchSet> {
    let text = std::fs::read_to_string(path)?;
    let manifest: PatchSetManifest = serde_json::from_str(&text)
        .map_err(|e| DwdError::Format(format!("manifest parse: {e}")))?;
    check_version(manifest.format_version)?;
    if manifest.kind != "patchset" {
        return Err(DwdError::Format(format!(
            "expected a patchset container, found kind '{}'",
            manifest.kind
        )));
    }
    let buffer = read_buffer(
        path,
        &manifest.buffer_file,
        manifest.buffer_len,
        &manifest.checksum_crc32,
    )?;
    let kk = manifest.kh * manifest.kw;
    let x_len = manifest.rows * manifest.channels * kk;
    let y_len = manifest.rows * manifest.out_channels;
    let xs = manifest.x_offset as usize;
    let ys = manifest.y_offset as usize;
    if xs + x_len > buffer.len() || ys + y_len > buffer.len() {
        return Err(DwdError::Format("patchset offsets outside buffer".into()));
    }
    if manifest.positions.len() != manifest.rows {
        return Err(DwdError::Format(format!(
            "patchset has {} positions for {} rows",
            manifest.positions.len(),
            manifest.rows
        )));
    }
    let x = Array2::from_shape_vec(
        (manifest.rows, manifest.channels * kk),
        buffer[xs..xs + x_len]
            .iter()
            .map(|v| f64::from(*v))
            .collect(),
    )
    .map_err(|e| DwdError::Format(format!("patchset X shape: {e}")))?;
    let y = Array2::from_shape_vec(
        (manifest.rows, manifest.out_channels),
        buffer[ys..ys + y_len]
            .iter()
            .map(|v| f64::from(*v))
            .collect(),
    )
    .map_err(|e| DwdError::Format(format!("patchset Y shape: {e}")))?;
    Ok(PatchSet {
        x,
        y,
        layer_id: manifest.layer_id,
        seed: manifest.seed,
        channels: manifest.channels,
        kernel: (manifest.kh, manifest.kw),
        positions: manifest.positions,
    })
}
