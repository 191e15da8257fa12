//! The decomposition algorithms: the channel-decomposition baseline, the
//! per-channel depth-wise decomposition (basic and with sequential error
//! compensation), and the layer-by-layer pipeline over a whole network.
//!
//! All reported errors are true reconstruction errors
//! `‖Ŷ − Y_ref‖_F / ‖Y_ref‖_F` over the sampled responses; the compensated
//! variant additionally reports the norm of its terminal compensation state.

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;

use crate::convcore::{weights_matrix, RegularConvLayer, SeparableConvLayer};
use crate::error::{DwdError, Result};
use crate::linalg::{frobenius, leading_right_singular_vector, rank1_fit_factored};
use crate::netmodel::{Activation, Layer, NetworkModel};
use crate::sampler::{
    channel_slice, sample_at_positions, sample_patches, ImageSource, PatchSet, SamplingConfig,
};
use crate::seed::{substream, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodTag {
    Channel,
    Dw,
    DwComp,
}

impl MethodTag {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::Channel => "channel",
            MethodTag::Dw => "dw",
            MethodTag::DwComp => "dw-comp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(MethodTag::Channel),
            "dw" => Ok(MethodTag::Dw),
            "dw-comp" => Ok(MethodTag::DwComp),
            other => Err(DwdError::Input(format!("unknown method '{other}'"))),
        }
    }
}

/// How per-channel residuals accumulate into the compensation state E.
/// Signed accumulation tracks the true running residual and is the default;
/// Absolute applies an entry-wise absolute value to each channel residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CompensationMode {
    Absolute,
    #[default]
    Signed,
}

impl CompensationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CompensationMode::Absolute => "absolute",
            CompensationMode::Signed => "signed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(CompensationMode::Absolute),
            "signed" => Ok(CompensationMode::Signed),
            other => Err(DwdError::Input(format!(
                "unknown compensation mode '{other}'"
            ))),
        }
    }
}

/// Accumulated compensation error after a compensated decomposition.
#[derive(Debug, Clone)]
pub struct CompensationState {
    pub error: Array2<f64>,
    pub mode: CompensationMode,
}

/// Result of the channel-decomposition baseline: `W1` feeds a k×k conv with
/// c′ output channels, `W2` the following 1×1 conv.
#[derive(Debug, Clone)]
pub struct ChannelDecompResult {
    /// (c·kh·kw) × c′.
    pub w1: Array2<f64>,
    /// c′ × n.
    pub w2: Array2<f64>,
    pub retained_rank: usize,
}

#[derive(Debug, Clone)]
pub struct DecompositionReport {
    pub method: MethodTag,
    /// Per-channel ‖Y_i·u_i‖₂ for the depth-wise methods (σ₁ of Y_i for the
    /// basic method); the retained singular values of Y for the channel
    /// method.
    pub leading_singular_values: Vec<f64>,
    /// Per-channel residual norms (depth-wise methods only).
    pub channel_residuals: Vec<f64>,
    /// ‖Ŷ − Y_ref‖_F / ‖Y_ref‖_F.
    pub relative_error: f64,
    /// ‖E_terminal‖_F / ‖Y_ref‖_F for the compensated method.
    pub compensation_error: Option<f64>,
    /// Multiplies per output position before/after.
    pub flops_before: u64,
    pub flops_after: u64,
    pub speedup: f64,
}

/// `‖Y_hat − Y_ref‖_F / ‖Y_ref‖_F`.
pub fn relative_error(y_hat: ArrayView2<f64>, y_ref: ArrayView2<f64>) -> Result<f64> {
    if y_hat.dim() != y_ref.dim() {
        return Err(DwdError::Shape(format!(
            "relative_error: shapes {:?} and {:?} differ",
            y_hat.dim(),
            y_ref.dim()
        )));
    }
    let den = frobenius(y_ref);
    if den == 0.0 {
        return Err(DwdError::Degenerate(
            "relative_error: reference matrix is all zero".into(),
        ));
    }
    let mut num = 0.0;
    for (a, b) in y_hat.iter().zip(y_ref.iter()) {
        num += (a - b) * (a - b);
    }
    Ok(num.sqrt() / den)
}

/// Rank c′ at which the k×k/1×1 factorized pair runs `r`× faster than the
/// original layer: `c′ = max(1, floor(n·c·kh·kw / ((c·kh·kw + n)·r)))`.
pub fn select_rank_for_speedup(n: usize, c: usize, kh: usize, kw: usize, r: f64) -> Result<usize> {
    if r <= 0.0 || !r.is_finite() {
        return Err(DwdError::Input(format!(
            "target speed-up must be positive and finite, got {r}"
        )));
    }
    let full = (n * c * kh * kw) as f64;
    let per_rank = (c * kh * kw + n) as f64;
    Ok(((full / (per_rank * r)).floor() as usize).max(1))
}

fn dw_flops(n: usize, c: usize, kh: usize, kw: usize) -> (u64, u64) {
    let before = (n * c * kh * kw) as u64;
    let after = (c * kh * kw + n * c) as u64;
    (before, after)
}

/// Channel decomposition under a fixed retained rank: project sampled
/// responses onto the leading c′ right singular directions of Y and split
/// the layer into `W1 = W·P` and `W2 = Pᵀ`.
pub fn channel_decompose(
    w: &Array2<f64>,
    ps: &PatchSet,
    c_prime: usize,
) -> Result<(ChannelDecompResult, DecompositionReport)> {
    let ckk = w.nrows();
    let n = w.ncols();
    if ps.x.ncols() != ckk || ps.y.ncols() != n {
        return Err(DwdError::Shape(format!(
            "channel_decompose: patches ({} cols X, {} cols Y) do not match W ({ckk}x{n})",
            ps.x.ncols(),
            ps.y.ncols()
        )));
    }
    let max_rank = ckk.min(n).min(ps.rows());
    if c_prime == 0 || c_prime > max_rank {
        return Err(DwdError::Input(format!(
            "retained rank {c_prime} outside 1..={max_rank}"
        )));
    }

    let c = ps.channels;
    let (kh, kw) = ps.kernel;
    let flops_before = (n * c * kh * kw) as u64;
    let flops_after = (c_prime * c * kh * kw + n * c_prime) as u64;

    if ps.y.iter().all(|v| *v == 0.0) {
        // Degenerate signal: zero factors, zero error.
        let report = DecompositionReport {
            method: MethodTag::Channel,
            leading_singular_values: vec![0.0; c_prime],
            channel_residuals: Vec::new(),
            relative_error: 0.0,
            compensation_error: None,
            flops_before,
            flops_after,
            speedup: flops_before as f64 / flops_after as f64,
        };
        let result = ChannelDecompResult {
            w1: Array2::zeros((ckk, c_prime)),
            w2: Array2::zeros((c_prime, n)),
            retained_rank: c_prime,
        };
        return Ok((result, report));
    }

    let f = crate::linalg::svd(ps.y.view())?;
    let p = f.v.slice(ndarray::s![.., ..c_prime]).to_owned();
    let w1 = w.dot(&p);
    let w2 = p.t().to_owned();

    let projected = ps.y.dot(&p).dot(&p.t());
    let rel = relative_error(projected.view(), ps.y.view())?;

    let report = DecompositionReport {
        method: MethodTag::Channel,
        leading_singular_values: f.s.iter().take(c_prime).cloned().collect(),
        channel_residuals: Vec::new(),
        relative_error: rel,
        compensation_error: None,
        flops_before,
        flops_after,
        speedup: flops_before as f64 / flops_after as f64,
    };
    Ok((
        ChannelDecompResult {
            w1,
            w2,
            retained_rank: c_prime,
        },
        report,
    ))
}

/// Single-channel depth-wise step: `v0` is the leading right singular
/// direction of the channel responses, `D_i = W_i·v0`, `P_i = v0`. An
/// all-zero channel yields zero factors.
pub fn dw_decompose_single(
    w_i: ArrayView2<f64>,
    y_i: ArrayView2<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let n = w_i.ncols();
    if y_i.ncols() != n {
        return Err(DwdError::Shape(format!(
            "dw_decompose_single: W_i has {n} columns but Y_i has {}",
            y_i.ncols()
        )));
    }
    if y_i.iter().all(|v| *v == 0.0) {
        return Ok((Array1::zeros(w_i.nrows()), Array1::zeros(n)));
    }
    let (v0, _sigma) = leading_right_singular_vector(y_i)?;
    let d_i = w_i.dot(&v0);
    Ok((d_i, v0))
}

struct ChannelFit {
    d: Array1<f64>,
    p: Array1<f64>,
    /// Y_i·u — the reconstruction's left factor, kept for assembly of Ŷ.
    yu: Array1<f64>,
    sigma: f64,
    residual: f64,
}

fn assemble_separable(layer: &RegularConvLayer, fits: &[ChannelFit]) -> Result<SeparableConvLayer> {
    let n = layer.out_channels();
    let c = layer.in_channels();
    let (kh, kw) = layer.kernel();
    let kk = kh * kw;
    let mut depthwise = vec![0.0f32; c * kk];
    let mut pointwise = vec![0.0f32; n * c];
    for (i, fit) in fits.iter().enumerate() {
        for k in 0..kk {
            depthwise[i * kk + k] = fit.d[k] as f32;
        }
        for o in 0..n {
            pointwise[o * c + i] = fit.p[o] as f32;
        }
    }
    SeparableConvLayer::new(
        c,
        n,
        kh,
        kw,
        depthwise,
        pointwise,
        layer.stride,
        layer.padding,
        layer.bias.clone(),
    )
}

fn check_layer_patches(layer: &RegularConvLayer, ps: &PatchSet) -> Result<()> {
    let c = layer.in_channels();
    let (kh, kw) = layer.kernel();
    if ps.channels != c || ps.kernel != (kh, kw) {
        return Err(DwdError::Shape(format!(
            "patches were sampled for c={} k={}x{}, layer has c={c} k={kh}x{kw}",
            ps.channels, ps.kernel.0, ps.kernel.1
        )));
    }
    if ps.y.ncols() != layer.out_channels() {
        return Err(DwdError::Shape(format!(
            "patches have {} response columns, layer has {} output channels",
            ps.y.ncols(),
            layer.out_channels()
        )));
    }
    Ok(())
}

/// Basic depth-wise decomposition: apply the single-channel step to every
/// channel independently. Channels are processed in parallel; assembly is
/// by channel index, so the result does not depend on scheduling.
pub fn dw_decompose(
    layer: &RegularConvLayer,
    ps: &PatchSet,
) -> Result<(SeparableConvLayer, DecompositionReport)> {
    check_layer_patches(layer, ps)?;
    let w = weights_matrix(layer);
    let c = layer.in_channels();

    let fits: Vec<ChannelFit> = (0..c)
        .into_par_iter()
        .map(|i| -> Result<ChannelFit> {
            let (xi, wi) = channel_slice(ps, &w, i)?;
            let y_i = xi.dot(&wi);
            let (d, p) = dw_decompose_single(wi, y_i.view())?;
            let yu = y_i.dot(&p);
            let sigma = yu.iter().map(|v| v * v).sum::<f64>().sqrt();
            // Residual of the rank-1 reconstruction (Y_i·v0)·v0ᵀ.
            let ps_slice = p.as_slice().expect("contiguous p");
            let mut res2 = 0.0;
            for (r, row) in y_i.rows().into_iter().enumerate() {
                let scale = yu[r];
                let rs = row.as_slice().expect("contiguous row");
                for (yv, pv) in rs.iter().zip(ps_slice) {
                    let e = yv - scale * pv;
                    res2 += e * e;
                }
            }
            Ok(ChannelFit {
                d,
                p,
                yu,
                sigma,
                residual: res2.sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = ps.rows();
    let n = layer.out_channels();
    let mut recon = Array2::<f64>::zeros((rows, n));
    for fit in &fits {
        let ps_slice = fit.p.as_slice().expect("contiguous p");
        for (r, &a) in fit.yu.iter().enumerate() {
            if a != 0.0 {
                let mut row = recon.row_mut(r);
                let rs = row.as_slice_mut().expect("contiguous row");
                for (dst, pv) in rs.iter_mut().zip(ps_slice) {
                    *dst += a * pv;
                }
            }
        }
    }
    let rel = relative_error(recon.view(), ps.y.view())?;

    let (kh, kw) = layer.kernel();
    let (flops_before, flops_after) = dw_flops(n, c, kh, kw);
    let report = DecompositionReport {
        method: MethodTag::Dw,
        leading_singular_values: fits.iter().map(|f| f.sigma).collect(),
        channel_residuals: fits.iter().map(|f| f.residual).collect(),
        relative_error: rel,
        compensation_error: None,
        flops_before,
        flops_after,
        speedup: flops_before as f64 / flops_after as f64,
    };
    Ok((assemble_separable(layer, &fits)?, report))
}

/// Depth-wise decomposition with sequential inter-channel compensation.
///
/// Channels are processed in ascending order. Channel i fits
/// `T = Y_i′ + E` against the carrier `Y_i` (with `Y_i′ = Y_i` when no
/// ground-truth targets are supplied), accumulates its residual into E
/// (entry-wise absolute value in [`CompensationMode::Absolute`]), and emits
/// `D_i = W_i·u`, `P_i = p`. Degenerate channels emit zeros and leave E
/// untouched.
///
/// `targets`, when given, are patches from the pristine original network at
/// the same positions; they carry the upstream decomposition error into the
/// per-channel targets (multi-layer use).
pub fn dw_decompose_compensated(
    layer: &RegularConvLayer,
    ps: &PatchSet,
    mode: CompensationMode,
    targets: Option<&PatchSet>,
) -> Result<(SeparableConvLayer, DecompositionReport, CompensationState)> {
    check_layer_patches(layer, ps)?;
    if let Some(t) = targets {
        if t.rows() != ps.rows() || t.channels != ps.channels || t.kernel != ps.kernel {
            return Err(DwdError::Shape(
                "target patches do not match carrier patches".into(),
            ));
        }
    }
    let w = weights_matrix(layer);
    let c = layer.in_channels();
    let n = layer.out_channels();
    let rows = ps.rows();

    let mut e = Array2::<f64>::zeros((rows, n));
    let mut recon = Array2::<f64>::zeros((rows, n));
    let mut fits: Vec<ChannelFit> = Vec::with_capacity(c);

    for i in 0..c {
        let (xi, wi) = channel_slice(ps, &w, i)?;
        let y_i = xi.dot(&wi);

        let target_owned = match targets {
            Some(t) => {
                let (txi, twi) = channel_slice(t, &w, i)?;
                Some(txi.dot(&twi))
            }
            None => None,
        };
        let y_target = target_owned.as_ref().unwrap_or(&y_i);

        if y_i.iter().all(|v| *v == 0.0) {
            fits.push(ChannelFit {
                d: Array1::zeros(wi.nrows()),
                p: Array1::zeros(n),
                yu: Array1::zeros(rows),
                sigma: 0.0,
                residual: 0.0,
            });
            continue;
        }

        let t_mat = y_target + &e;
        // The carrier factors as Y_i = X_i·W_i with kh·kw ≪ N, so the fit
        // runs through the range-reduced path; same pencil, k×k eigenproblem.
        let ridge = 1e-8 * y_i.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let fit = rank1_fit_factored(t_mat.view(), y_i.view(), xi, wi, ridge)?;
        let d = wi.dot(&fit.u);
        let yu = y_i.dot(&fit.u);

        let p_slice = fit.p.as_slice().expect("contiguous p");
        let mut res2 = 0.0;
        for r in 0..rows {
            let scale = yu[r];
            let t_row = y_target.row(r);
            let ts = t_row.as_slice().expect("contiguous row");
            let mut rec_row = recon.row_mut(r);
            let rec = rec_row.as_slice_mut().expect("contiguous row");
            let mut e_row = e.row_mut(r);
            let es = e_row.as_slice_mut().expect("contiguous row");
            match mode {
                CompensationMode::Signed => {
                    for o in 0..n {
                        let fitted = scale * p_slice[o];
                        let channel_err = ts[o] - fitted;
                        rec[o] += fitted;
                        es[o] += channel_err;
                        res2 += channel_err * channel_err;
                    }
                }
                CompensationMode::Absolute => {
                    for o in 0..n {
                        let fitted = scale * p_slice[o];
                        let channel_err = ts[o] - fitted;
                        rec[o] += fitted;
                        es[o] += channel_err.abs();
                        res2 += channel_err * channel_err;
                    }
                }
            }
        }
        let sigma = yu.iter().map(|v| v * v).sum::<f64>().sqrt();
        fits.push(ChannelFit {
            d,
            p: fit.p,
            yu,
            sigma,
            residual: res2.sqrt(),
        });
    }

    let y_ref = targets.map_or_else(|| ps.y.view(), |t| t.y.view());
    let rel = relative_error(recon.view(), y_ref)?;
    let comp_err = frobenius(e.view()) / frobenius(y_ref);

    let (kh, kw) = layer.kernel();
    let (flops_before, flops_after) = dw_flops(n, c, kh, kw);
    let report = DecompositionReport {
        method: MethodTag::DwComp,
        leading_singular_values: fits.iter().map(|f| f.sigma).collect(),
        channel_residuals: fits.iter().map(|f| f.residual).collect(),
        relative_error: rel,
        compensation_error: Some(comp_err),
        flops_before,
        flops_after,
        speedup: flops_before as f64 / flops_after as f64,
    };
    Ok((
        assemble_separable(layer, &fits)?,
        report,
        CompensationState { error: e, mode },
    ))
}

// ── whole-network pipeline ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct NetworkDecomposeOptions {
    pub method: MethodTag,
    /// Target speed-up for the channel method's rank selection.
    pub speedup: f64,
    pub mode: CompensationMode,
    /// dw-comp only: fit each layer against ground-truth targets from the
    /// pristine network, so upstream decomposition error is compensated.
    pub compensate_layers: bool,
    /// Restrict to these layer ids (must be decomposable); `None` means all
    /// eligible layers.
    pub layers: Option<Vec<usize>>,
}

impl Default for NetworkDecomposeOptions {
    fn default() -> Self {
        Self {
            method: MethodTag::DwComp,
            speedup: 9.0,
            mode: CompensationMode::default(),
            compensate_layers: true,
            layers: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerOutcome {
    pub layer_id: usize,
    pub method: MethodTag,
    pub report: Option<DecompositionReport>,
    /// Reconstruction error against the pristine network's responses at the
    /// layer's sampled positions; comparable across `compensate_layers`
    /// settings.
    pub ground_truth_error: Option<f64>,
    pub note: Option<String>,
}

fn reconstruct_with_separable(sep: &SeparableConvLayer, ps: &PatchSet) -> Array2<f64> {
    let rows = ps.rows();
    let n = sep.out_channels;
    let c = sep.channels;
    let kk = sep.kh * sep.kw;
    let mut recon = Array2::<f64>::zeros((rows, n));
    for i in 0..c {
        let kernel = sep.dw_kernel(i);
        for r in 0..rows {
            let mut mid = 0.0f64;
            for (k, kv) in kernel.iter().enumerate() {
                mid += ps.x[[r, i * kk + k]] * f64::from(*kv);
            }
            if mid != 0.0 {
                for o in 0..n {
                    recon[[r, o]] += mid * f64::from(sep.pw(o, i));
                }
            }
        }
    }
    recon
}

fn channel_result_to_layers(
    layer: &RegularConvLayer,
    res: &ChannelDecompResult,
    activation: Activation,
) -> Result<Vec<(Layer, Activation)>> {
    use crate::convcore::{Tensor4, TensorRole};
    let c = layer.in_channels();
    let n = layer.out_channels();
    let (kh, kw) = layer.kernel();
    let cp = res.retained_rank;

    // W1: c′ filters of c×kh×kw; column j of w1 is filter j flattened in
    // the im2col ordering.
    let mut w1_data = vec![0.0f32; cp * c * kh * kw];
    for j in 0..cp {
        for idx in 0..c * kh * kw {
            w1_data[j * c * kh * kw + idx] = res.w1[[idx, j]] as f32;
        }
    }
    let w1_tensor = Tensor4::new(TensorRole::WeightNckk, [cp, c, kh, kw], w1_data)?;
    let first = RegularConvLayer::new(w1_tensor, layer.stride, layer.padding, None)?;

    // W2: n filters of c′×1×1; W2[j, o] transposed into the 1×1 conv.
    let mut w2_data = vec![0.0f32; n * cp];
    for o in 0..n {
        for j in 0..cp {
            w2_data[o * cp + j] = res.w2[[j, o]] as f32;
        }
    }
    let w2_tensor = Tensor4::new(TensorRole::WeightNckk, [n, cp, 1, 1], w2_data)?;
    let second = RegularConvLayer::new(w2_tensor, (1, 1), (0, 0), layer.bias.clone())?;

    Ok(vec![
        (Layer::Regular(first), Activation::Identity),
        (Layer::Regular(second), activation),
    ])
}

/// Decompose a network layer by layer, front to back. For each layer,
/// patches are sampled from the partially decomposed network; ground-truth
/// responses come from the pristine original at the same positions. Layers
/// with 1×1 kernels are skipped with a notice unless explicitly requested
/// (which is an error).
pub fn decompose_network(
    model: &NetworkModel,
    images: &ImageSource,
    cfg: &SamplingConfig,
    opts: &NetworkDecomposeOptions,
) -> Result<(NetworkModel, Vec<LayerOutcome>)> {
    let n_layers = model.len();
    if let Some(ids) = &opts.layers {
        for &id in ids {
            let (layer, _) = model.layer(id)?;
            match layer {
                Layer::Regular(l) => {
                    let (kh, kw) = l.kernel();
                    if kh * kw == 1 {
                        return Err(DwdError::Input(format!(
                            "layer {id} has a 1x1 kernel; there is no spatial kernel to separate"
                        )));
                    }
                }
                Layer::Separable(_) => {
                    return Err(DwdError::Input(format!("layer {id} is already separable")))
                }
            }
        }
    }

    let selected = |id: usize| -> bool { opts.layers.as_ref().is_none_or(|ids| ids.contains(&id)) };

    let mut work = model.clone();
    // Ids shift when the channel method splits one layer into two; track the
    // offset of original ids into the working model.
    let mut offset = 0usize;
    let mut outcomes = Vec::new();
    let mut decomposed_any = false;

    for orig_id in 0..n_layers {
        let work_id = orig_id + offset;
        let (layer, activation) = work.layer(work_id)?.clone();
        let reg = match layer {
            Layer::Regular(l) => l,
            Layer::Separable(_) => {
                outcomes.push(LayerOutcome {
                    layer_id: orig_id,
                    method: opts.method,
                    report: None,
                    ground_truth_error: None,
                    note: Some("already separable; skipped".into()),
                });
                continue;
            }
        };
        if !selected(orig_id) {
            continue;
        }
        let (kh, kw) = reg.kernel();
        if kh * kw == 1 {
            outcomes.push(LayerOutcome {
                layer_id: orig_id,
                method: opts.method,
                report: None,
                ground_truth_error: None,
                note: Some("1x1 kernel has no spatial component to separate; skipped".into()),
            });
            continue;
        }

        let layer_cfg = SamplingConfig {
            per_image: cfg.per_image,
            num_images: cfg.num_images,
            seed: substream(cfg.seed, tags::LAYER, orig_id as u64),
        };
        let ps = sample_patches(&work, images, work_id, &layer_cfg)?;
        // Ground truth from the pristine model at matched positions. Until
        // the first replacement the working model is the original, so the
        // carrier patches double as ground truth.
        let truth = if decomposed_any {
            sample_at_positions(model, images, orig_id, &ps.positions, layer_cfg.seed)?
        } else {
            ps.clone()
        };

        match opts.method {
            MethodTag::Channel => {
                let w = weights_matrix(&reg);
                let c_prime = select_rank_for_speedup(
                    reg.out_channels(),
                    reg.in_channels(),
                    kh,
                    kw,
                    opts.speedup,
                )?
                .min(w.nrows().min(w.ncols()).min(ps.rows()));
                let (res, report) = channel_decompose(&w, &ps, c_prime)?;
                let projected = {
                    let p = &res.w2; // Pᵀ
                    ps.y.dot(&p.t()).dot(p)
                };
                let gt = relative_error(projected.view(), truth.y.view())?;
                let entries = channel_result_to_layers(&reg, &res, activation)?;
                work.splice_layer(work_id, entries);
                offset += 1;
                outcomes.push(LayerOutcome {
                    layer_id: orig_id,
                    method: opts.method,
                    report: Some(report),
                    ground_truth_error: Some(gt),
                    note: None,
                });
            }
            MethodTag::Dw => {
                let (sep, report) = dw_decompose(&reg, &ps)?;
                let recon = reconstruct_with_separable(&sep, &ps);
                let gt = relative_error(recon.view(), truth.y.view())?;
                work.replace_layer(work_id, Layer::Separable(sep));
                outcomes.push(LayerOutcome {
                    layer_id: orig_id,
                    method: opts.method,
                    report: Some(report),
                    ground_truth_error: Some(gt),
                    note: None,
                });
            }
            MethodTag::DwComp => {
                let targets = if opts.compensate_layers {
                    Some(&truth)
                } else {
                    None
                };
                let (sep, report, _state) =
                    dw_decompose_compensated(&reg, &ps, opts.mode, targets)?;
                let recon = reconstruct_with_separable(&sep, &ps);
                let gt = relative_error(recon.view(), truth.y.view())?;
                work.replace_layer(work_id, Layer::Separable(sep));
                outcomes.push(LayerOutcome {
                    layer_id: orig_id,
                    method: opts.method,
                    report: Some(report),
                    ground_truth_error: Some(gt),
                    note: None,
                });
            }
        }
        decomposed_any = true;
    }

    Ok((work, outcomes))
}
