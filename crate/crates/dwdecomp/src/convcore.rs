//! Dense 4-D tensors, the im2col matrix view of convolution, reference
//! forward passes for regular / depthwise / pointwise convolution, and the
//! exact fold of a separable pair back into a regular layer.
//!
//! Kernels accumulate in f64 and store f32, so reconstruction-error
//! measurements downstream are dominated by the decomposition rather than
//! the convolution arithmetic. All functions are pure; every output element
//! is reduced in a fixed order, so results do not depend on evaluation
//! order or parallelism.

use ndarray::Array2;

use crate::error::{DwdError, Result};

/// Interpretation of the four extents of a [`Tensor4`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Convolution weights: out-channels × in-channels × kh × kw.
    WeightNckk,
    /// Activations: batch × channels × height × width.
    ActivationNchw,
}

/// Dense single-precision 4-D array, row-major in declared dimension order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    role: TensorRole,
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(role: TensorRole, dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(DwdError::Shape(format!(
                "tensor data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                len
            )));
        }
        Ok(Self { role, dims, data })
    }

    pub fn zeros(role: TensorRole, dims: [usize; 4]) -> Self {
        let len = dims.iter().product();
        Self {
            role,
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn role(&self) -> TensorRole {
        self.role
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    fn index(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        ((a * self.dims[1] + b) * self.dims[2] + c) * self.dims[3] + d
    }

    #[inline]
    pub fn at(&self, a: usize, b: usize, c: usize, d: usize) -> f32 {
        self.data[self.index(a, b, c, d)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, d: usize, v: f32) {
        let i = self.index(a, b, c, d);
        self.data[i] = v;
    }

    fn expect_role(&self, role: TensorRole, what: &str) -> Result<()> {
        if self.role != role {
            return Err(DwdError::Shape(format!(
                "{what}: expected {role:?} tensor, got {:?}",
                self.role
            )));
        }
        Ok(())
    }
}

/// A regular convolutional layer: weights n×c×kh×kw plus stride, zero
/// padding and an optional per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularConvLayer {
    pub weights: Tensor4,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub bias: Option<Vec<f32>>,
}

impl RegularConvLayer {
    pub fn new(
        weights: Tensor4,
        stride: (usize, usize),
        padding: (usize, usize),
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        weights.expect_role(TensorRole::WeightNckk, "RegularConvLayer")?;
        let [n, c, kh, kw] = weights.dims();
        if n == 0 || c == 0 || kh == 0 || kw == 0 {
            return Err(DwdError::Shape(format!(
                "RegularConvLayer: all weight extents must be >= 1, got {:?}",
                weights.dims()
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(DwdError::Shape(
                "RegularConvLayer: stride must be >= 1".into(),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != n {
                return Err(DwdError::Shape(format!(
                    "RegularConvLayer: bias length {} != out channels {n}",
                    b.len()
                )));
            }
        }
        Ok(Self {
            weights,
            stride,
            padding,
            bias,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        let d = self.weights.dims();
        (d[2], d[3])
    }
}

/// A depthwise + pointwise pair. The depthwise stage holds one kh×kw kernel
/// per input channel (stored c×kh×kw); the pointwise stage is an n×c matrix
/// applied per position with stride 1 and no padding. Stride/padding belong
/// to the depthwise stage; the bias attaches after the pointwise stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableConvLayer {
    pub channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    /// c·kh·kw values, kernel of channel i at `[i*kh*kw .. (i+1)*kh*kw]`.
    pub depthwise: Vec<f32>,
    /// n×c row-major.
    pub pointwise: Vec<f32>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub bias: Option<Vec<f32>>,
}

impl SeparableConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
        depthwise: Vec<f32>,
        pointwise: Vec<f32>,
        stride: (usize, usize),
        padding: (usize, usize),
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        if channels == 0 || out_channels == 0 || kh == 0 || kw == 0 {
            return Err(DwdError::Shape(
                "SeparableConvLayer: all extents must be >= 1".into(),
            ));
        }
        if depthwise.len() != channels * kh * kw {
            return Err(DwdError::Shape(format!(
                "SeparableConvLayer: depthwise length {} != c*kh*kw = {}",
                depthwise.len(),
                channels * kh * kw
            )));
        }
        if pointwise.len() != out_channels * channels {
            return Err(DwdError::Shape(format!(
                "SeparableConvLayer: pointwise length {} != n*c = {}",
                pointwise.len(),
                out_channels * channels
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(DwdError::Shape(
                "SeparableConvLayer: stride must be >= 1".into(),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(DwdError::Shape(format!(
                    "SeparableConvLayer: bias length {} != out channels {out_channels}",
                    b.len()
                )));
            }
        }
        Ok(Self {
            channels,
            out_channels,
            kh,
            kw,
            depthwise,
            pointwise,
            stride,
            padding,
            bias,
        })
    }

    /// Depthwise kernel of channel `i`, kh·kw values.
    pub fn dw_kernel(&self, i: usize) -> &[f32] {
        let kk = self.kh * self.kw;
        &self.depthwise[i * kk..(i + 1) * kk]
    }

    #[inline]
    pub fn pw(&self, out: usize, inp: usize) -> f32 {
        self.pointwise[out * self.channels + inp]
    }
}

/// Number of valid output positions along one axis.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(DwdError::Shape(format!(
            "non-positive output extent: input {input} + 2*{pad} < kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Write the receptive field of output position (`or`, `oc`) of `image`
/// into `dest` (length c·kh·kw), channel-major then kernel-row-major.
/// Padded locations contribute zeros.
#[allow(clippy::too_many_arguments)]
pub(crate) fn receptive_field_row(
    input: &Tensor4,
    image: usize,
    or_: usize,
    oc_: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    dest: &mut [f64],
) {
    let [_, c, h, w] = input.dims();
    debug_assert_eq!(dest.len(), c * kh * kw);
    let base_r = (or_ * stride.0) as isize - pad.0 as isize;
    let base_c = (oc_ * stride.1) as isize - pad.1 as isize;
    let mut k = 0;
    for ch in 0..c {
        for dr in 0..kh {
            let r = base_r + dr as isize;
            for dc in 0..kw {
                let cc = base_c + dc as isize;
                dest[k] = if r >= 0 && cc >= 0 && (r as usize) < h && (cc as usize) < w {
                    f64::from(input.at(image, ch, r as usize, cc as usize))
                } else {
                    0.0
                };
                k += 1;
            }
        }
    }
}

/// Matrix view of convolution inputs: one row per output position (image-
/// major, then row-major over the output grid), one column per receptive
/// field element in channel-major, kernel-row-major order.
pub fn im2col(
    input: &Tensor4,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Array2<f64>> {
    input.expect_role(TensorRole::ActivationNchw, "im2col")?;
    let [n, c, h, w] = input.dims();
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(DwdError::Shape("im2col: empty input tensor".into()));
    }
    if kh == 0 || kw == 0 {
        return Err(DwdError::Shape(
            "im2col: kernel extents must be >= 1".into(),
        ));
    }
    let ho = out_extent(h, kh, stride.0, pad.0)?;
    let wo = out_extent(w, kw, stride.1, pad.1)?;
    let mut out = Array2::zeros((n * ho * wo, c * kh * kw));
    let mut row = 0;
    for img in 0..n {
        for or_ in 0..ho {
            for oc_ in 0..wo {
                let mut dest = out.row_mut(row);
                receptive_field_row(
                    input,
                    img,
                    or_,
                    oc_,
                    kh,
                    kw,
                    stride,
                    pad,
                    dest.as_slice_mut().expect("contiguous row"),
                );
                row += 1;
            }
        }
    }
    Ok(out)
}

/// The layer's weights as a (c·kh·kw)×n matrix whose column ordering
/// matches [`im2col`], so `Y = im2col(X)·W`.
pub fn weights_matrix(layer: &RegularConvLayer) -> Array2<f64> {
    let [n, c, kh, kw] = layer.weights.dims();
    let mut w = Array2::zeros((c * kh * kw, n));
    for o in 0..n {
        let mut k = 0;
        for ch in 0..c {
            for r in 0..kh {
                for cc in 0..kw {
                    w[[k, o]] = f64::from(layer.weights.at(o, ch, r, cc));
                    k += 1;
                }
            }
        }
    }
    w
}

/// Reference regular convolution, NCHW in / NCHW out.
pub fn conv2d_reference(input: &Tensor4, layer: &RegularConvLayer) -> Result<Tensor4> {
    input.expect_role(TensorRole::ActivationNchw, "conv2d_reference")?;
    let [nb, c_in, h, w] = input.dims();
    let [n, c, kh, kw] = layer.weights.dims();
    if c_in != c {
        return Err(DwdError::Shape(format!(
            "conv2d_reference: input has {c_in} channels, layer expects {c}"
        )));
    }
    let (sh, sw) = layer.stride;
    let (ph, pw) = layer.padding;
    let ho = out_extent(h, kh, sh, ph)?;
    let wo = out_extent(w, kw, sw, pw)?;

    let mut out = Tensor4::zeros(TensorRole::ActivationNchw, [nb, n, ho, wo]);
    for img in 0..nb {
        for o in 0..n {
            let bias = layer.bias.as_ref().map_or(0.0, |b| f64::from(b[o]));
            for or_ in 0..ho {
                let base_r = (or_ * sh) as isize - ph as isize;
                for oc_ in 0..wo {
                    let base_c = (oc_ * sw) as isize - pw as isize;
                    let mut acc = 0.0f64;
                    for ch in 0..c {
                        for dr in 0..kh {
                            let r = base_r + dr as isize;
                            if r < 0 || r as usize >= h {
                                continue;
                            }
                            for dc in 0..kw {
                                let cc = base_c + dc as isize;
                                if cc < 0 || cc as usize >= w {
                                    continue;
                                }
                                acc += f64::from(layer.weights.at(o, ch, dr, dc))
                                    * f64::from(input.at(img, ch, r as usize, cc as usize));
                            }
                        }
                    }
                    out.set(img, o, or_, oc_, (acc + bias) as f32);
                }
            }
        }
    }
    Ok(out)
}

/// Depthwise stage (channel i convolved with kernel i) followed by the
/// pointwise 1×1 stage.
pub fn separable_forward(input: &Tensor4, layer: &SeparableConvLayer) -> Result<Tensor4> {
    input.expect_role(TensorRole::ActivationNchw, "separable_forward")?;
    let [nb, c_in, h, w] = input.dims();
    if c_in != layer.channels {
        return Err(DwdError::Shape(format!(
            "separable_forward: input has {c_in} channels, layer expects {}",
            layer.channels
        )));
    }
    let (kh, kw) = (layer.kh, layer.kw);
    let (sh, sw) = layer.stride;
    let (ph, pw) = layer.padding;
    let ho = out_extent(h, kh, sh, ph)?;
    let wo = out_extent(w, kw, sw, pw)?;
    let c = layer.channels;
    let n = layer.out_channels;

    let mut mid = Tensor4::zeros(TensorRole::ActivationNchw, [nb, c, ho, wo]);
    for img in 0..nb {
        for ch in 0..c {
            let kernel = layer.dw_kernel(ch);
            for or_ in 0..ho {
                let base_r = (or_ * sh) as isize - ph as isize;
                for oc_ in 0..wo {
                    let base_c = (oc_ * sw) as isize - pw as isize;
                    let mut acc = 0.0f64;
                    for dr in 0..kh {
                        let r = base_r + dr as isize;
                        if r < 0 || r as usize >= h {
                            continue;
                        }
                        for dc in 0..kw {
                            let cc = base_c + dc as isize;
                            if cc < 0 || cc as usize >= w {
                                continue;
                            }
                            acc += f64::from(kernel[dr * kw + dc])
                                * f64::from(input.at(img, ch, r as usize, cc as usize));
                        }
                    }
                    mid.set(img, ch, or_, oc_, acc as f32);
                }
            }
        }
    }

    let mut out = Tensor4::zeros(TensorRole::ActivationNchw, [nb, n, ho, wo]);
    for img in 0..nb {
        for o in 0..n {
            let bias = layer.bias.as_ref().map_or(0.0, |b| f64::from(b[o]));
            for or_ in 0..ho {
                for oc_ in 0..wo {
                    let mut acc = 0.0f64;
                    for ch in 0..c {
                        acc += f64::from(layer.pw(o, ch)) * f64::from(mid.at(img, ch, or_, oc_));
                    }
                    out.set(img, o, or_, oc_, (acc + bias) as f32);
                }
            }
        }
    }
    Ok(out)
}

/// Exact regular-conv equivalent of a separable pair:
/// `W[o,i,·,·] = P[o,i] · D[i,·,·]`, stride/padding/bias copied.
pub fn fold_separable(layer: &SeparableConvLayer) -> RegularConvLayer {
    let (c, n) = (layer.channels, layer.out_channels);
    let (kh, kw) = (layer.kh, layer.kw);
    let mut weights = Tensor4::zeros(TensorRole::WeightNckk, [n, c, kh, kw]);
    for o in 0..n {
        for i in 0..c {
            let p = f64::from(layer.pw(o, i));
            let kernel = layer.dw_kernel(i);
            for r in 0..kh {
                for cc in 0..kw {
                    weights.set(o, i, r, cc, (p * f64::from(kernel[r * kw + cc])) as f32);
                }
            }
        }
    }
    RegularConvLayer {
        weights,
        stride: layer.stride,
        padding: layer.padding,
        bias: layer.bias.clone(),
    }
}
