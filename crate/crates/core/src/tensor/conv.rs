use std::ops::Range;

use super::linalg::gemm;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// "Same" output length `ceil(input / stride)`.
pub fn conv2d_output_len(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

/// Output length and leading zero padding for "same" convolution. The
/// total padding is split evenly; an odd extra zero goes to the end.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = conv2d_output_len(input, stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

/// Index geometry of one strided "same" convolution from an `in_h x in_w x
/// cin` image to an `out_h x out_w x cout` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_t: usize,
    pub pad_l: usize,
}

impl ConvGeometry {
    pub fn new(
        in_hw: (usize, usize),
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Self {
        let (out_h, pad_t) = same_padding(in_hw.0, kernel.0, stride.0);
        let (out_w, pad_l) = same_padding(in_hw.1, kernel.1, stride.1);
        Self {
            in_h: in_hw.0,
            in_w: in_hw.1,
            cin,
            out_h,
            out_w,
            cout,
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
            pad_t,
            pad_l,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.cin
    }

    pub fn out_len(&self) -> usize {
        self.positions() * self.cout
    }

    /// 1x1, unit stride: the image already is its own patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1
    }

    fn source_row(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.sh + k).checked_sub(self.pad_t).filter(|&r| r < self.in_h)
    }

    fn source_col(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.sw + k).checked_sub(self.pad_l).filter(|&c| c < self.in_w)
    }
}

/// Scratch budget (elements) for one block of unfolded patches.
#[cfg(not(test))]
const PATCH_BLOCK: usize = 1 << 21;
#[cfg(test)]
const PATCH_BLOCK: usize = 100;

/// Output-row ranges whose patch matrices fit in [`PATCH_BLOCK`].
pub(crate) fn row_blocks(g: &ConvGeometry) -> impl Iterator<Item = Range<usize>> {
    let per_row = (g.out_w * g.patch_len()).max(1);
    let step = (PATCH_BLOCK / per_row).clamp(1, g.out_h);
    let out_h = g.out_h;
    (0..out_h).step_by(step).map(move |r| r..(r + step).min(out_h))
}

/// Unfolds output rows `rows` of one image into a
/// `[rows.len() * out_w, kh * kw * cin]` patch matrix.
pub(crate) fn im2col<T: Scalar>(image: &[T], g: &ConvGeometry, rows: Range<usize>, cols: &mut [T]) {
    let patch = g.patch_len();
    let cin = g.cin;
    let first = rows.start;
    for oh in rows {
        for ow in 0..g.out_w {
            let row = &mut cols[((oh - first) * g.out_w + ow) * patch..][..patch];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let dst = &mut row[(ki * g.kw + kj) * cin..][..cin];
                    match (g.source_row(oh, ki), g.source_col(ow, kj)) {
                        (Some(r), Some(c)) => {
                            dst.copy_from_slice(&image[(r * g.in_w + c) * cin..][..cin]);
                        }
                        _ => dst.fill(T::zero()),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back onto an image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, rows: Range<usize>, image: &mut [T]) {
    let patch = g.patch_len();
    let cin = g.cin;
    let first = rows.start;
    for oh in rows {
        for ow in 0..g.out_w {
            let row = &cols[((oh - first) * g.out_w + ow) * patch..][..patch];
            for ki in 0..g.kh {
                let Some(r) = g.source_row(oh, ki) else { continue };
                for kj in 0..g.kw {
                    let Some(c) = g.source_col(ow, kj) else { continue };
                    let src = &row[(ki * g.kw + kj) * cin..][..cin];
                    let dst = &mut image[(r * g.in_w + c) * cin..][..cin];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn scratch<T: Scalar>(g: &ConvGeometry) -> Vec<T> {
    if g.is_pointwise() {
        Vec::new()
    } else {
        let rows = row_blocks(g).next().map_or(0, |r| r.len());
        vec![T::zero(); rows * g.out_w * g.patch_len()]
    }
}

/// Splits `[B, H, W, C]` or `[H, W, C]` into (batch, h, w, c, had_batch).
fn image_dims(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c, false)),
        [b, h, w, c] => Ok((b, h, w, c, true)),
        _ => Err(Error::shape(format!(
            "{op} expects [T, F, C] or [B, T, F, C], got {shape:?}"
        ))),
    }
}

fn output_shape(batch: usize, h: usize, w: usize, c: usize, had_batch: bool) -> Vec<usize> {
    if had_batch {
        vec![batch, h, w, c]
    } else {
        vec![h, w, c]
    }
}

fn check_kernel(w: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match *w {
        [kh, kw, a, b] if kh % 2 == 1 && kw % 2 == 1 => Ok((kh, kw, a, b)),
        [_, _, _, _] => Err(Error::shape(format!("{op}: kernel dims must be odd, got {w:?}"))),
        _ => Err(Error::shape(format!("{op}: kernel must be rank 4, got {w:?}"))),
    }
}

fn check_bias<T: Scalar>(bias: Option<&Var<'_, T>>, channels: usize, op: &str) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape(format!(
            "{op}: bias shape {:?} does not match {channels} output channels",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad<T: Scalar>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); channels];
    for row in g.data().chunks(channels) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    Tensor::from_parts(vec![channels], db)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// "Same"-padded strided cross-correlation.
    ///
    /// `self`: `[B, T, F, Cin]` (batch optional), `weight`: `[kh, kw, Cin, Cout]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let (batch, h, w, cin, had_batch) = image_dims(self.shape(), "conv2d")?;
        let (kh, kw, wcin, cout) = check_kernel(weight.shape(), "conv2d")?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels but kernel {:?} expects {wcin}",
                weight.shape()
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d: stride must be positive"));
        }
        check_bias(bias, cout, "conv2d")?;
        let geo = ConvGeometry::new((h, w), cin, cout, (kh, kw), stride);
        let x = self.value.data();
        let wt = weight.value.data();
        let mut out = vec![T::zero(); batch * geo.out_len()];
        let mut cols = scratch(&geo);
        for b in 0..batch {
            let image = &x[b * geo.in_len()..][..geo.in_len()];
            let out_b = &mut out[b * geo.out_len()..][..geo.out_len()];
            if geo.is_pointwise() {
                gemm(geo.positions(), cin, cout, image, false, wt, false, out_b, false);
                continue;
            }
            for rows in row_blocks(&geo) {
                let m = rows.len() * geo.out_w;
                let out_rows = &mut out_b[rows.start * geo.out_w * cout..][..m * cout];
                im2col(image, &geo, rows, &mut cols);
                gemm(m, geo.patch_len(), cout, &cols[..m * geo.patch_len()], false, wt, false, out_rows, false);
            }
        }
        if let Some(bias) = bias {
            add_bias(&mut out, bias.value.data());
        }
        let out = Tensor::from_parts(output_shape(batch, geo.out_h, geo.out_w, cout, had_batch), out);

        let (xv, wv) = (self.shared(), weight.shared());
        let mut operands = vec![self, weight];
        operands.extend(bias);
        Ok(self.tape.record(out, &operands, move |g, needs| {
            let gd = g.data();
            let mut dx = needs[0].then(|| vec![T::zero(); batch * geo.in_len()]);
            let mut dw = needs[1].then(|| vec![T::zero(); geo.patch_len() * cout]);
            let mut cols = scratch(&geo);
            let patch = geo.patch_len();
            for b in 0..batch {
                let g_b = &gd[b * geo.out_len()..][..geo.out_len()];
                let image = &xv.data()[b * geo.in_len()..][..geo.in_len()];
                if geo.is_pointwise() {
                    if let Some(dw) = dw.as_mut() {
                        gemm(cin, geo.positions(), cout, image, true, g_b, false, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dx_b = &mut dx[b * geo.in_len()..][..geo.in_len()];
                        gemm(geo.positions(), cout, cin, g_b, false, wv.data(), true, dx_b, false);
                    }
                    continue;
                }
                for rows in row_blocks(&geo) {
                    let m = rows.len() * geo.out_w;
                    let g_rows = &g_b[rows.start * geo.out_w * cout..][..m * cout];
                    let cols = &mut cols[..m * patch];
                    if let Some(dw) = dw.as_mut() {
                        im2col(image, &geo, rows.clone(), cols);
                        gemm(patch, m, cout, cols, true, g_rows, false, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dx_b = &mut dx[b * geo.in_len()..][..geo.in_len()];
                        gemm(m, cout, patch, g_rows, false, wv.data(), true, cols, false);
                        col2im(cols, &geo, rows, dx_b);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(g, cout)));
            }
            grads
        }))
    }

    /// Transposed convolution: the adjoint of [`Var::conv2d`] taken from a
    /// `target` spatial size down to this input's size.
    ///
    /// `self`: `[B, T, F, Cin]`, `weight`: `[kh, kw, Cout, Cin]`. The target
    /// must satisfy `ceil(target / stride) == input` on both axes.
    pub fn conv2d_transpose(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: (usize, usize),
        target: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let (batch, h, w, cin, had_batch) = image_dims(self.shape(), "conv2d_transpose")?;
        let (kh, kw, cout, wcin) = check_kernel(weight.shape(), "conv2d_transpose")?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d_transpose: input has {cin} channels but kernel {:?} expects {wcin}",
                weight.shape()
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d_transpose: stride must be positive"));
        }
        if conv2d_output_len(target.0, stride.0) != h || conv2d_output_len(target.1, stride.1) != w {
            return Err(Error::shape(format!(
                "conv2d_transpose: target {target:?} is unreachable from {h}x{w} with stride {stride:?}"
            )));
        }
        check_bias(bias, cout, "conv2d_transpose")?;
        // Geometry of the forward conv this op is the adjoint of.
        let geo = ConvGeometry::new(target, cout, cin, (kh, kw), stride);
        let x = self.value.data();
        let wt = weight.value.data();
        let mut out = vec![T::zero(); batch * geo.in_len()];
        let mut cols = scratch(&geo);
        let patch = geo.patch_len();
        for b in 0..batch {
            let x_b = &x[b * geo.out_len()..][..geo.out_len()];
            let out_b = &mut out[b * geo.in_len()..][..geo.in_len()];
            if geo.is_pointwise() {
                gemm(geo.positions(), cin, cout, x_b, false, wt, true, out_b, false);
                continue;
            }
            for rows in row_blocks(&geo) {
                let m = rows.len() * geo.out_w;
                let x_rows = &x_b[rows.start * geo.out_w * cin..][..m * cin];
                let cols = &mut cols[..m * patch];
                gemm(m, cin, patch, x_rows, false, wt, true, cols, false);
                col2im(cols, &geo, rows, out_b);
            }
        }
        if let Some(bias) = bias {
            add_bias(&mut out, bias.value.data());
        }
        let out = Tensor::from_parts(output_shape(batch, target.0, target.1, cout, had_batch), out);

        let (xv, wv) = (self.shared(), weight.shared());
        let mut operands = vec![self, weight];
        operands.extend(bias);
        Ok(self.tape.record(out, &operands, move |g, needs| {
            let gd = g.data();
            let mut dx = needs[0].then(|| vec![T::zero(); batch * geo.out_len()]);
            let mut dw = needs[1].then(|| vec![T::zero(); geo.patch_len() * cin]);
            let mut cols = scratch(&geo);
            let patch = geo.patch_len();
            for b in 0..batch {
                let g_b = &gd[b * geo.in_len()..][..geo.in_len()];
                let x_b = &xv.data()[b * geo.out_len()..][..geo.out_len()];
                let mut dx_b = dx.as_mut().map(|dx| &mut dx[b * geo.out_len()..][..geo.out_len()]);
                let blocks: Vec<Range<usize>> = if geo.is_pointwise() {
                    vec![0..geo.out_h]
                } else {
                    row_blocks(&geo).collect()
                };
                for rows in blocks {
                    let m = rows.len() * geo.out_w;
                    let patches: &[T] = if geo.is_pointwise() {
                        g_b
                    } else {
                        im2col(g_b, &geo, rows.clone(), &mut cols[..m * patch]);
                        &cols[..m * patch]
                    };
                    let offset = rows.start * geo.out_w * cin;
                    if let Some(dx_b) = dx_b.as_mut() {
                        gemm(m, patch, cin, patches, false, wv.data(), false, &mut dx_b[offset..][..m * cin], false);
                    }
                    if let Some(dw) = dw.as_mut() {
                        gemm(patch, m, cin, patches, true, &x_b[offset..][..m * cin], false, dw, true);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(g, cout)));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn same_padding_puts_extra_zero_at_end() {
        assert_eq!(same_padding(5, 3, 1), (5, 1));
        assert_eq!(same_padding(6, 3, 2), (3, 0));
        assert_eq!(same_padding(5, 3, 2), (3, 1));
        assert_eq!(same_padding(4, 1, 1), (4, 0));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 4, 2], |i| i as f64 * 0.5 - 3.0));
        let mut w = Tensor::zeros(&[1, 1, 2, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let w = tape.constant(w);
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = x.conv2d(&w, Some(&b), (1, 1)).unwrap();
        assert_eq!(y.value(), x.value());
        let z = x.conv2d_transpose(&w, Some(&b), (1, 1), (3, 4)).unwrap();
        assert_eq!(z.value(), x.value());
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[4, 4, 1]));
        let w = tape.constant(Tensor::ones(&[3, 3, 1, 1]));
        let y = x.conv2d(&w, None, (1, 1)).unwrap();
        let d = y.value().data();
        assert_eq!(d[0], 4.0);
        assert_eq!(d[3], 4.0);
        assert_eq!(d[1], 6.0);
        assert_eq!(d[4], 6.0);
        assert_eq!(d[5], 9.0);
        assert_eq!(d[10], 9.0);
        assert_eq!(d[15], 4.0);
    }

    #[test]
    fn transpose_shape_and_reachability() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[3, 3, 1]));
        let w = tape.constant(Tensor::ones(&[3, 3, 5, 1]));
        let y = x.conv2d_transpose(&w, None, (2, 2), (6, 6)).unwrap();
        assert_eq!(y.shape(), &[6, 6, 5]);
        assert!(x.conv2d_transpose(&w, None, (2, 2), (5, 5)).is_ok());
        assert!(matches!(
            x.conv2d_transpose(&w, None, (2, 2), (7, 6)),
            Err(Error::Shape(_))
        ));
        assert!(x.conv2d_transpose(&w, None, (2, 2), (4, 6)).is_err());
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[3, 3, 2]));
        let w = tape.constant(Tensor::ones(&[3, 3, 3, 1]));
        assert!(matches!(x.conv2d(&w, None, (1, 1)), Err(Error::Shape(_))));
        let even = tape.constant(Tensor::ones(&[2, 2, 2, 1]));
        assert!(x.conv2d(&even, None, (1, 1)).is_err());
    }
}
