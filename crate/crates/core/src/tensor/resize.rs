use alloc::vec;

use super::kernels::gemm;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Corner-aligned linear interpolation weights mapping `input` samples onto
/// `output` samples, as an `output × input` matrix.
///
/// Grid endpoints land exactly on the first and last input sample, so
/// `output == input` yields the identity. A single input sample broadcasts;
/// a single output sample reads the first input.
pub fn interpolation_matrix(output: usize, input: usize) -> Result<Tensor> {
    if output == 0 || input == 0 {
        return Err(Error::dim("interpolation_matrix", &[output], &[input]));
    }
    let mut m = vec![0.0; output * input];
    for i in 0..output {
        let row = &mut m[i * input..(i + 1) * input];
        if input == 1 || output == 1 {
            row[0] = 1.0;
            continue;
        }
        // exact rational position i·(input-1)/(output-1)
        let num = i * (input - 1);
        let den = output - 1;
        let lo = num / den;
        let rem = num % den;
        if rem == 0 {
            row[lo] = 1.0;
        } else {
            let frac = rem as Scalar / den as Scalar;
            row[lo] = 1.0 - frac;
            row[lo + 1] = frac;
        }
    }
    Tensor::new(&[output, input], m)
}

/// Resizes a matrix to `rows × cols` with corner-aligned bilinear
/// interpolation. Non-differentiable twin of [`super::Tape::bilinear_resize`].
pub fn bilinear_resize_values(w: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::dim("bilinear_resize", w.shape(), &[rows, cols]));
    }
    let (h, wd) = (w.shape()[0], w.shape()[1]);
    let r = interpolation_matrix(rows, h)?;
    let c = interpolation_matrix(cols, wd)?;
    let mut tmp = vec![0.0; rows * wd];
    gemm(r.data(), w.data(), &mut tmp, rows, h, wd);
    // out = tmp · cᵀ
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for k in 0..wd {
                acc += tmp[i * wd + k] * c.data()[j * wd + k];
            }
            out[i * cols + j] = acc;
        }
    }
    Tensor::new(&[rows, cols], out)
}
