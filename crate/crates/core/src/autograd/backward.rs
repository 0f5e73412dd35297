//! Reverse-mode rules for each operation on the block forward paths.

use crate::error::{shape_err, Result};
use crate::sampling::{SamplePart, SampleRecord};
use crate::tensor::Tensor;

/// Gradients of `a · b` given the upstream gradient of the product.
pub fn backward_matmul(grad_out: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 || grad_out.shape() != [m, p] {
        return Err(shape_err!(
            "matmul backward: grad {:?} for {:?} x {:?}",
            grad_out.shape(),
            a.shape(),
            b.shape()
        ));
    }
    let grad_a = grad_out.matmul(&b.transpose2d()?)?;
    let grad_b = a.transpose2d()?.matmul(grad_out)?;
    Ok((grad_a, grad_b))
}

/// Softmax backward per row: `s ⊙ (g − ⟨g, s⟩)`.
pub fn backward_softmax_rows(grad_out: &Tensor, softmax_out: &Tensor) -> Result<Tensor> {
    let (_, k) = softmax_out.dims2()?;
    if grad_out.shape() != softmax_out.shape() {
        return Err(shape_err!(
            "softmax backward: grad {:?} vs output {:?}",
            grad_out.shape(),
            softmax_out.shape()
        ));
    }
    let mut out = Vec::with_capacity(grad_out.len());
    for (g, s) in grad_out.data().chunks(k).zip(softmax_out.data().chunks(k)) {
        let dot: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
        out.extend(g.iter().zip(s).map(|(gi, si)| si * (gi - dot)));
    }
    Ok(Tensor::wrap(grad_out.shape().to_vec(), out))
}

pub fn backward_rescale_rows(grad_out: &Tensor) -> Result<Tensor> {
    grad_out.rescale_rows()
}

/// Gradients of `weight · x + bias`: `(grad_x, grad_weight, grad_bias)`.
pub fn backward_linear(
    grad_out: &Tensor,
    x: &Tensor,
    weight: &Tensor,
    with_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (grad_weight, grad_x) = backward_matmul(grad_out, weight, x)?;
    let grad_bias = if with_bias {
        let (rows, n) = grad_out.dims2()?;
        let sums = grad_out.data().chunks(n).map(|r| r.iter().sum()).collect();
        Some(Tensor::wrap(vec![rows], sums))
    } else {
        None
    };
    Ok((grad_x, grad_weight, grad_bias))
}

/// Routes anchor gradients back to the sampled `C × N` source.
///
/// Average bins spread their gradient evenly over members, accumulating
/// where bins overlap; max bins send it to the recorded argmax; gathered
/// columns (random or identity sampling) accumulate on repeats.
pub fn backward_pool(grad_out: &Tensor, record: &SampleRecord) -> Result<Tensor> {
    let shape = record.shape;
    let (c, np, w) = (shape.channels, shape.positions(), shape.width);
    let s = record.anchors();
    if grad_out.shape() != [c, s] {
        return Err(shape_err!(
            "pool backward: grad {:?} does not match record [{c}, {s}]",
            grad_out.shape()
        ));
    }
    let g = grad_out.data();
    let mut grad_in = vec![0.0; c * np];
    let mut offset = 0;
    for part in &record.parts {
        let width = part.anchors();
        for ch in 0..c {
            let src = &g[ch * s + offset..ch * s + offset + width];
            let dst = &mut grad_in[ch * np..(ch + 1) * np];
            match part {
                SamplePart::Average { bins } => {
                    for (bin, &gv) in bins.iter().zip(src) {
                        let share = gv / bin.size() as f64;
                        for i in bin.members(w) {
                            dst[i] += share;
                        }
                    }
                }
                SamplePart::Max { bins, argmax } => {
                    for (b, &gv) in src.iter().enumerate() {
                        dst[argmax[ch * bins + b]] += gv;
                    }
                }
                SamplePart::Gather { indices } => {
                    for (&i, &gv) in indices.iter().zip(src) {
                        dst[i] += gv;
                    }
                }
            }
        }
        offset += width;
    }
    Ok(Tensor::wrap(vec![c, np], grad_in))
}

/// Splits a concatenation gradient at row `split`.
pub fn backward_concat(grad_out: &Tensor, split: usize) -> Result<(Tensor, Tensor)> {
    let lead = grad_out.shape()[0];
    if split == 0 || split >= lead {
        return Err(shape_err!(
            "concat backward: split {split} outside 1..{lead}"
        ));
    }
    let inner: usize = grad_out.shape()[1..].iter().product();
    let (a, b) = grad_out.data().split_at(split * inner);
    let mut shape_a = grad_out.shape().to_vec();
    let mut shape_b = shape_a.clone();
    shape_a[0] = split;
    shape_b[0] = lead - split;
    Ok((
        Tensor::wrap(shape_a, a.to_vec()),
        Tensor::wrap(shape_b, b.to_vec()),
    ))
}
