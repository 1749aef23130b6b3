use super::{LayerGrads, LayerParams, Tensor4};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check<T: Scalar>(input: &Tensor4<T>, params: &LayerParams<T>) -> Result<()> {
    params.validate()?;
    if input.channels() != params.c_in {
        return Err(Error::dim(format!(
            "conv expects {} input channels, got {}",
            params.c_in,
            input.channels()
        )));
    }
    if input.height() == 0 || input.width() == 0 {
        return Err(Error::dim("conv input has an empty spatial dimension"));
    }
    Ok(())
}

/// Fills `col` with the zero-padded 3x3 neighbourhoods of one sample:
/// row `y * w + x`, column `(ky * 3 + kx) * c + ci`.
fn im2col<T: Scalar>(src: &[T], h: usize, w: usize, c: usize, col: &mut [T]) {
    let row_len = 9 * c;
    for y in 0..h {
        for x in 0..w {
            let row = &mut col[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    let dst = &mut row[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        dst.fill(T::zero());
                    } else {
                        let off = (sy as usize * w + sx as usize) * c;
                        dst.copy_from_slice(&src[off..off + c]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], h: usize, w: usize, c: usize, dst: &mut [T]) {
    let row_len = 9 * c;
    for y in 0..h {
        for x in 0..w {
            let row = &col[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let off = (sy as usize * w + sx as usize) * c;
                    let src = &row[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                    dst[off..off + c].iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero same-padding. Batch norm in `params` is
/// not applied here.
pub fn conv2d_forward<T: Scalar>(input: &Tensor4<T>, params: &LayerParams<T>) -> Result<Tensor4<T>> {
    check(input, params)?;
    let [b, h, w, c] = input.shape();
    let co = params.c_out;
    let hw = h * w;
    let mut out = Tensor4::zeros([b, h, w, co]);
    let mut col = vec![T::zero(); hw * 9 * c];
    for bi in 0..b {
        im2col(input.sample(bi), h, w, c, &mut col);
        let dst = out.sample_mut(bi);
        for px in dst.chunks_exact_mut(co) {
            px.copy_from_slice(&params.bias);
        }
        T::gemm(hw, 9 * c, co, &col, (9 * c, 1), &params.kernels, (co, 1), T::one(), dst, (co, 1));
    }
    Ok(out)
}

/// Returns the input gradient and the kernel/bias gradients of a convolution
/// given the gradient of its output.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    params: &LayerParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, LayerGrads<T>)> {
    check(input, params)?;
    let [b, h, w, c] = input.shape();
    let co = params.c_out;
    if grad_out.shape() != [b, h, w, co] {
        return Err(Error::dim(format!(
            "conv output gradient {:?} does not match {:?}",
            grad_out.shape(),
            [b, h, w, co]
        )));
    }
    let hw = h * w;
    let k = 9 * c;
    let mut grads = LayerGrads {
        kernels: vec![T::zero(); k * co],
        bias: vec![T::zero(); co],
        gamma: None,
        beta: None,
    };
    let mut grad_in = Tensor4::zeros(input.shape());
    let mut col = vec![T::zero(); hw * k];
    let mut gcol = vec![T::zero(); hw * k];
    for bi in 0..b {
        let g = grad_out.sample(bi);
        im2col(input.sample(bi), h, w, c, &mut col);
        // dK += col^T g
        T::gemm(k, hw, co, &col, (1, k), g, (co, 1), T::one(), &mut grads.kernels, (co, 1));
        // dcol = g K^T
        T::gemm(hw, co, k, g, (co, 1), &params.kernels, (1, co), T::zero(), &mut gcol, (k, 1));
        col2im_add(&gcol, h, w, c, grad_in.sample_mut(bi));
        for px in g.chunks_exact(co) {
            grads.bias.iter_mut().zip(px).for_each(|(a, v)| *a += *v);
        }
    }
    Ok((grad_in, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct summation over the padded window.
    fn conv_naive(input: &Tensor4<f64>, p: &LayerParams<f64>) -> Tensor4<f64> {
        let [b, h, w, c] = input.shape();
        Tensor4::from_fn([b, h, w, p.c_out], |[bi, y, x, co]| {
            let mut acc = p.bias[co];
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    let sx = x as isize + kx as isize - 1;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    for ci in 0..c {
                        acc += input.at([bi, sy as usize, sx as usize, ci])
                            * p.kernels[p.kernel_index(ky, kx, ci, co)];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn zero_kernels_give_zero_output() {
        let x = Tensor4::from_fn([2, 4, 5, 3], |[a, b, c, d]| (a + 2 * b + 3 * c + d) as f64);
        let p = LayerParams::zeros(3, 4, false);
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), [2, 4, 5, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor4::from_fn([1, 5, 4, 1], |[_, y, x, _]| (y * 7 + x) as f32 * 0.1);
        let mut p = LayerParams::zeros(1, 1, false);
        let i = p.kernel_index(1, 1, 0, 0);
        p.kernels[i] = 1.0;
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn all_ones_window_counts() {
        let x = Tensor4::filled([1, 3, 3, 1], 1.0f64);
        let mut p = LayerParams::zeros(1, 1, false);
        p.kernels.fill(1.0);
        let y = conv2d_forward(&x, &p).unwrap();
        let naive = conv_naive(&x, &p);
        assert_eq!(y, naive);
        assert_eq!(y.at([0, 1, 1, 0]), 9.0);
        for corner in [[0, 0], [0, 2], [2, 0], [2, 2]] {
            assert_eq!(y.at([0, corner[0], corner[1], 0]), 4.0);
        }
        for edge in [[0, 1], [1, 0], [1, 2], [2, 1]] {
            assert_eq!(y.at([0, edge[0], edge[1], 0]), 6.0);
        }
    }

    #[test]
    fn matches_naive_on_random_input() {
        let mut rng = crate::rng::from_seed(3);
        let x = Tensor4::new([2, 5, 6, 3], crate::rng::normal_vec(&mut rng, 180)).unwrap();
        let mut p = LayerParams::he_init(3, 2, false, &mut rng);
        p.bias = vec![0.3, -0.2];
        let y = conv2d_forward(&x, &p).unwrap();
        let n = conv_naive(&x, &p);
        for (a, b) in y.data().iter().zip(n.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let x = Tensor4::<f32>::zeros([1, 3, 3, 2]);
        let p = LayerParams::zeros(1, 1, false);
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn input_gradient_of_sum_counts_valid_taps() {
        // loss = sum(conv(x)) with identity kernel: every input pixel feeds
        // exactly one output through the centre tap.
        let x = Tensor4::filled([1, 4, 4, 1], 0.5f64);
        let mut p = LayerParams::zeros(1, 1, false);
        let i = p.kernel_index(1, 1, 0, 0);
        p.kernels[i] = 1.0;
        let g = Tensor4::filled([1, 4, 4, 1], 1.0);
        let (gx, _) = conv2d_backward(&x, &p, &g).unwrap();
        assert!(gx.data().iter().all(|&v| v == 1.0));

        // With an all-ones kernel each input pixel is seen by as many outputs
        // as it has in-bounds neighbours.
        p.kernels.fill(1.0);
        let (gx, _) = conv2d_backward(&x, &p, &g).unwrap();
        assert_eq!(gx.at([0, 0, 0, 0]), 4.0);
        assert_eq!(gx.at([0, 0, 1, 0]), 6.0);
        assert_eq!(gx.at([0, 1, 1, 0]), 9.0);
    }
}
