//! Raw slice kernels shared by the tape's forward and backward rules.

use super::NumericsError;

/// `c = op(a) · op(b) + beta · c` for row-major buffers.
///
/// `a` is `m×k` (stored `k×m` when `a_t`), `b` is `k×n` (stored `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub fn log_softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| ((v - max) / temperature).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v = (*v - max) / temperature - lse);
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot(a, b) / (na * nb))
    }
}

/// Permutes axes of a row-major buffer; returns the new shape and data.
pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let inner = rank - 1;
    let (inner_len, inner_stride) = (out_shape[inner], strides[inner]);
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        // advance the outer odometer
        let mut axis = inner;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Shape bookkeeping for one 3D cross-correlation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub c_in: usize,
    pub input: [usize; 3],
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub out: [usize; 3],
}

impl Conv3dGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self, NumericsError> {
        if input.len() != 4 || kernel.len() != 5 || kernel[1] != input[0] {
            return Err(NumericsError::Shape(format!("conv3d: input {input:?}, kernel {kernel:?}")));
        }
        if stride.contains(&0) {
            return Err(NumericsError::Config(format!("conv3d: zero stride {stride:?}")));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a + 1] + 2 * padding[a];
            if kernel[a + 2] > padded {
                return Err(NumericsError::Config(format!(
                    "conv3d: kernel {:?} larger than padded input {input:?} (padding {padding:?})",
                    &kernel[2..]
                )));
            }
            out[a] = (padded - kernel[a + 2]) / stride[a] + 1;
        }
        Ok(Self {
            c_in: input[0],
            input: [input[1], input[2], input[3]],
            c_out: kernel[0],
            kernel: [kernel[2], kernel[3], kernel[4]],
            stride,
            padding,
            out,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.out.iter().product()
    }
}

/// Walks every (patch row, output position) pair that reads an in-bounds input
/// element, calling `f(col_index, input_index)`.
#[inline]
fn for_each_tap(g: &Conv3dGeometry, mut f: impl FnMut(usize, usize)) {
    let [t, h, w] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [ot, oh, ow] = g.out;
    let positions = g.out_positions();
    let mut row = 0;
    for ci in 0..g.c_in {
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let row_base = row * positions;
                    for zt in 0..ot {
                        let it = (zt * g.stride[0] + dt) as isize - g.padding[0] as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for zh in 0..oh {
                            let ih = (zh * g.stride[1] + dh) as isize - g.padding[1] as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let in_base = ((ci * t + it as usize) * h + ih as usize) * w;
                            let col_base = row_base + (zt * oh + zh) * ow;
                            for zw in 0..ow {
                                let iw = (zw * g.stride[2] + dw) as isize - g.padding[2] as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                f(col_base + zw, in_base + iw as usize);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn im2col(input: &[f64], g: &Conv3dGeometry) -> Vec<f64> {
    let mut cols = vec![0.0; g.patch_len() * g.out_positions()];
    for_each_tap(g, |c, i| cols[c] = input[i]);
    cols
}

pub fn col2im(cols: &[f64], g: &Conv3dGeometry, input_grad: &mut [f64]) {
    for_each_tap(g, |c, i| input_grad[i] += cols[c]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (s, out) = permute(&data, &shape, &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], data[(i * 3 + j) * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn conv_geometry_output_dims() {
        let g = Conv3dGeometry::new(&[3, 12, 32, 32], &[8, 3, 3, 3, 3], [1, 2, 2], [1, 1, 1]).unwrap();
        assert_eq!(g.out, [12, 16, 16]);
        assert!(Conv3dGeometry::new(&[1, 2, 2, 2], &[1, 1, 3, 3, 3], [1, 1, 1], [0, 0, 0]).is_err());
        assert!(Conv3dGeometry::new(&[2, 2, 2, 2], &[1, 1, 1, 1, 1], [1, 1, 1], [0, 0, 0]).is_err());
    }
}
