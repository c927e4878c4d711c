//! Forward and backward kernels for the layers used by the dense
//! encoder/decoder networks. All kernels operate on single-sample tensors.

use crate::scalar::{sigmoid, Real};
use crate::tensor::Tensor;

/// Kernel offsets in weight-storage order (x fastest), relative to the center.
pub fn kernel_offsets(kernel: [usize; 3]) -> Vec<[isize; 3]> {
    let pad = kernel.map(|k| (k / 2) as isize);
    let mut out = Vec::with_capacity(kernel.iter().product());
    for kz in 0..kernel[2] {
        for ky in 0..kernel[1] {
            for kx in 0..kernel[0] {
                out.push([kx as isize - pad[0], ky as isize - pad[1], kz as isize - pad[2]]);
            }
        }
    }
    out
}

/// Upper bound on the scratch matrix built per chunk, in elements.
const COLUMN_BUDGET: usize = 1 << 22;

/// Row layout of a gathered column matrix.
#[derive(Clone, Copy)]
enum RowOrder {
    /// row = offset · channels + channel
    OffsetMajor,
    /// row = channel · offsets + offset
    ChannelMajor,
}

/// Gathers `dst[row(o, c), q] = src[c, p_q + sign·offsets[o]]` for the
/// positions `p_q` of x-rows `rows` (zero outside the grid).
fn gather_columns<T: Real>(
    src: &[T],
    channels: usize,
    spatial: [usize; 3],
    offsets: &[[isize; 3]],
    sign: isize,
    rows: std::ops::Range<usize>,
    order: RowOrder,
    dst: &mut [T],
) {
    let [nx, ny, nz] = spatial;
    let n = nx * ny * nz;
    let width = rows.len() * nx;
    let k = offsets.len();
    for (o, off) in offsets.iter().enumerate() {
        let [ox, oy, oz] = off.map(|v| v * sign);
        let x_lo = (-ox).clamp(0, nx as isize) as usize;
        let x_hi = (nx as isize - ox).clamp(0, nx as isize) as usize;
        for c in 0..channels {
            let r = match order {
                RowOrder::OffsetMajor => o * channels + c,
                RowOrder::ChannelMajor => c * k + o,
            };
            let d_row = &mut dst[r * width..(r + 1) * width];
            let s_c = &src[c * n..(c + 1) * n];
            for (q, row) in rows.clone().enumerate() {
                let (y, z) = (row % ny, row / ny);
                let (sy, sz) = (y as isize + oy, z as isize + oz);
                let d = &mut d_row[q * nx..(q + 1) * nx];
                if sy < 0 || sz < 0 || sy >= ny as isize || sz >= nz as isize || x_lo >= x_hi {
                    d.fill(T::zero());
                    continue;
                }
                let base = nx * (sy as usize + ny * sz as usize);
                d[..x_lo].fill(T::zero());
                d[x_hi..].fill(T::zero());
                let sx0 = (x_lo as isize + ox) as usize;
                d[x_lo..x_hi].copy_from_slice(&s_c[base + sx0..base + sx0 + (x_hi - x_lo)]);
            }
        }
    }
}

/// Splits the `ny·nz` x-rows into chunks whose gathered matrix of `height`
/// rows stays within [`COLUMN_BUDGET`].
fn row_chunks(spatial: [usize; 3], height: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let total = spatial[1] * spatial[2];
    let per = (COLUMN_BUDGET / (height * spatial[0]).max(1)).clamp(1, total.max(1));
    (0..total).step_by(per).map(move |s| s..(s + per).min(total))
}

/// "Same"-padded 3D convolution with odd kernel sizes.
///
/// `weight` is laid out `[out_channel][offset][in_channel]`.
pub fn conv3d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    kernel: [usize; 3],
    out_channels: usize,
) -> Tensor<T> {
    let cin = input.channels();
    let spatial = input.spatial();
    let n = input.voxels();
    let offsets = kernel_offsets(kernel);
    let kdim = offsets.len() * cin;
    assert_eq!(weight.len(), out_channels * kdim);
    assert_eq!(bias.len(), out_channels);
    let mut out = Tensor::zeros(out_channels, spatial);
    for (co, &b) in bias.iter().enumerate() {
        out.channel_mut(co).fill(b);
    }
    if offsets.len() == 1 {
        T::gemm(out_channels, cin, n, T::one(), weight, cin as isize, 1, input.data(), n as isize, 1, T::one(), out.data_mut(), n as isize, 1);
        return out;
    }
    let mut cols = Vec::new();
    for rows in row_chunks(spatial, kdim) {
        let width = rows.len() * spatial[0];
        let start = rows.start * spatial[0];
        cols.resize(kdim * width, T::zero());
        gather_columns(input.data(), cin, spatial, &offsets, 1, rows, RowOrder::OffsetMajor, &mut cols);
        T::gemm(
            out_channels,
            kdim,
            width,
            T::one(),
            weight,
            kdim as isize,
            1,
            &cols,
            width as isize,
            1,
            T::one(),
            &mut out.data_mut()[start..],
            n as isize,
            1,
        );
    }
    out
}

/// Accumulates weight/bias gradients and, when `grad_input` is given, the
/// input gradient of [`conv3d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    kernel: [usize; 3],
    out_channels: usize,
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    grad_input: Option<&mut Tensor<T>>,
) {
    let cin = input.channels();
    let spatial = input.spatial();
    let n = input.voxels();
    let offsets = kernel_offsets(kernel);
    let kdim = offsets.len() * cin;
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out.channel(co).iter().copied().sum::<T>();
    }
    if offsets.len() == 1 {
        // dW = dOut · Xᵀ, dX += Wᵀ · dOut
        T::gemm(out_channels, n, cin, T::one(), grad_out.data(), n as isize, 1, input.data(), 1, n as isize, T::one(), grad_weight, cin as isize, 1);
        if let Some(gi) = grad_input {
            T::gemm(cin, out_channels, n, T::one(), weight, 1, cin as isize, grad_out.data(), n as isize, 1, T::one(), gi.data_mut(), n as isize, 1);
        }
        return;
    }
    let mut cols = Vec::new();
    for rows in row_chunks(spatial, kdim) {
        let width = rows.len() * spatial[0];
        let start = rows.start * spatial[0];
        cols.resize(kdim * width, T::zero());
        gather_columns(input.data(), cin, spatial, &offsets, 1, rows, RowOrder::OffsetMajor, &mut cols);
        // dW += dOut[:, chunk] · colsᵀ
        T::gemm(
            out_channels,
            width,
            kdim,
            T::one(),
            &grad_out.data()[start..],
            n as isize,
            1,
            &cols,
            1,
            width as isize,
            T::one(),
            grad_weight,
            kdim as isize,
            1,
        );
    }
    if let Some(gi) = grad_input {
        // dX[ci, p] = Σ_{co,o} W[co, o, ci] · dOut[co, p - offset_o]
        let kout = offsets.len() * out_channels;
        for rows in row_chunks(spatial, kout) {
            let width = rows.len() * spatial[0];
            let start = rows.start * spatial[0];
            cols.resize(kout * width, T::zero());
            gather_columns(grad_out.data(), out_channels, spatial, &offsets, -1, rows, RowOrder::ChannelMajor, &mut cols);
            T::gemm(
                cin,
                kout,
                width,
                T::one(),
                weight,
                1,
                cin as isize,
                &cols,
                width as isize,
                1,
                T::one(),
                &mut gi.data_mut()[start..],
                n as isize,
                1,
            );
        }
    }
}

fn check_divisible(spatial: [usize; 3], factors: [usize; 3]) {
    for a in 0..3 {
        assert!(
            factors[a] >= 1 && spatial[a] % factors[a] == 0,
            "axis {a}: extent {} not divisible by {}",
            spatial[a],
            factors[a]
        );
    }
}

/// Non-overlapping max pooling; returns the pooled tensor and, per output
/// element, the flat input index of its maximum.
pub fn max_pool_forward<T: Real>(input: &Tensor<T>, factors: [usize; 3]) -> (Tensor<T>, Vec<u32>) {
    let spatial = input.spatial();
    check_divisible(spatial, factors);
    let out_sp = [spatial[0] / factors[0], spatial[1] / factors[1], spatial[2] / factors[2]];
    let mut out = Tensor::zeros(input.channels(), out_sp);
    let mut arg = vec![0u32; out.len()];
    let src = input.data();
    let mut o = 0;
    for c in 0..input.channels() {
        for z in 0..out_sp[2] {
            for y in 0..out_sp[1] {
                for x in 0..out_sp[0] {
                    let mut best_i = input.index(c, x * factors[0], y * factors[1], z * factors[2]);
                    let mut best = src[best_i];
                    for dz in 0..factors[2] {
                        for dy in 0..factors[1] {
                            for dx in 0..factors[0] {
                                let i = input.index(c, x * factors[0] + dx, y * factors[1] + dy, z * factors[2] + dz);
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.data_mut()[o] = best;
                    arg[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Real>(grad_out: &Tensor<T>, argmax: &[u32], grad_input: &mut Tensor<T>) {
    let gi = grad_input.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        gi[i as usize] += g;
    }
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample_forward<T: Real>(input: &Tensor<T>, factors: [usize; 3]) -> Tensor<T> {
    let sp = input.spatial();
    let out_sp = [sp[0] * factors[0], sp[1] * factors[1], sp[2] * factors[2]];
    let mut out = Tensor::zeros(input.channels(), out_sp);
    let mut o = 0;
    for c in 0..input.channels() {
        for z in 0..out_sp[2] {
            for y in 0..out_sp[1] {
                let row = input.index(c, 0, y / factors[1], z / factors[2]);
                for x in 0..out_sp[0] {
                    out.data_mut()[o] = input.data()[row + x / factors[0]];
                    o += 1;
                }
            }
        }
    }
    out
}

pub fn upsample_backward<T: Real>(grad_out: &Tensor<T>, factors: [usize; 3], grad_input: &mut Tensor<T>) {
    let out_sp = grad_out.spatial();
    let mut o = 0;
    for c in 0..grad_out.channels() {
        for z in 0..out_sp[2] {
            for y in 0..out_sp[1] {
                let row = grad_input.index(c, 0, y / factors[1], z / factors[2]);
                for x in 0..out_sp[0] {
                    grad_input.data_mut()[row + x / factors[0]] += grad_out.data()[o];
                    o += 1;
                }
            }
        }
    }
}

/// Transposed convolution whose kernel equals its stride (non-overlapping),
/// weight layout `[sub_position][out_channel][in_channel]`.
pub fn up_conv_forward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    factors: [usize; 3],
    out_channels: usize,
) -> Tensor<T> {
    let cin = input.channels();
    let sp = input.spatial();
    let n = input.voxels();
    let out_sp = [sp[0] * factors[0], sp[1] * factors[1], sp[2] * factors[2]];
    let mut out = Tensor::zeros(out_channels, out_sp);
    let mut tmp = vec![T::zero(); out_channels * n];
    let subs = factors.iter().product::<usize>();
    assert_eq!(weight.len(), subs * out_channels * cin);
    for s in 0..subs {
        let (a, b, c) = (s % factors[0], (s / factors[0]) % factors[1], s / (factors[0] * factors[1]));
        let w = &weight[s * out_channels * cin..(s + 1) * out_channels * cin];
        T::gemm(out_channels, cin, n, T::one(), w, cin as isize, 1, input.data(), n as isize, 1, T::zero(), &mut tmp, n as isize, 1);
        for co in 0..out_channels {
            for z in 0..sp[2] {
                for y in 0..sp[1] {
                    for x in 0..sp[0] {
                        let v = tmp[co * n + x + sp[0] * (y + sp[1] * z)] + bias[co];
                        let i = out.index(co, x * factors[0] + a, y * factors[1] + b, z * factors[2] + c);
                        out.data_mut()[i] = v;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn up_conv_backward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    factors: [usize; 3],
    out_channels: usize,
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    grad_input: Option<&mut Tensor<T>>,
) {
    let cin = input.channels();
    let sp = input.spatial();
    let n = input.voxels();
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out.channel(co).iter().copied().sum::<T>();
    }
    let subs = factors.iter().product::<usize>();
    let mut tmp = vec![T::zero(); out_channels * n];
    let mut gi_acc = grad_input;
    for s in 0..subs {
        let (a, b, c) = (s % factors[0], (s / factors[0]) % factors[1], s / (factors[0] * factors[1]));
        for co in 0..out_channels {
            for z in 0..sp[2] {
                for y in 0..sp[1] {
                    for x in 0..sp[0] {
                        let i = grad_out.index(co, x * factors[0] + a, y * factors[1] + b, z * factors[2] + c);
                        tmp[co * n + x + sp[0] * (y + sp[1] * z)] = grad_out.data()[i];
                    }
                }
            }
        }
        let wsz = out_channels * cin;
        T::gemm(out_channels, n, cin, T::one(), &tmp, n as isize, 1, input.data(), 1, n as isize, T::one(), &mut grad_weight[s * wsz..(s + 1) * wsz], cin as isize, 1);
        if let Some(gi) = gi_acc.as_deref_mut() {
            T::gemm(cin, out_channels, n, T::one(), &weight[s * wsz..(s + 1) * wsz], 1, cin as isize, &tmp, n as isize, 1, T::one(), gi.data_mut(), n as isize, 1);
        }
    }
}

pub fn concat_forward<T: Real>(inputs: &[&Tensor<T>]) -> Tensor<T> {
    let spatial = inputs[0].spatial();
    let mut data = Vec::with_capacity(inputs.iter().map(|t| t.len()).sum());
    let mut channels = 0;
    for t in inputs {
        assert_eq!(t.spatial(), spatial, "concat of mismatched spatial extents");
        data.extend_from_slice(t.data());
        channels += t.channels();
    }
    Tensor::from_vec(channels, spatial, data)
}

pub fn swish_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(crate::scalar::swish)
}

pub fn swish_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>, grad_input: &mut Tensor<T>) {
    for ((gi, &x), &g) in grad_input.data_mut().iter_mut().zip(input.data()).zip(grad_out.data()) {
        let s = sigmoid(x);
        *gi += crate::scalar::flush_subnormal(g * (s + x * s * (T::one() - s)));
    }
}

/// Sigmoid clamped to `[ε, 1-ε]` so outputs stay strictly inside (0, 1).
pub fn sigmoid_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let eps = T::epsilon();
    input.map(|x| sigmoid(x).max(eps).min(T::one() - eps))
}

pub fn sigmoid_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>, grad_input: &mut Tensor<T>) {
    for ((gi, &y), &g) in grad_input.data_mut().iter_mut().zip(output.data()).zip(grad_out.data()) {
        *gi += g * y * (T::one() - y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, sp: [usize; 3]) -> Tensor<f64> {
        let n = c * sp.iter().product::<usize>();
        Tensor::from_vec(c, sp, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, w: &[f64], b: &[f64], kernel: [usize; 3], cout: usize) -> Tensor<f64> {
        let sp = x.spatial();
        let cin = x.channels();
        let offs = kernel_offsets(kernel);
        let mut out = Tensor::zeros(cout, sp);
        for co in 0..cout {
            for z in 0..sp[2] {
                for y in 0..sp[1] {
                    for xx in 0..sp[0] {
                        let mut acc = b[co];
                        for (k, o) in offs.iter().enumerate() {
                            let (px, py, pz) = (xx as isize + o[0], y as isize + o[1], z as isize + o[2]);
                            if px < 0 || py < 0 || pz < 0 || px >= sp[0] as isize || py >= sp[1] as isize || pz >= sp[2] as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += w[(co * offs.len() + k) * cin + ci] * x.get(ci, px as usize, py as usize, pz as usize);
                            }
                        }
                        let i = out.index(co, xx, y, z);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 3, [5, 4, 3]);
        let w: Vec<f64> = (0..27 * 2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.25, -0.5];
        let fast = conv3d_forward(&x, &w, &b, [3, 3, 3], 2);
        let slow = naive_conv(&x, &w, &b, [3, 3, 3], 2);
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    fn loss_of(t: &Tensor<f64>, r: &[f64]) -> f64 {
        t.data().iter().zip(r).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, 2, [4, 3, 3]);
        let cout = 3;
        let mut w: Vec<f64> = (0..27 * cout * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.1, 0.2, 0.3];
        let y = conv3d_forward(&x, &w, &b, [3, 3, 3], cout);
        let r: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Tensor::from_vec(cout, y.spatial(), r.clone());
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; cout];
        let mut gx = Tensor::zeros(2, x.spatial());
        conv3d_backward(&x, &w, [3, 3, 3], cout, &g, &mut gw, &mut gb, Some(&mut gx));
        let h = 1e-6;
        for i in (0..w.len()).step_by(7) {
            let orig = w[i];
            w[i] = orig + h;
            let lp = loss_of(&conv3d_forward(&x, &w, &b, [3, 3, 3], cout), &r);
            w[i] = orig - h;
            let lm = loss_of(&conv3d_forward(&x, &w, &b, [3, 3, 3], cout), &r);
            w[i] = orig;
            assert!(((lp - lm) / (2.0 * h) - gw[i]).abs() < 1e-6);
        }
        let mut xp = x.clone();
        for i in (0..x.len()).step_by(5) {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + h;
            let lp = loss_of(&conv3d_forward(&xp, &w, &b, [3, 3, 3], cout), &r);
            xp.data_mut()[i] = orig - h;
            let lm = loss_of(&conv3d_forward(&xp, &w, &b, [3, 3, 3], cout), &r);
            xp.data_mut()[i] = orig;
            assert!(((lp - lm) / (2.0 * h) - gx.data()[i]).abs() < 1e-6);
        }
        for (co, gbv) in gb.iter().enumerate() {
            let expect: f64 = g.channel(co).iter().sum();
            assert!((gbv - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn up_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 2, [2, 2, 2]);
        let f = [2, 2, 1];
        let cout = 3;
        let mut w: Vec<f64> = (0..4 * cout * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.0, 0.5, -0.5];
        let y = up_conv_forward(&x, &w, &b, f, cout);
        assert_eq!(y.spatial(), [4, 4, 2]);
        let r: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Tensor::from_vec(cout, y.spatial(), r.clone());
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; cout];
        let mut gx = Tensor::zeros(2, x.spatial());
        up_conv_backward(&x, &w, f, cout, &g, &mut gw, &mut gb, Some(&mut gx));
        let h = 1e-6;
        for i in 0..w.len() {
            let orig = w[i];
            w[i] = orig + h;
            let lp = loss_of(&up_conv_forward(&x, &w, &b, f, cout), &r);
            w[i] = orig - h;
            let lm = loss_of(&up_conv_forward(&x, &w, &b, f, cout), &r);
            w[i] = orig;
            assert!(((lp - lm) / (2.0 * h) - gw[i]).abs() < 1e-6);
        }
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + h;
            let lp = loss_of(&up_conv_forward(&xp, &w, &b, f, cout), &r);
            xp.data_mut()[i] = orig - h;
            let lm = loss_of(&up_conv_forward(&xp, &w, &b, f, cout), &r);
            xp.data_mut()[i] = orig;
            assert!(((lp - lm) / (2.0 * h) - gx.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_and_upsample_shapes_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, 2, [4, 4, 2]);
        let (y, arg) = max_pool_forward(&x, [2, 2, 1]);
        assert_eq!(y.spatial(), [2, 2, 2]);
        for (o, &i) in y.data().iter().zip(&arg) {
            assert_eq!(*o, x.data()[i as usize]);
        }
        let g = Tensor::filled(2, y.spatial(), 1.0);
        let mut gx = Tensor::zeros(2, x.spatial());
        max_pool_backward(&g, &arg, &mut gx);
        assert_eq!(gx.data().iter().sum::<f64>(), y.len() as f64);

        let u = upsample_forward(&y, [2, 2, 1]);
        assert_eq!(u.spatial(), [4, 4, 2]);
        assert_eq!(u.get(1, 3, 2, 1), y.get(1, 1, 1, 1));
        let mut gy = Tensor::zeros(2, y.spatial());
        upsample_backward(&Tensor::filled(2, [4, 4, 2], 1.0), [2, 2, 1], &mut gy);
        assert!(gy.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn sigmoid_stays_inside_open_interval() {
        let t = Tensor::<f32>::from_vec(1, [3, 1, 1], vec![-200.0, 0.0, 200.0]);
        let s = sigmoid_forward(&t);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(s.data()[1], 0.5);
    }
}
