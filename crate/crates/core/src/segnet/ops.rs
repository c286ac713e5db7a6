//! Layer primitives: same-padded convolution, 2x2 max-pool, nearest
//! upsampling, and channel concatenation, each with its adjoint.

use super::{ConvParams, Scalar};

/// One sample's activations: `channels` planes of `height` x `width`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// out[y][x] += a * src[y+dy][x+dx] over the in-bounds overlap.
#[inline]
fn axpy_shifted<T: Scalar>(
    out: &mut [T],
    src: &[T],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    a: T,
) {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy.max(0)) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx.max(0)) as usize;
    for y in y_lo..y_hi {
        let src_row = ((y as isize + dy) as usize) * w;
        let src_x = (x_lo as isize + dx) as usize;
        let o = &mut out[y * w + x_lo..y * w + x_hi];
        let s = &src[src_row + src_x..src_row + src_x + (x_hi - x_lo)];
        for (ov, sv) in o.iter_mut().zip(s) {
            *ov = *ov + a * *sv;
        }
    }
}

/// sum over the overlap of g[y][x] * src[y+dy][x+dx].
#[inline]
fn dot_shifted<T: Scalar>(g: &[T], src: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy.max(0)) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx.max(0)) as usize;
    let mut acc = T::zero();
    for y in y_lo..y_hi {
        let src_row = ((y as isize + dy) as usize) * w;
        let src_x = (x_lo as isize + dx) as usize;
        let gr = &g[y * w + x_lo..y * w + x_hi];
        let sr = &src[src_row + src_x..src_row + src_x + (x_hi - x_lo)];
        for (gv, sv) in gr.iter().zip(sr) {
            acc = acc + *gv * *sv;
        }
    }
    acc
}

/// Same-padded convolution (kernel size 1 or 3), optionally followed by ReLU.
pub fn conv_forward<T: Scalar>(p: &ConvParams<T>, input: &FeatureMap<T>, relu: bool) -> FeatureMap<T> {
    let (h, w) = (input.height, input.width);
    let k = p.shape.ksize;
    let center = (k / 2) as isize;
    debug_assert_eq!(input.channels, p.shape.in_channels);
    let mut out = FeatureMap::zeros(p.shape.out_channels, h, w);
    for o in 0..p.shape.out_channels {
        let b = p.bias[o];
        let plane = out.plane_mut(o);
        for v in plane.iter_mut() {
            *v = b;
        }
        for i in 0..p.shape.in_channels {
            let src = input.plane(i);
            let wbase = (o * p.shape.in_channels + i) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let a = p.weights[wbase + ky * k + kx];
                    axpy_shifted(plane, src, h, w, ky as isize - center, kx as isize - center, a);
                }
            }
        }
        if relu {
            for v in plane.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
    }
    out
}

/// Adjoint of the linear part of [`conv_forward`]. `grad_out` must already be
/// masked through the activation. Returns the input gradient alongside the
/// weight and bias gradients.
pub fn conv_backward<T: Scalar>(
    p: &ConvParams<T>,
    input: &FeatureMap<T>,
    grad_out: &FeatureMap<T>,
) -> (FeatureMap<T>, Vec<T>, Vec<T>) {
    let (h, w) = (input.height, input.width);
    let k = p.shape.ksize;
    let center = (k / 2) as isize;
    let mut grad_in = FeatureMap::zeros(input.channels, h, w);
    let mut grad_w = vec![T::zero(); p.weights.len()];
    let mut grad_b = vec![T::zero(); p.bias.len()];

    for o in 0..p.shape.out_channels {
        let g = grad_out.plane(o);
        let mut b_acc = T::zero();
        for &gv in g {
            b_acc = b_acc + gv;
        }
        grad_b[o] = b_acc;
        for i in 0..p.shape.in_channels {
            let src = input.plane(i);
            let gin = grad_in.plane_mut(i);
            let wbase = (o * p.shape.in_channels + i) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let dy = ky as isize - center;
                    let dx = kx as isize - center;
                    grad_w[wbase + ky * k + kx] = grad_w[wbase + ky * k + kx]
                        + dot_shifted(g, src, h, w, dy, dx);
                    // d input[y+dy][x+dx] accumulates w * g[y][x].
                    axpy_shifted(gin, g, h, w, -dy, -dx, p.weights[wbase + ky * k + kx]);
                }
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

/// Zero the gradient wherever the ReLU output was zero.
pub fn relu_backward<T: Scalar>(grad: &mut FeatureMap<T>, post_activation: &FeatureMap<T>) {
    for (g, &a) in grad.data.iter_mut().zip(&post_activation.data) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max-pool with stride 2. Also returns the flat input index of each
/// winning pixel; ties go to the first in (0,0),(0,1),(1,0),(1,1) scan order.
pub fn maxpool2<T: Scalar>(input: &FeatureMap<T>) -> (FeatureMap<T>, Vec<u32>) {
    let (h, w) = (input.height, input.width);
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = FeatureMap::zeros(input.channels, oh, ow);
    let mut argmax = vec![0u32; input.channels * oh * ow];
    for c in 0..input.channels {
        let src = input.plane(c);
        let base = c * h * w;
        let dst = out.plane_mut(c);
        for y in 0..oh {
            for x in 0..ow {
                let i00 = (2 * y) * w + 2 * x;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                let mut best_v = src[best];
                for &idx in &candidates[1..] {
                    if src[idx] > best_v {
                        best_v = src[idx];
                        best = idx;
                    }
                }
                dst[y * ow + x] = best_v;
                argmax[c * oh * ow + y * ow + x] = (base + best) as u32;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward<T: Scalar>(
    grad_out: &FeatureMap<T>,
    argmax: &[u32],
    in_shape: (usize, usize, usize),
) -> FeatureMap<T> {
    let (c, h, w) = in_shape;
    assert_eq!(grad_out.data.len(), argmax.len(), "pool gradient shape");
    let mut grad_in = FeatureMap::zeros(c, h, w);
    for (&g, &idx) in grad_out.data.iter().zip(argmax) {
        grad_in.data[idx as usize] = grad_in.data[idx as usize] + g;
    }
    grad_in
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<T: Scalar>(input: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = FeatureMap::zeros(input.channels, oh, ow);
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..oh {
            let src_row = (y / 2) * w;
            let dst_row = y * ow;
            for x in 0..ow {
                dst[dst_row + x] = src[src_row + x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: each source pixel collects its four children.
pub fn upsample2_backward<T: Scalar>(grad_out: &FeatureMap<T>) -> FeatureMap<T> {
    let (oh, ow) = (grad_out.height, grad_out.width);
    let (h, w) = (oh / 2, ow / 2);
    let mut grad_in = FeatureMap::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        let g = grad_out.plane(c);
        let dst = grad_in.plane_mut(c);
        for y in 0..oh {
            let dst_row = (y / 2) * w;
            let g_row = y * ow;
            for x in 0..ow {
                let d = &mut dst[dst_row + x / 2];
                *d = *d + g[g_row + x];
            }
        }
    }
    grad_in
}

/// Stack `a`'s channels before `b`'s.
pub fn concat<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    debug_assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

/// Undo [`concat`] on a gradient.
pub fn split_grad<T: Scalar>(grad: &FeatureMap<T>, a_channels: usize) -> (FeatureMap<T>, FeatureMap<T>) {
    let n = grad.height * grad.width;
    let a = FeatureMap {
        channels: a_channels,
        height: grad.height,
        width: grad.width,
        data: grad.data[..a_channels * n].to_vec(),
    };
    let b = FeatureMap {
        channels: grad.channels - a_channels,
        height: grad.height,
        width: grad.width,
        data: grad.data[a_channels * n..].to_vec(),
    };
    (a, b)
}

/// In-place logistic sigmoid.
pub fn sigmoid<T: Scalar>(map: &mut FeatureMap<T>) {
    for v in map.data.iter_mut() {
        *v = T::one() / (T::one() + (-*v).exp());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::LayerShape;

    fn conv_params(out_c: usize, in_c: usize, k: usize, weights: Vec<f64>, bias: Vec<f64>) -> ConvParams<f64> {
        ConvParams {
            shape: LayerShape {
                name: "t".into(),
                out_channels: out_c,
                in_channels: in_c,
                ksize: k,
            },
            weights,
            bias,
        }
    }

    #[test]
    fn conv3_matches_naive_loop() {
        // 1 in channel, 1 out channel, 4x4 input, fixed kernel.
        let weights = vec![0.5, -1.0, 2.0, 0.25, 1.0, -0.75, 0.0, 3.0, -2.0];
        let p = conv_params(1, 1, 3, weights.clone(), vec![0.1]);
        let input_data: Vec<f64> = (0..16).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let input = FeatureMap::from_vec(1, 4, 4, input_data.clone());
        let out = conv_forward(&p, &input, false);

        for y in 0..4usize {
            for x in 0..4usize {
                let mut expect = 0.1;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        let sx = x as isize + kx as isize - 1;
                        if (0..4).contains(&sy) && (0..4).contains(&sx) {
                            expect += weights[ky * 3 + kx] * input_data[sy as usize * 4 + sx as usize];
                        }
                    }
                }
                assert!((out.plane(0)[y * 4 + x] - expect).abs() < 1e-12, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn conv1_is_channel_mixing() {
        let p = conv_params(1, 2, 1, vec![2.0, -1.0], vec![0.5]);
        let input = FeatureMap::from_vec(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
        let out = conv_forward(&p, &input, false);
        assert_eq!(out.plane(0), &[2.0 - 10.0 + 0.5, 4.0 - 19.5, 6.0 - 29.5, 8.0 - 39.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let p = conv_params(1, 1, 1, vec![1.0], vec![0.0]);
        let input = FeatureMap::from_vec(1, 1, 4, vec![-1.0, 0.0, 2.0, -0.5]);
        let out = conv_forward(&p, &input, true);
        assert_eq!(out.plane(0), &[0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn maxpool_tracks_argmax_and_routes_gradient() {
        let input = FeatureMap::from_vec(
            1,
            4,
            4,
            vec![
                1.0, 2.0, 5.0, 5.0, //
                3.0, 0.0, 0.0, 0.0, //
                9.0, 8.0, 1.0, 2.0, //
                7.0, 6.0, 4.0, 3.0,
            ],
        );
        let (out, argmax) = maxpool2(&input);
        assert_eq!(out.plane(0), &[3.0, 5.0, 9.0, 4.0]);
        // Tie in the top-right window resolves to the first scanned cell.
        assert_eq!(argmax[1], 2);

        let grad_out = FeatureMap::from_vec(1, 2, 2, vec![1.0, 10.0, 100.0, 1000.0]);
        let grad_in = maxpool2_backward(&grad_out, &argmax, (1, 4, 4));
        assert_eq!(grad_in.plane(0)[4], 1.0); // 3.0 sits at flat index 4
        assert_eq!(grad_in.plane(0)[2], 10.0);
        assert_eq!(grad_in.plane(0)[8], 100.0);
        assert_eq!(grad_in.plane(0)[14], 1000.0);
        let total: f64 = grad_in.data.iter().sum();
        assert_eq!(total, 1111.0);
    }

    #[test]
    fn upsample_round_trip_adjoint() {
        let input = FeatureMap::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let up = upsample2(&input);
        assert_eq!(
            up.plane(0),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let grad = upsample2_backward(&up);
        assert_eq!(grad.plane(0), &[4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn adjoint_identities_at_unet_sizes() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rand_map = |c: usize, h: usize, w: usize| {
            let data = (0..c * h * w).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            FeatureMap::from_vec(c, h, w, data)
        };
        let dot = |a: &FeatureMap<f64>, b: &FeatureMap<f64>| -> f64 {
            a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
        };

        // Max-pool linearization at (4,16,16).
        let x = rand_map(4, 16, 16);
        let y = rand_map(4, 8, 8);
        let (out, arg) = maxpool2(&x);
        let xt = maxpool2_backward(&y, &arg, (4, 16, 16));
        assert!((dot(&out, &y) - dot(&x, &xt)).abs() < 1e-10);

        // Upsample at (8,8,8) -> (8,16,16).
        let x = rand_map(8, 8, 8);
        let y = rand_map(8, 16, 16);
        let up = upsample2(&x);
        let yt = upsample2_backward(&y);
        assert!((dot(&up, &y) - dot(&x, &yt)).abs() < 1e-10);

        // Convolution linear part at the enc1a shape: 4 -> 8 at 8x8.
        let shape = LayerShape {
            name: "t".into(),
            out_channels: 8,
            in_channels: 4,
            ksize: 3,
        };
        let x = rand_map(4, 8, 8);
        let y = rand_map(8, 8, 8);
        let weights = rand_map(1, 8, shape.weight_len() / 8).data;
        let p = ConvParams {
            shape,
            weights,
            bias: vec![0.0; 8],
        };
        let ax = conv_forward(&p, &x, false);
        let (xt, _, _) = conv_backward(&p, &x, &y);
        assert!((dot(&ax, &y) - dot(&x, &xt)).abs() < 1e-10);
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = FeatureMap::from_vec(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = FeatureMap::from_vec(1, 1, 2, vec![5.0, 6.0]);
        let c = concat(&a, &b);
        assert_eq!(c.channels, 3);
        let (ga, gb) = split_grad(&c, 2);
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }
}
