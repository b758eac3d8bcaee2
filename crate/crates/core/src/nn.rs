//! A small convolutional network engine with hand-written backpropagation.
//!
//! Tensors are `f64` in NCHW layout. Convolutions run as im2col followed by a
//! single matrix product per batch, which keeps the backward pass a pair of
//! matrix products plus a col2im scatter.

use ndarray::{s, Array1, Array2, Array4, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// 2-D convolution with square kernels and symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels, kernel, kernel)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// Parameter gradients of a [`Conv2d`] plus, optionally, the input gradient.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub input: Option<Array4<f64>>,
}

impl Conv2d {
    /// Kaiming-normal weights (fan-in, ReLU gain), zero bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight =
            Array4::from_shape_simple_fn((out_channels, in_channels, kernel, kernel), || {
                normal.sample(rng)
            });
        Self {
            weight,
            bias: Array1::zeros(out_channels),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> Array2<f64> {
        let (o, c, k, _) = self.weight.dim();
        self.weight
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, c * k * k))
            .expect("contiguous weight")
    }

    /// Returns the pre-activation output and the im2col buffer needed by
    /// [`Conv2d::backward`].
    pub fn forward(&self, input: ArrayView4<'_, f64>) -> (Array4<f64>, Array2<f64>) {
        let (n, _, h, w) = input.dim();
        let (oh, ow) = self.output_size(h, w);
        let cols = im2col(input, self.kernel(), self.stride, self.padding, oh, ow);
        let out_mat = self.weight_matrix().dot(&cols);
        let o = self.out_channels();
        let plane = oh * ow;
        let src = out_mat.as_slice().expect("standard layout");
        let mut out = vec![0.0; n * o * plane];
        for oc in 0..o {
            let b = self.bias[oc];
            let row = &src[oc * n * plane..(oc + 1) * n * plane];
            for bi in 0..n {
                let dst = &mut out[(bi * o + oc) * plane..(bi * o + oc + 1) * plane];
                for (d, s) in dst.iter_mut().zip(&row[bi * plane..(bi + 1) * plane]) {
                    *d = s + b;
                }
            }
        }
        (
            Array4::from_shape_vec((n, o, oh, ow), out).expect("shape"),
            cols,
        )
    }

    pub fn backward(
        &self,
        input_dim: (usize, usize, usize, usize),
        cols: &Array2<f64>,
        grad_output: ArrayView4<'_, f64>,
        need_input_grad: bool,
    ) -> ConvGrads {
        let (n, o, oh, ow) = grad_output.dim();
        let plane = oh * ow;
        let g = grad_output.as_standard_layout();
        let g = g.as_slice().expect("standard layout");
        let mut dmat = vec![0.0; o * n * plane];
        for bi in 0..n {
            for oc in 0..o {
                let src = &g[(bi * o + oc) * plane..(bi * o + oc + 1) * plane];
                dmat[oc * n * plane + bi * plane..oc * n * plane + (bi + 1) * plane]
                    .copy_from_slice(src);
            }
        }
        let dmat = Array2::from_shape_vec((o, n * plane), dmat).expect("shape");
        let dweight = dmat
            .dot(&cols.t())
            .into_shape_with_order(self.weight.dim())
            .expect("weight shape");
        let dbias = dmat.sum_axis(Axis(1));
        let input = need_input_grad.then(|| {
            let dcols = self.weight_matrix().t().dot(&dmat);
            col2im(
                &dcols,
                input_dim,
                self.kernel(),
                self.stride,
                self.padding,
                oh,
                ow,
            )
        });
        ConvGrads {
            weight: dweight,
            bias: dbias,
            input,
        }
    }
}

fn im2col(
    input: ArrayView4<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, c, h, w) = input.dim();
    let input = input.as_standard_layout();
    let x = input.as_slice().expect("standard layout");
    let ncols = n * oh * ow;
    let mut out = vec![0.0; c * k * k * ncols];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let row = &mut out[r * ncols..(r + 1) * ncols];
                for bi in 0..n {
                    let base = (bi * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &x[base + iy as usize * w..base + (iy as usize + 1) * w];
                        let dst = &mut row[(bi * oh + oy) * ow..(bi * oh + oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, ncols), out).expect("shape")
}

fn col2im(
    cols: &Array2<f64>,
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let ncols = n * oh * ow;
    let mut out = vec![0.0; n * c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let row = &src[r * ncols..(r + 1) * ncols];
                for bi in 0..n {
                    let base = (bi * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut out[base + iy as usize * w..base + (iy as usize + 1) * w];
                        let s = &row[(bi * oh + oy) * ow..(bi * oh + oy + 1) * ow];
                        for (ox, v) in s.iter().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), out).expect("shape")
}

/// Stack of conv + ReLU blocks. The final activation is the feature tensor
/// consumed by the head, the orthogonal loss and Grad-CAM.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Conv2d>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    input_dims: Vec<(usize, usize, usize, usize)>,
    cols: Vec<Array2<f64>>,
    outputs: Vec<Array4<f64>>,
}

impl BackboneTrace {
    /// Post-ReLU output of the last block.
    pub fn features(&self) -> &Array4<f64> {
        self.outputs.last().expect("backbone has layers")
    }
}

impl Backbone {
    pub fn forward(&self, input: ArrayView4<'_, f64>) -> BackboneTrace {
        let mut trace = BackboneTrace {
            input_dims: Vec::with_capacity(self.layers.len()),
            cols: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 {
                input.view()
            } else {
                trace.outputs[i - 1].view()
            };
            trace.input_dims.push(x.dim());
            let (mut y, cols) = layer.forward(x);
            y.mapv_inplace(|v| v.max(0.0));
            trace.cols.push(cols);
            trace.outputs.push(y);
        }
        trace
    }

    /// `(jump, offset)`: final feature cell `i` is centred on input pixel
    /// `offset + jump * i`.
    pub fn grid_geometry(&self) -> (f64, f64) {
        let (mut jump, mut offset) = (1.0, 0.0);
        for l in &self.layers {
            offset += jump * ((l.kernel() as f64 - 1.0) / 2.0 - l.padding as f64);
            jump *= l.stride as f64;
        }
        (jump, offset)
    }

    /// Backpropagates a gradient w.r.t. the final (post-ReLU) features.
    pub fn backward(&self, trace: &BackboneTrace, grad_features: Array4<f64>) -> Vec<ConvGrads> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_features;
        for i in (0..self.layers.len()).rev() {
            g.zip_mut_with(&trace.outputs[i], |d, &y| {
                if y <= 0.0 {
                    *d = 0.0;
                }
            });
            let cg = self.layers[i].backward(trace.input_dims[i], &trace.cols[i], g.view(), i > 0);
            if let Some(next) = cg.input.clone() {
                g = next;
            } else {
                g = Array4::zeros((0, 0, 0, 0));
            }
            grads.push(ConvGrads { input: None, ..cg });
        }
        grads.reverse();
        grads
    }
}

/// Global average pooling followed by a fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `(n_labels, n_k)`; row `i` is the class feature of output node `i`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub features: Array4<f64>,
}

impl Head {
    /// Uniform(-1/sqrt(n_k), 1/sqrt(n_k)) weights, zero bias.
    pub fn new(n_k: usize, n_labels: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (n_k as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        Self {
            weight: Array2::from_shape_simple_fn((n_labels, n_k), || uniform.sample(rng)),
            bias: Array1::zeros(n_labels),
        }
    }

    pub fn pool(features: ArrayView4<'_, f64>) -> Array2<f64> {
        let (n, c, h, w) = features.dim();
        let flat = features
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, c, h * w))
            .expect("contiguous features");
        flat.mean_axis(Axis(2)).expect("nonempty spatial grid")
    }

    pub fn logits(&self, pooled: &Array2<f64>) -> Array2<f64> {
        pooled.dot(&self.weight.t()) + &self.bias
    }

    pub fn forward(&self, features: ArrayView4<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let pooled = Self::pool(features);
        let logits = self.logits(&pooled);
        (pooled, logits)
    }

    pub fn backward(
        &self,
        pooled: &Array2<f64>,
        feature_dim: (usize, usize, usize, usize),
        grad_logits: &Array2<f64>,
    ) -> HeadGrads {
        let (n, c, h, w) = feature_dim;
        let dweight = grad_logits.t().dot(pooled);
        let dbias = grad_logits.sum_axis(Axis(0));
        let dpooled = grad_logits.dot(&self.weight) / (h * w) as f64;
        let mut dfeat = Array4::zeros((n, c, h, w));
        for bi in 0..n {
            for ci in 0..c {
                dfeat.slice_mut(s![bi, ci, .., ..]).fill(dpooled[[bi, ci]]);
            }
        }
        HeadGrads {
            weight: dweight,
            bias: dbias,
            features: dfeat,
        }
    }
}

/// One classification branch: backbone plus pooled linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub backbone: Backbone,
    pub head: Head,
}

/// Gradients of every parameter of a [`Branch`], in [`Branch::params_mut`] order.
#[derive(Debug, Clone)]
pub struct BranchGrads {
    pub convs: Vec<ConvGrads>,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl BranchGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in &self.convs {
            out.push(c.weight.as_slice().expect("standard layout"));
            out.push(c.bias.as_slice().expect("standard layout"));
        }
        out.push(self.head_weight.as_slice().expect("standard layout"));
        out.push(self.head_bias.as_slice().expect("standard layout"));
        out
    }
}

impl Branch {
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.backbone.layers.len() + 2);
        for c in &mut self.backbone.layers {
            out.push(c.weight.as_slice_mut().expect("standard layout"));
            out.push(c.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head.weight.as_slice_mut().expect("standard layout"));
        out.push(self.head.bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.backbone.layers.len() + 2);
        for c in &self.backbone.layers {
            out.push(c.weight.as_slice().expect("standard layout"));
            out.push(c.bias.as_slice().expect("standard layout"));
        }
        out.push(self.head.weight.as_slice().expect("standard layout"));
        out.push(self.head.bias.as_slice().expect("standard layout"));
        out
    }

    pub fn n_labels(&self) -> usize {
        self.head.weight.nrows()
    }

    pub fn feature_channels(&self) -> usize {
        self.head.weight.ncols()
    }
}

/// SGD with classical momentum (`v <- mu v + g; p <- p - lr v`).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(branch: &Branch, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: branch.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, branch: &mut Branch, grads: &BranchGrads, lr: f64) {
        let mu = self.momentum;
        for ((p, g), v) in branch
            .params_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.velocity.iter_mut())
        {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle for im2col.
    fn naive_conv(conv: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel();
        let p = conv.padding as isize;
        let mut out = Array4::zeros((n, conv.out_channels(), oh, ow));
        for b in 0..n {
            for o in 0..conv.out_channels() {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = conv.bias[o];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (y * conv.stride + ki) as isize - p;
                                    let ix = (xx * conv.stride + kj) as isize - p;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += conv.weight[[o, ci, ki, kj]]
                                            * x[[b, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[b, o, y, xx]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let mut conv = Conv2d::new(3, 4, 3, stride, &mut rng);
            conv.bias = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
            let x = Array4::from_shape_simple_fn((2, 3, 7, 6), || rng.random::<f64>() - 0.5);
            let (fast, _) = conv.forward(x.view());
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn branch_loss(branch: &Branch, x: &Array4<f64>, upstream: &Array2<f64>) -> f64 {
        let trace = branch.backbone.forward(x.view());
        let (_, logits) = branch.head.forward(trace.features().view());
        (&logits * upstream).sum()
    }

    #[test]
    fn branch_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut branch = Branch {
            backbone: Backbone {
                layers: vec![
                    Conv2d::new(2, 3, 3, 1, &mut rng),
                    Conv2d::new(3, 4, 3, 2, &mut rng),
                ],
            },
            head: Head::new(4, 3, &mut rng),
        };
        for l in &mut branch.backbone.layers {
            l.bias.fill(0.05);
        }
        let x = Array4::from_shape_simple_fn((2, 2, 6, 6), || rng.random::<f64>());
        let upstream = Array2::from_shape_simple_fn((2, 3), || rng.random::<f64>() - 0.5);

        let trace = branch.backbone.forward(x.view());
        let (pooled, _) = branch.head.forward(trace.features().view());
        let hg = branch
            .head
            .backward(&pooled, trace.features().dim(), &upstream);
        let convs = branch.backbone.backward(&trace, hg.features.clone());
        let grads = BranchGrads {
            convs,
            head_weight: hg.weight,
            head_bias: hg.bias,
        };
        let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

        let eps = 1e-6;
        for (pi, g) in analytic.iter().enumerate() {
            for (j, &ga) in g.iter().enumerate().step_by(3) {
                let orig = branch.params()[pi][j];
                branch.params_mut()[pi][j] = orig + eps;
                let plus = branch_loss(&branch, &x, &upstream);
                branch.params_mut()[pi][j] = orig - eps;
                let minus = branch_loss(&branch, &x, &upstream);
                branch.params_mut()[pi][j] = orig;
                let fd = (plus - minus) / (2.0 * eps);
                let denom = fd.abs().max(ga.abs()).max(1e-6);
                assert!(
                    (fd - ga).abs() / denom < 1e-4,
                    "param {pi}[{j}]: fd {fd} vs {ga}"
                );
            }
        }
    }
}
