//! Bias-free U-Net on single-channel images.
//!
//! Activations are stored as `channels × (height·width)` matrices so every
//! convolution becomes one matrix product over an im2col buffer. No layer
//! carries an additive constant: convolutions are zero padded, pooling takes
//! maxima and upsampling is a linear transposed convolution, so the whole
//! network is positively homogeneous.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// Network weights. Convolution kernels are `out × (in·9)`, transposed
/// convolutions `(out·4) × in`, and the head `1 × base_channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    pub scales: usize,
    pub base_channels: usize,
    /// Adds the input to the head output.
    pub residual: bool,
    /// Inputs are divided by this before the first layer and outputs multiplied by it.
    pub input_scale: f64,
    pub convs: Vec<Array2<f64>>,
    pub ups: Vec<Array2<f64>>,
    pub head: Array2<f64>,
}

/// Gradients with the same layout as the weights of a [`Cnn`].
#[derive(Debug, Clone)]
pub struct CnnGrads {
    pub convs: Vec<Array2<f64>>,
    pub ups: Vec<Array2<f64>>,
    pub head: Array2<f64>,
}

struct ConvCache {
    col: Array2<f64>,
    out: Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
}

struct PoolCache {
    argmax: Vec<usize>,
    len: usize,
}

struct Cache {
    convs: Vec<ConvCache>,
    pools: Vec<PoolCache>,
    up_inputs: Vec<(Array2<f64>, usize, usize)>,
    features: Array2<f64>,
}

fn im2col(x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let c = x.nrows();
    let mut col = Array2::zeros((c * 9, h * w));
    for ch in 0..c {
        let src = x.row(ch);
        for ky in 0..3 {
            for kx in 0..3 {
                let mut dst = col.row_mut(ch * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x0 in 0..w {
                        let sx = x0 as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[y * w + x0] = src[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &Array2<f64>, c: usize, h: usize, w: usize) -> Array2<f64> {
    let mut x = Array2::zeros((c, h * w));
    for ch in 0..c {
        let mut dst = x.row_mut(ch);
        for ky in 0..3 {
            for kx in 0..3 {
                let src = col.row(ch * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x0 in 0..w {
                        let sx = x0 as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sy as usize * w + sx as usize] += src[y * w + x0];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_forward(x: &Array2<f64>, h: usize, w: usize, kernel: &Array2<f64>) -> ConvCache {
    let col = im2col(x, h, w);
    let mut out = kernel.dot(&col);
    out.mapv_inplace(|v| v.max(0.0));
    ConvCache {
        col,
        out,
        cin: x.nrows(),
        h,
        w,
    }
}

/// Returns (kernel gradient, input gradient) from the gradient at the ReLU output.
fn conv_backward(
    cache: &ConvCache,
    kernel: &Array2<f64>,
    mut grad: Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    grad.zip_mut_with(&cache.out, |g, &o| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
    let dk = grad.dot(&cache.col.t());
    let dcol = kernel.t().dot(&grad);
    (dk, col2im(&dcol, cache.cin, cache.h, cache.w))
}

fn pool_forward(x: &Array2<f64>, h: usize, w: usize) -> (Array2<f64>, PoolCache) {
    let (oh, ow) = (h / 2, w / 2);
    let c = x.nrows();
    let mut out = Array2::zeros((c, oh * ow));
    let mut argmax = vec![0; c * oh * ow];
    for ch in 0..c {
        let src = x.row(ch);
        for y in 0..oh {
            for x0 in 0..ow {
                let mut best = 2 * y * w + 2 * x0;
                for idx in [best + 1, best + w, best + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out[[ch, y * ow + x0]] = src[best];
                argmax[ch * oh * ow + y * ow + x0] = best;
            }
        }
    }
    (out, PoolCache { argmax, len: h * w })
}

fn pool_backward(cache: &PoolCache, grad: &Array2<f64>) -> Array2<f64> {
    let c = grad.nrows();
    let n = grad.ncols();
    let mut dx = Array2::zeros((c, cache.len));
    for ch in 0..c {
        for i in 0..n {
            dx[[ch, cache.argmax[ch * n + i]]] += grad[[ch, i]];
        }
    }
    dx
}

fn up_forward(x: &Array2<f64>, h: usize, w: usize, kernel: &Array2<f64>) -> Array2<f64> {
    let z = kernel.dot(x);
    let cout = kernel.nrows() / 4;
    let ow = 2 * w;
    let mut out = Array2::zeros((cout, 4 * h * w));
    for co in 0..cout {
        for a in 0..2 {
            for b in 0..2 {
                let src = z.row(co * 4 + a * 2 + b);
                for y in 0..h {
                    for x0 in 0..w {
                        out[[co, (2 * y + a) * ow + 2 * x0 + b]] = src[y * w + x0];
                    }
                }
            }
        }
    }
    out
}

fn up_backward(
    x: &Array2<f64>,
    h: usize,
    w: usize,
    kernel: &Array2<f64>,
    grad: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let cout = kernel.nrows() / 4;
    let ow = 2 * w;
    let mut dz = Array2::zeros((cout * 4, h * w));
    for co in 0..cout {
        for a in 0..2 {
            for b in 0..2 {
                let mut dst = dz.row_mut(co * 4 + a * 2 + b);
                for y in 0..h {
                    for x0 in 0..w {
                        dst[y * w + x0] = grad[[co, (2 * y + a) * ow + 2 * x0 + b]];
                    }
                }
            }
        }
    }
    (dz.dot(&x.t()), kernel.t().dot(&dz))
}

fn he(rows: usize, fan_in: usize, rng: &mut impl Rng) -> Array2<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, fan_in), |_| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

impl Cnn {
    pub fn new(scales: usize, base_channels: usize, residual: bool, rng: &mut impl Rng) -> Self {
        assert!(base_channels > 0, "need at least one channel");
        let ch = |l: usize| base_channels << l;
        let mut convs = Vec::new();
        for l in 0..=scales {
            let cin = if l == 0 { 1 } else { ch(l - 1) };
            convs.push(he(ch(l), cin * 9, rng));
            convs.push(he(ch(l), ch(l) * 9, rng));
        }
        let mut ups = Vec::new();
        for l in (0..scales).rev() {
            ups.push(he(ch(l) * 4, ch(l + 1), rng));
            convs.push(he(ch(l), 2 * ch(l) * 9, rng));
            convs.push(he(ch(l), ch(l) * 9, rng));
        }
        let head = he(1, base_channels, rng);
        Self {
            scales,
            base_channels,
            residual,
            input_scale: 1.0,
            convs,
            ups,
            head,
        }
    }

    /// Side lengths must be multiples of this.
    pub fn granularity(&self) -> usize {
        1 << self.scales
    }

    pub fn num_params(&self) -> usize {
        self.convs
            .iter()
            .chain(&self.ups)
            .map(|k| k.len())
            .sum::<usize>()
            + self.head.len()
    }

    fn forward_cached(&self, x: &Array2<f64>, h: usize, w: usize) -> (Array2<f64>, Cache) {
        let mut convs = Vec::new();
        let mut pools = Vec::new();
        let mut up_inputs = Vec::new();
        let mut skips = Vec::new();
        let (mut a, mut ch, mut cw) = (x.clone(), h, w);
        for l in 0..=self.scales {
            let c1 = conv_forward(&a, ch, cw, &self.convs[2 * l]);
            let c2 = conv_forward(&c1.out, ch, cw, &self.convs[2 * l + 1]);
            a = c2.out.clone();
            convs.push(c1);
            convs.push(c2);
            if l < self.scales {
                skips.push(a.clone());
                let (p, cache) = pool_forward(&a, ch, cw);
                pools.push(cache);
                a = p;
                ch /= 2;
                cw /= 2;
            }
        }
        let base = 2 * (self.scales + 1);
        for (j, l) in (0..self.scales).rev().enumerate() {
            let up = up_forward(&a, ch, cw, &self.ups[j]);
            up_inputs.push((a, ch, cw));
            ch *= 2;
            cw *= 2;
            let cat =
                ndarray::concatenate(Axis(0), &[up.view(), skips[l].view()]).expect("same width");
            let c1 = conv_forward(&cat, ch, cw, &self.convs[base + 2 * j]);
            let c2 = conv_forward(&c1.out, ch, cw, &self.convs[base + 2 * j + 1]);
            a = c2.out.clone();
            convs.push(c1);
            convs.push(c2);
        }
        let mut y = self.head.dot(&a);
        if self.residual {
            y += x;
        }
        (
            y,
            Cache {
                convs,
                pools,
                up_inputs,
                features: a,
            },
        )
    }

    fn backward(&self, cache: &Cache, dy: &Array2<f64>) -> CnnGrads {
        let mut dconvs: Vec<Array2<f64>> =
            self.convs.iter().map(|k| Array2::zeros(k.dim())).collect();
        let mut dups: Vec<Array2<f64>> = self.ups.iter().map(|k| Array2::zeros(k.dim())).collect();
        let dhead = dy.dot(&cache.features.t());
        let mut grad = self.head.t().dot(dy);

        let base = 2 * (self.scales + 1);
        let mut dskips: Vec<Option<Array2<f64>>> = vec![None; self.scales];
        for j in (0..self.scales).rev() {
            let l = self.scales - 1 - j;
            let i2 = base + 2 * j + 1;
            let (dk, g) = conv_backward(&cache.convs[i2], &self.convs[i2], grad);
            dconvs[i2] = dk;
            let (dk, g) = conv_backward(&cache.convs[i2 - 1], &self.convs[i2 - 1], g);
            dconvs[i2 - 1] = dk;
            let c = self.base_channels << l;
            dskips[l] = Some(g.slice(s![c.., ..]).to_owned());
            let (x, h, w) = &cache.up_inputs[j];
            let (dk, g) = up_backward(x, *h, *w, &self.ups[j], &g.slice(s![..c, ..]).to_owned());
            dups[j] = dk;
            grad = g;
        }
        for l in (0..=self.scales).rev() {
            if l < self.scales {
                grad = pool_backward(&cache.pools[l], &grad);
                grad += dskips[l].as_ref().expect("decoder visited every level");
            }
            let (dk, g) = conv_backward(&cache.convs[2 * l + 1], &self.convs[2 * l + 1], grad);
            dconvs[2 * l + 1] = dk;
            let (dk, g) = conv_backward(&cache.convs[2 * l], &self.convs[2 * l], g);
            dconvs[2 * l] = dk;
            grad = g;
        }
        CnnGrads {
            convs: dconvs,
            ups: dups,
            head: dhead,
        }
    }

    /// Forward pass on an `h × w` image (row-major) with sides divisible by
    /// [`Cnn::granularity`].
    pub fn forward(&self, image: &[f64], h: usize, w: usize) -> Vec<f64> {
        assert_eq!(image.len(), h * w);
        assert!(h.is_multiple_of(self.granularity()) && w.is_multiple_of(self.granularity()));
        let x = Array2::from_shape_vec(
            (1, h * w),
            image.iter().map(|v| v / self.input_scale).collect(),
        )
        .expect("1 x hw");
        let (y, _) = self.forward_cached(&x, h, w);
        y.iter().map(|v| v * self.input_scale).collect()
    }

    /// Mean squared error against `target` in scaled units, with gradients.
    pub fn loss_and_grad(
        &self,
        input: &[f64],
        target: &[f64],
        h: usize,
        w: usize,
    ) -> (f64, CnnGrads) {
        let s = self.input_scale;
        let x = Array2::from_shape_vec((1, h * w), input.iter().map(|v| v / s).collect())
            .expect("1 x hw");
        let (y, cache) = self.forward_cached(&x, h, w);
        let n = (h * w) as f64;
        let mut dy = y;
        let mut loss = 0.0;
        for (d, &t) in dy.iter_mut().zip(target) {
            let diff = *d - t / s;
            loss += diff * diff;
            *d = 2.0 * diff / n;
        }
        (loss / n, self.backward(&cache, &dy))
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.convs
            .iter()
            .chain(&self.ups)
            .chain(std::iter::once(&self.head))
            .map(|k| k.len())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.convs
            .iter_mut()
            .chain(self.ups.iter_mut())
            .chain(std::iter::once(&mut self.head))
            .map(|k| k.as_slice_mut().expect("standard layout"))
            .collect()
    }
}

impl CnnGrads {
    pub fn zeros_like(net: &Cnn) -> Self {
        Self {
            convs: net.convs.iter().map(|k| Array2::zeros(k.dim())).collect(),
            ups: net.ups.iter().map(|k| Array2::zeros(k.dim())).collect(),
            head: Array2::zeros(net.head.dim()),
        }
    }

    pub fn add_scaled(&mut self, other: &CnnGrads, factor: f64) {
        for (a, b) in self
            .convs
            .iter_mut()
            .chain(self.ups.iter_mut())
            .chain(std::iter::once(&mut self.head))
            .zip(
                other
                    .convs
                    .iter()
                    .chain(&other.ups)
                    .chain(std::iter::once(&other.head)),
            )
        {
            a.scaled_add(factor, b);
        }
    }

    pub fn as_slices(&self) -> Vec<&[f64]> {
        self.convs
            .iter()
            .chain(&self.ups)
            .chain(std::iter::once(&self.head))
            .map(|k| k.as_slice().expect("standard layout"))
            .collect()
    }
}
