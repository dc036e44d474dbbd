//! Small convolutional encoder/decoder with hand-written backward passes.
//!
//! Tensors are channels-last (`[batch, height, width, channels]`). The
//! encoder maps pixels from `[0, 1]` to `[-1, 1]`, then applies stride-2
//! 3×3 convolutions with ReLU between them; the last one is linear and emits
//! the `d`-channel feature map. The decoder mirrors it with stride-2 4×4
//! transposed convolutions (ReLU after each), a 1×1 convolution to RGB and a
//! sigmoid.

use nalgebra::{DMatrix, RowDVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm_acc, gemm_nt_acc, gemm_tn_acc, sample_normal, RngStream, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    /// Feature / code dimension `d`.
    pub dim: usize,
    /// Hidden encoder widths; the encoder has `enc_hidden.len() + 1` stride-2 convs.
    pub enc_hidden: Vec<usize>,
    /// Decoder widths, one per transposed conv; must have `enc_hidden.len() + 1` entries.
    pub dec_hidden: Vec<usize>,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            enc_hidden: vec![32],
            dec_hidden: vec![32, 16],
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if self.dec_hidden.len() != self.enc_hidden.len() + 1 {
            return Err(Error::config(format!(
                "decoder needs {} widths to mirror the encoder, got {}",
                self.enc_hidden.len() + 1,
                self.dec_hidden.len()
            )));
        }
        if self.enc_hidden.iter().chain(&self.dec_hidden).any(|&c| c == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }

    /// Total downsampling factor.
    pub fn factor(&self) -> usize {
        1 << (self.enc_hidden.len() + 1)
    }
}

/// Sliding-window geometry between a large map `h × w × c` and the
/// `ho × wo` grid of window positions.
#[derive(Clone, Copy, Debug)]
struct Geom {
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(h: usize, w: usize, c: usize, k: usize, s: usize, p: usize) -> Self {
        Self {
            h,
            w,
            c,
            k,
            s,
            p,
            ho: (h + 2 * p - k) / s + 1,
            wo: (w + 2 * p - k) / s + 1,
        }
    }

    fn col_width(&self) -> usize {
        self.k * self.k * self.c
    }

    /// Calls `f(col_offset, pixel_offset)` for every in-bounds tap of window `(oy, ox)`.
    #[inline]
    fn for_taps(&self, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
        for ky in 0..self.k {
            let iy = (oy * self.s + ky) as isize - self.p as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            for kx in 0..self.k {
                let ix = (ox * self.s + kx) as isize - self.p as isize;
                if ix < 0 || ix >= self.w as isize {
                    continue;
                }
                let col = (ky * self.k + kx) * self.c;
                let pix = (iy as usize * self.w + ix as usize) * self.c;
                f(col, pix);
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], batch: usize, g: &Geom) -> Vec<T> {
    let cw = g.col_width();
    let img = g.h * g.w * g.c;
    let mut cols = vec![T::zero(); batch * g.ho * g.wo * cw];
    for b in 0..batch {
        let xb = &x[b * img..(b + 1) * img];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * cw;
                let dst = &mut cols[row..row + cw];
                g.for_taps(oy, ox, |col, pix| {
                    dst[col..col + g.c].copy_from_slice(&xb[pix..pix + g.c]);
                });
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], batch: usize, g: &Geom) -> Vec<T> {
    let cw = g.col_width();
    let img = g.h * g.w * g.c;
    let mut x = vec![T::zero(); batch * img];
    for b in 0..batch {
        let xb = &mut x[b * img..(b + 1) * img];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * cw;
                let src = &cols[row..row + cw];
                g.for_taps(oy, ox, |col, pix| {
                    for (d, &s) in xb[pix..pix + g.c].iter_mut().zip(&src[col..col + g.c]) {
                        *d += s;
                    }
                });
            }
        }
    }
    x
}

fn channel_sums<T: Scalar>(x: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for px in x.chunks(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    out
}

fn add_channel_bias<T: Scalar>(x: &mut [T], b: &[T]) {
    for px in x.chunks_mut(b.len()) {
        for (v, &bv) in px.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn relu_in_place<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the layer's ReLU output was not positive.
fn relu_backward<T: Scalar>(grad: &mut [T], out: &[T]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    /// `[k·k·cin, cout]`, rows ordered by (ky, kx, cin).
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut RngStream) -> Self {
        let fan_in = k * k * cin;
        Self {
            w: sample_normal(&[fan_in, cout], (2.0 / fan_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[cout]),
            k,
            stride,
            pad,
        }
    }

    fn cin(&self) -> usize {
        self.w.shape()[0] / (self.k * self.k)
    }

    fn cout(&self) -> usize {
        self.w.shape()[1]
    }

    fn geom(&self, h: usize, w: usize) -> Geom {
        Geom::new(h, w, self.cin(), self.k, self.stride, self.pad)
    }

    /// Returns the output `[b, ho, wo, cout]` and the column matrix for backward.
    fn forward(&self, x: &[T], batch: usize, h: usize, w: usize) -> (Vec<T>, Vec<T>, Geom) {
        let g = self.geom(h, w);
        let cols = if self.k == 1 && self.stride == 1 && self.pad == 0 {
            x.to_vec()
        } else {
            im2col(x, batch, &g)
        };
        let m = batch * g.ho * g.wo;
        let mut y = vec![T::zero(); m * self.cout()];
        gemm_acc(&cols, self.w.data(), &mut y, m, g.col_width(), self.cout());
        add_channel_bias(&mut y, self.b.data());
        (y, cols, g)
    }

    fn backward(&self, dy: &[T], cols: &[T], batch: usize, g: &Geom, need_dx: bool) -> (LayerGrad<T>, Option<Vec<T>>) {
        let m = batch * g.ho * g.wo;
        let (kk, cout) = (g.col_width(), self.cout());
        let mut dw = vec![T::zero(); kk * cout];
        gemm_tn_acc(cols, dy, &mut dw, m, kk, cout);
        let db = channel_sums(dy, cout);
        let dx = need_dx.then(|| {
            let mut dcols = vec![T::zero(); m * kk];
            gemm_nt_acc(dy, self.w.data(), &mut dcols, m, cout, kk);
            if self.k == 1 && self.stride == 1 && self.pad == 0 {
                dcols
            } else {
                col2im(&dcols, batch, g)
            }
        });
        (LayerGrad::new(dw, &[kk, cout], db), dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T = f32> {
    /// `[cin, k·k·cout]`, columns ordered by (ky, kx, cout).
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    fn new(cin: usize, cout: usize, rng: &mut RngStream) -> Self {
        let (k, stride) = (4, 2);
        // Each output pixel receives cin·(k/stride)² taps.
        let fan_in = cin * k * k / (stride * stride);
        Self {
            w: sample_normal(&[cin, k * k * cout], (2.0 / fan_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[cout]),
            k,
            stride,
            pad: 1,
        }
    }

    fn cin(&self) -> usize {
        self.w.shape()[0]
    }

    fn cout(&self) -> usize {
        self.w.shape()[1] / (self.k * self.k)
    }

    fn geom(&self, hs: usize, ws: usize) -> Geom {
        let h = (hs - 1) * self.stride + self.k - 2 * self.pad;
        let w = (ws - 1) * self.stride + self.k - 2 * self.pad;
        Geom::new(h, w, self.cout(), self.k, self.stride, self.pad)
    }

    fn forward(&self, x: &[T], batch: usize, hs: usize, ws: usize) -> (Vec<T>, Geom) {
        let g = self.geom(hs, ws);
        let m = batch * hs * ws;
        let mut cols = vec![T::zero(); m * g.col_width()];
        gemm_acc(x, self.w.data(), &mut cols, m, self.cin(), g.col_width());
        let mut y = col2im(&cols, batch, &g);
        add_channel_bias(&mut y, self.b.data());
        (y, g)
    }

    fn backward(&self, dy: &[T], x: &[T], batch: usize, g: &Geom) -> (LayerGrad<T>, Vec<T>) {
        let m = batch * g.ho * g.wo;
        let (cin, kk) = (self.cin(), g.col_width());
        let dcols = im2col(dy, batch, g);
        let mut dw = vec![T::zero(); cin * kk];
        gemm_tn_acc(x, &dcols, &mut dw, m, cin, kk);
        let db = channel_sums(dy, self.cout());
        let mut dx = vec![T::zero(); m * cin];
        gemm_nt_acc(&dcols, self.w.data(), &mut dx, m, kk, cin);
        (LayerGrad::new(dw, &[cin, kk], db), dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T = f32> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LayerGrad<T> {
    fn new(w: Vec<T>, shape: &[usize], b: Vec<T>) -> Self {
        let n = b.len();
        Self {
            w: Tensor::from_vec(shape, w).expect("gradient shape"),
            b: Tensor::from_vec(&[n], b).expect("gradient shape"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderGrads<T = f32> {
    pub enc: Vec<LayerGrad<T>>,
    pub dec: Vec<LayerGrad<T>>,
    pub out: LayerGrad<T>,
}

impl<T: Scalar> AutoencoderGrads<T> {
    /// Same order and names as [`Autoencoder::named_params`].
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        named_layers(&self.enc, &self.dec, &self.out, |l| (&l.w, &l.b))
    }

    pub fn is_all_zero(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, t)| t.data().iter().all(|&x| x == T::zero()))
    }
}

fn named_layers<'a, L, T: Scalar>(
    enc: &'a [L],
    dec: &'a [L],
    out: &'a L,
    wb: impl Fn(&'a L) -> (&'a Tensor<T>, &'a Tensor<T>),
) -> Vec<(String, &'a Tensor<T>)> {
    let mut v = Vec::new();
    for (i, l) in enc.iter().enumerate() {
        let (w, b) = wb(l);
        v.push((format!("enc.{i}.W"), w));
        v.push((format!("enc.{i}.b"), b));
    }
    for (i, l) in dec.iter().enumerate() {
        let (w, b) = wb(l);
        v.push((format!("dec.{i}.W"), w));
        v.push((format!("dec.{i}.b"), b));
    }
    let (w, b) = wb(out);
    v.push(("dec.out.W".into(), w));
    v.push(("dec.out.b".into(), b));
    v
}

/// Activations kept by [`Autoencoder::encode_batch`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct EncoderCache<T = f32> {
    batch: usize,
    cols: Vec<Vec<T>>,
    geoms: Vec<Geom>,
    outputs: Vec<Vec<T>>,
}

/// Activations kept by [`Autoencoder::decode_batch`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct DecoderCache<T = f32> {
    batch: usize,
    inputs: Vec<Vec<T>>,
    geoms: Vec<Geom>,
    outputs: Vec<Vec<T>>,
    out_cols: Vec<T>,
    out_geom: Option<Geom>,
    image: Vec<T>,
}

/// Single image `H × W × 3` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T = f32>(Tensor<T>);

impl<T: Scalar> ImageTensor<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.rank() != 3 || t.shape()[2] != 3 {
            return Err(Error::shape(format!("image must be H×W×3, got {:?}", t.shape())));
        }
        if t.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::numeric("image values must lie in [0, 1]"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Feature map `h × w × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32>(Tensor<T>);

impl<T: Scalar> FeatureMap<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::shape(format!("feature map must be h×w×d, got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(Error::numeric("feature map contains non-finite values"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T = f32> {
    cfg: AutoencoderConfig,
    pub enc: Vec<Conv2d<T>>,
    pub dec: Vec<ConvTranspose2d<T>>,
    pub out: Conv2d<T>,
}

impl<T: Scalar> Autoencoder<T> {
    /// He-normal weights, zero biases.
    pub fn new(cfg: AutoencoderConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut widths = vec![3];
        widths.extend(&cfg.enc_hidden);
        widths.push(cfg.dim);
        let enc = widths
            .windows(2)
            .map(|w| Conv2d::new(w[0], w[1], 3, 2, 1, rng))
            .collect();
        let mut dwidths = vec![cfg.dim];
        dwidths.extend(&cfg.dec_hidden);
        let dec = dwidths
            .windows(2)
            .map(|w| ConvTranspose2d::new(w[0], w[1], rng))
            .collect();
        let out = Conv2d::new(*dwidths.last().unwrap(), 3, 1, 1, 0, rng);
        Ok(Self { cfg, enc, dec, out })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn factor(&self) -> usize {
        self.cfg.factor()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = named_layers(&self.enc, &[], &self.out, |l| (&l.w, &l.b));
        // Splice decoder layers in before the output conv.
        let out = v.split_off(v.len() - 2);
        for (i, l) in self.dec.iter().enumerate() {
            v.push((format!("dec.{i}.W"), &l.w));
            v.push((format!("dec.{i}.b"), &l.b));
        }
        v.extend(out);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = Vec::new();
        for l in &mut self.enc {
            v.push(&mut l.w);
            v.push(&mut l.b);
        }
        for l in &mut self.dec {
            v.push(&mut l.w);
            v.push(&mut l.b);
        }
        v.push(&mut self.out.w);
        v.push(&mut self.out.b);
        v
    }

    /// Images `[B, H, W, 3]` → feature map `[B, H/f, W/f, d]` plus cache.
    pub fn encode_batch(&self, images: &Tensor<T>) -> Result<(Tensor<T>, EncoderCache<T>)> {
        let (batch, h, w) = match images.shape() {
            &[b, h, w, 3] => (b, h, w),
            s => return Err(Error::shape(format!("expected [B, H, W, 3] images, got {s:?}"))),
        };
        let f = self.factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "image size {h}×{w} is not divisible by the downsampling factor {f}"
            )));
        }
        let two = T::lift(2.0);
        let mut x: Vec<T> = images.data().iter().map(|&v| two * v - T::one()).collect();
        let (mut ch, mut cw) = (h, w);
        let mut cache = EncoderCache {
            batch,
            ..Default::default()
        };
        let last = self.enc.len() - 1;
        for (i, conv) in self.enc.iter().enumerate() {
            let (mut y, cols, g) = conv.forward(&x, batch, ch, cw);
            if i < last {
                relu_in_place(&mut y);
            }
            cache.cols.push(cols);
            cache.geoms.push(g);
            cache.outputs.push(y.clone());
            x = y;
            (ch, cw) = (g.ho, g.wo);
        }
        let z = Tensor::from_vec(&[batch, ch, cw, self.cfg.dim], x)?;
        Ok((z, cache))
    }

    /// Feature map `[B, h, w, d]` → images `[B, h·f, w·f, 3]` in (0, 1) plus cache.
    pub fn decode_batch(&self, q: &Tensor<T>) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let (batch, h, w) = match *q.shape() {
            [b, h, w, c] if c == self.cfg.dim => (b, h, w),
            ref s => {
                return Err(Error::shape(format!(
                    "expected [B, h, w, {}] feature map, got {s:?}",
                    self.cfg.dim
                )))
            }
        };
        let mut x = q.data().to_vec();
        let (mut ch, mut cw) = (h, w);
        let mut cache = DecoderCache {
            batch,
            ..Default::default()
        };
        for conv in &self.dec {
            let (mut y, g) = conv.forward(&x, batch, ch, cw);
            relu_in_place(&mut y);
            cache.inputs.push(std::mem::take(&mut x));
            cache.geoms.push(g);
            cache.outputs.push(y.clone());
            x = y;
            (ch, cw) = (g.h, g.w);
        }
        let (mut a, cols, g) = self.out.forward(&x, batch, ch, cw);
        for v in &mut a {
            *v = T::one() / (T::one() + (-*v).exp());
        }
        cache.out_cols = cols;
        cache.out_geom = Some(g);
        cache.image = a.clone();
        let img = Tensor::from_vec(&[batch, ch, cw, 3], a)?;
        Ok((img, cache))
    }

    /// Gradient of the decoder parameters and of its input, given `∂L/∂Î`.
    pub fn decode_backward(&self, cache: &DecoderCache<T>, d_image: &Tensor<T>) -> Result<(Vec<LayerGrad<T>>, LayerGrad<T>, Tensor<T>)> {
        let g = cache
            .out_geom
            .ok_or_else(|| Error::Contract("decoder backward called without cached activations".into()))?;
        if d_image.len() != cache.image.len() {
            return Err(Error::Contract(format!(
                "decoder cache holds {} outputs but the gradient has {}",
                cache.image.len(),
                d_image.len()
            )));
        }
        let batch = cache.batch;
        let da: Vec<T> = d_image
            .data()
            .iter()
            .zip(&cache.image)
            .map(|(&gv, &y)| gv * y * (T::one() - y))
            .collect();
        let (out_grad, dx) = self.out.backward(&da, &cache.out_cols, batch, &g, true);
        let mut dx = dx.expect("requested");
        let mut grads = Vec::with_capacity(self.dec.len());
        for (i, conv) in self.dec.iter().enumerate().rev() {
            relu_backward(&mut dx, &cache.outputs[i]);
            let (lg, dprev) = conv.backward(&dx, &cache.inputs[i], batch, &cache.geoms[i]);
            grads.push(lg);
            dx = dprev;
        }
        grads.reverse();
        let g0 = &cache.geoms[0];
        let dq = Tensor::from_vec(&[batch, g0.ho, g0.wo, self.cfg.dim], dx)?;
        Ok((grads, out_grad, dq))
    }

    /// Gradient of the encoder parameters given `∂L/∂Z`.
    pub fn encode_backward(&self, cache: &EncoderCache<T>, dz: &Tensor<T>) -> Result<Vec<LayerGrad<T>>> {
        let last = match cache.outputs.last() {
            Some(o) => o,
            None => return Err(Error::Contract("encoder backward called without cached activations".into())),
        };
        if last.len() != dz.len() {
            return Err(Error::Contract(format!(
                "encoder cache holds {} features but the gradient has {}",
                last.len(),
                dz.len()
            )));
        }
        let n = self.enc.len();
        let mut dy = dz.data().to_vec();
        let mut grads = Vec::with_capacity(n);
        for i in (0..n).rev() {
            if i < n - 1 {
                relu_backward(&mut dy, &cache.outputs[i]);
            }
            let (lg, dx) = self.enc[i].backward(&dy, &cache.cols[i], cache.batch, &cache.geoms[i], i > 0);
            grads.push(lg);
            if let Some(dx) = dx {
                dy = dx;
            }
        }
        grads.reverse();
        Ok(grads)
    }

    /// Rewrites the last encoder layer so the features of `images` take the
    /// mean and covariance of the rows of `target`, or zero mean and identity
    /// covariance when `target` is `None`. Directions with variance below
    /// 1e-6 are left unscaled.
    pub fn match_feature_moments(&mut self, images: &Tensor<T>, target: Option<&Tensor<T>>) -> Result<()> {
        let (z, _) = self.encode_batch(images)?;
        let d = self.cfg.dim;
        let (z_mean, z_cov) = moments(z.data(), d)?;
        let (t_mean, t_sqrt) = match target {
            Some(t) => {
                if t.rank() != 2 || t.shape()[1] != d {
                    return Err(Error::shape(format!("moment target must be [m, {d}], got {:?}", t.shape())));
                }
                let (m, c) = moments(t.data(), d)?;
                (m, sym_power(c, 0.5))
            }
            None => (RowDVector::zeros(d), DMatrix::identity(d, d)),
        };
        let a = sym_power(z_cov, -0.5) * t_sqrt;
        let last = self.enc.last_mut().expect("encoder has layers");
        let rows = last.w.shape()[0];
        let w_old = DMatrix::from_fn(rows, d, |i, j| last.w.data()[i * d + j].as_f64());
        let w_new = w_old * &a;
        let b_old = DMatrix::from_fn(1, d, |_, j| last.b.data()[j].as_f64());
        let b_new = (b_old - z_mean) * &a + t_mean;
        for i in 0..rows {
            for j in 0..d {
                last.w.data_mut()[i * d + j] = T::lift(w_new[(i, j)]);
            }
        }
        for j in 0..d {
            last.b.data_mut()[j] = T::lift(b_new[(0, j)]);
        }
        Ok(())
    }

    pub fn encode(&self, image: &ImageTensor<T>) -> Result<FeatureMap<T>> {
        let t = image.tensor();
        let batch = t.clone().reshape(&[1, t.shape()[0], t.shape()[1], 3])?;
        let (z, _) = self.encode_batch(&batch)?;
        let s = z.shape().to_vec();
        FeatureMap::new(z.reshape(&s[1..])?)
    }

    pub fn decode(&self, q: &FeatureMap<T>) -> Result<ImageTensor<T>> {
        let t = q.tensor();
        let s = t.shape();
        let (img, _) = self.decode_batch(&t.clone().reshape(&[1, s[0], s[1], s[2]])?)?;
        let s = img.shape().to_vec();
        Ok(ImageTensor(img.reshape(&s[1..])?))
    }
}

fn moments<T: Scalar>(rows: &[T], d: usize) -> Result<(RowDVector<f64>, DMatrix<f64>)> {
    let m = rows.len() / d;
    if m < 2 {
        return Err(Error::config("moment matching needs at least two vectors"));
    }
    let x = DMatrix::from_fn(m, d, |i, j| rows[i * d + j].as_f64());
    let mean = x.row_mean();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    Ok((mean, centered.transpose() * &centered / m as f64))
}

fn sym_power(c: DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(c);
    let scaled = eig.eigenvalues.map(|l| if l > 1e-6 { l.powf(p) } else { 1.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&scaled) * eig.eigenvectors.transpose()
}

/// Gradient of `mean((Î − I)²)` with respect to `Î`.
pub fn recon_grad<T: Scalar>(images: &Tensor<T>, recon: &Tensor<T>) -> Result<Tensor<T>> {
    let scale = T::lift(2.0 / images.len().max(1) as f64);
    recon.zip_map(images, |r, i| scale * (r - i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, sample_standard_normal};

    fn default_ae() -> Autoencoder<f32> {
        Autoencoder::new(AutoencoderConfig::default(), &mut RngStream::new(0, 5)).unwrap()
    }

    fn rand_images(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = RngStream::new(seed, 0);
        let data = (0..b * h * w * 3).map(|_| rng.uniform() as f32).collect();
        Tensor::from_vec(&[b, h, w, 3], data).unwrap()
    }

    #[test]
    fn shape_contract() {
        let ae = default_ae();
        let img = ImageTensor::new(rand_images(1, 32, 32, 1).reshape(&[32, 32, 3]).unwrap()).unwrap();
        let z = ae.encode(&img).unwrap();
        assert_eq!(z.tensor().shape(), &[8, 8, 32]);
        let back = ae.decode(&z).unwrap();
        assert_eq!(back.tensor().shape(), &[32, 32, 3]);
        assert!(back.tensor().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn indivisible_size_rejected() {
        let ae = default_ae();
        assert!(matches!(ae.encode_batch(&rand_images(1, 30, 32, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_weights_give_zero_features_and_constant_image() {
        let mut ae = default_ae();
        for p in ae.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (z, _) = ae.encode_batch(&rand_images(2, 8, 8, 2)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        ae.out.b = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let (img, _) = ae.decode_batch(&z).unwrap();
        let sig = |a: f32| 1.0 / (1.0 + (-a).exp());
        for px in img.data().chunks(3) {
            assert_eq!(px, &[sig(0.5), sig(-1.0), sig(2.0)]);
        }
    }

    #[test]
    fn identical_images_identical_features() {
        let ae = default_ae();
        let one = rand_images(1, 16, 16, 3);
        let two = Tensor::from_vec(&[2, 16, 16, 3], one.data().repeat(2)).unwrap();
        let (z, _) = ae.encode_batch(&two).unwrap();
        let half = z.len() / 2;
        assert_eq!(&z.data()[..half], &z.data()[half..]);
    }

    #[test]
    fn missing_cache_is_a_contract_error() {
        let ae = default_ae();
        let dz = Tensor::zeros(&[1, 2, 2, 32]);
        assert!(matches!(ae.encode_backward(&EncoderCache::default(), &dz), Err(Error::Contract(_))));
        let di = Tensor::zeros(&[1, 8, 8, 3]);
        assert!(matches!(ae.decode_backward(&DecoderCache::default(), &di), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let ae = default_ae();
        let imgs = rand_images(2, 8, 8, 4);
        let (z, ec) = ae.encode_batch(&imgs).unwrap();
        let (_, dc) = ae.decode_batch(&z).unwrap();
        let (dec, out, dq) = ae.decode_backward(&dc, &Tensor::zeros(imgs.shape())).unwrap();
        let enc = ae.encode_backward(&ec, &dq).unwrap();
        let g = AutoencoderGrads { enc, dec, out };
        assert!(g.is_all_zero());
    }

    #[test]
    fn param_names_cover_every_tensor() {
        let ae = default_ae();
        let names: Vec<_> = ae.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            ["enc.0.W", "enc.0.b", "enc.1.W", "enc.1.b", "dec.0.W", "dec.0.b", "dec.1.W", "dec.1.b", "dec.out.W", "dec.out.b"]
        );
        let mut ae = ae;
        assert_eq!(ae.params_mut().len(), names.len());
    }

    #[test]
    fn moment_matching_hits_target_moments() {
        let cfg = AutoencoderConfig {
            dim: 4,
            enc_hidden: vec![6],
            dec_hidden: vec![6, 4],
        };
        let mut ae = Autoencoder::<f64>::new(cfg, &mut RngStream::new(1, 1)).unwrap();
        let images = rand_images(8, 16, 16, 2).cast::<f64>();
        let mut rng = RngStream::new(3, 3);
        let mix: Tensor<f64> = sample_standard_normal(&[4, 4], &mut rng);
        let mut target = matmul(&sample_standard_normal(&[200, 4], &mut rng), &mix).unwrap();
        crate::numerics::add_row_bias(&mut target, &[1.0, -2.0, 0.5, 3.0]);
        ae.match_feature_moments(&images, Some(&target)).unwrap();
        let (z, _) = ae.encode_batch(&images).unwrap();
        let (zm, zc) = moments(z.data(), 4).unwrap();
        let (tm, tc) = moments(target.data(), 4).unwrap();
        assert!((zm - tm).amax() < 1e-9);
        assert!((zc - &tc).amax() < 1e-8 * tc.amax());

        ae.match_feature_moments(&images, None).unwrap();
        let (z, _) = ae.encode_batch(&images).unwrap();
        let (zm, zc) = moments(z.data(), 4).unwrap();
        assert!(zm.amax() < 1e-9);
        assert!((zc - DMatrix::identity(4, 4)).amax() < 1e-8);
    }

    #[test]
    fn bounded_params_stay_finite() {
        let mut ae = default_ae();
        let mut rng = RngStream::new(8, 8);
        for p in ae.params_mut() {
            let noise: Tensor<f32> = sample_standard_normal(p.shape(), &mut rng);
            for (v, n) in p.data_mut().iter_mut().zip(noise.data()) {
                *v = (n * 5.0).clamp(-10.0, 10.0);
            }
        }
        let (z, _) = ae.encode_batch(&rand_images(1, 16, 16, 9)).unwrap();
        assert!(z.all_finite());
        let (img, _) = ae.decode_batch(&z).unwrap();
        assert!(img.all_finite());
    }
}
