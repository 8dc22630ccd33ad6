//! Per-pixel image features (shared U-Net) and sinusoidal position encoding.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{join_prefix, Conv2d, Parameters, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Channels of every feature map.
pub const FEATURE_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosEncodingConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl Default for PosEncodingConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 10,
            include_input: true,
        }
    }
}

impl PosEncodingConfig {
    pub fn per_dim(&self) -> usize {
        2 * self.num_frequencies + usize::from(self.include_input)
    }

    pub fn output_dim(&self) -> usize {
        3 * self.per_dim()
    }
}

/// `γ(x)`: for each coordinate `p`, `[p?, sin(2^0 π p), cos(2^0 π p), ...,
/// sin(2^(L-1) π p), cos(2^(L-1) π p)]`.
pub fn positional_encode(x: [f64; 3], cfg: &PosEncodingConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.output_dim()];
    for (p, o) in x.into_iter().zip(out.chunks_exact_mut(cfg.per_dim())) {
        encode_coordinate(p, cfg, o);
    }
    out
}

/// Higher octaves come from the double-angle identities, which are exact in
/// sign so the parity of `γ` is preserved bit for bit.
fn encode_coordinate<T: Scalar>(p: f64, cfg: &PosEncodingConfig, out: &mut [T]) {
    let mut o = 0;
    if cfg.include_input {
        out[0] = T::lit(p);
        o = 1;
    }
    let (mut s, mut c) = (PI * p).sin_cos();
    for k in 0..cfg.num_frequencies {
        if k > 0 {
            (s, c) = (2.0 * s * c, 1.0 - 2.0 * s * s);
        }
        out[o] = T::lit(s);
        out[o + 1] = T::lit(c);
        o += 2;
    }
}

/// Differentiable `γ` over `[N, 3]` points.
pub fn positional_encode_var<T: Scalar>(points: &Var<T>, cfg: &PosEncodingConfig) -> Var<T> {
    assert_eq!(points.cols(), 3, "points must be [N, 3]");
    let n = points.rows();
    let dim = cfg.output_dim();
    let mut out = vec![T::zero(); n * dim];
    for (p, o) in points.data().iter().zip(out.chunks_exact_mut(cfg.per_dim())) {
        encode_coordinate(p.as_f64(), cfg, o);
    }
    let cfg = *cfg;
    let per_dim = cfg.per_dim();
    Var::from_op(
        Tensor::new(&[n, dim], out),
        vec![points.clone()],
        Box::new(move |g, y, p| {
            let mut d = vec![T::zero(); 3 * n];
            for i in 0..n {
                let gi = &g.data()[i * dim..(i + 1) * dim];
                let yi = &y.data()[i * dim..(i + 1) * dim];
                for j in 0..3 {
                    let base = j * per_dim;
                    let mut acc = T::zero();
                    let mut off = base;
                    if cfg.include_input {
                        acc += gi[off];
                        off += 1;
                    }
                    for k in 0..cfg.num_frequencies {
                        let f = T::lit((1u64 << k) as f64 * PI);
                        // d sin = f cos, d cos = -f sin
                        acc += gi[off] * f * yi[off + 1] - gi[off + 1] * f * yi[off];
                        off += 2;
                    }
                    d[3 * i + j] = acc;
                }
            }
            vec![Some(Tensor::new(p[0].shape(), d))]
        }),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Channels at full, half and quarter resolution; the bottleneck (1/8)
    /// reuses the last entry.
    pub channels: [usize; 3],
    pub out_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128],
            out_dim: FEATURE_DIM,
        }
    }
}

impl UNetConfig {
    /// Number of pooling levels.
    pub const DEPTH: usize = 3;

    pub fn stride(&self) -> usize {
        1 << Self::DEPTH
    }
}

#[derive(Clone, Debug)]
struct DoubleConv<T: Scalar> {
    a: Conv2d<T>,
    b: Conv2d<T>,
}

impl<T: Scalar> DoubleConv<T> {
    fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize) -> Self {
        Self {
            a: Conv2d::new(rng, 3, cin, cout),
            b: Conv2d::new(rng, 3, cout, cout),
        }
    }

    fn forward(&self, x: &Var<T>) -> Var<T> {
        self.b.forward(&self.a.forward(x).relu()).relu()
    }
}

impl<T: Scalar> Parameters<T> for DoubleConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.a.visit(&join_prefix(prefix, "a"), f);
        self.b.visit(&join_prefix(prefix, "b"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.a.visit_mut(&join_prefix(prefix, "a"), f);
        self.b.visit_mut(&join_prefix(prefix, "b"), f);
    }
}

/// Three-level U-Net with skip connections and a 1×1 output projection.
#[derive(Clone, Debug)]
pub struct UNet<T: Scalar> {
    pub config: UNetConfig,
    down: Vec<DoubleConv<T>>,
    bottleneck: DoubleConv<T>,
    up: Vec<DoubleConv<T>>,
    head: Conv2d<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new<R: Rng>(rng: &mut R, config: UNetConfig) -> Self {
        let [c0, c1, c2] = config.channels;
        Self {
            config,
            down: vec![
                DoubleConv::new(rng, 3, c0),
                DoubleConv::new(rng, c0, c1),
                DoubleConv::new(rng, c1, c2),
            ],
            bottleneck: DoubleConv::new(rng, c2, c2),
            up: vec![
                DoubleConv::new(rng, c1 + c0, c0),
                DoubleConv::new(rng, c2 + c1, c1),
                DoubleConv::new(rng, c2 + c2, c2),
            ],
            head: Conv2d::new(rng, 1, c0, config.out_dim),
        }
    }

    /// Features for a `[B, H, W, 3]` batch; returns `[B, H, W, out_dim]`.
    pub fn forward(&self, images: &Var<T>) -> Result<Var<T>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::InvalidInput(format!("expected [B, H, W, 3] images, got {shape:?}")));
        }
        let s = self.config.stride();
        if !shape[1].is_multiple_of(s) || !shape[2].is_multiple_of(s) {
            return Err(Error::InvalidInput(format!(
                "image size {}x{} is not divisible by {s}",
                shape[2], shape[1]
            )));
        }
        let mut skips = Vec::with_capacity(3);
        let mut x = images.clone();
        for block in &self.down {
            x = block.forward(&x);
            skips.push(x.clone());
            x = x.avg_pool2();
        }
        x = self.bottleneck.forward(&x);
        for (block, skip) in self.up.iter().zip(skips.iter()).rev() {
            let up = x.upsample_nearest2();
            x = block.forward(&Var::concat_cols(&[&up, skip]));
        }
        Ok(self.head.forward(&x))
    }
}

impl<T: Scalar> Parameters<T> for UNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        for (i, b) in self.down.iter().enumerate() {
            b.visit(&join_prefix(prefix, &format!("down{i}")), f);
        }
        self.bottleneck.visit(&join_prefix(prefix, "bottleneck"), f);
        for (i, b) in self.up.iter().enumerate() {
            b.visit(&join_prefix(prefix, &format!("up{i}")), f);
        }
        self.head.visit(&join_prefix(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        for (i, b) in self.down.iter_mut().enumerate() {
            b.visit_mut(&join_prefix(prefix, &format!("down{i}")), f);
        }
        self.bottleneck.visit_mut(&join_prefix(prefix, "bottleneck"), f);
        for (i, b) in self.up.iter_mut().enumerate() {
            b.visit_mut(&join_prefix(prefix, &format!("up{i}")), f);
        }
        self.head.visit_mut(&join_prefix(prefix, "head"), f);
    }
}

/// Per-pixel features of one source view, `[H, W, d]`.
#[derive(Clone, Debug)]
pub struct FeatureMap<T: Scalar> {
    pub values: Var<T>,
    pub source_view_id: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Runs the shared U-Net over several equally sized `[H, W, 3]` images in one batch.
pub fn extract_features<T: Scalar>(
    unet: &UNet<T>,
    images: &[(usize, &Tensor<T>)],
) -> Result<Vec<FeatureMap<T>>> {
    let Some((_, first)) = images.first() else {
        return Ok(Vec::new());
    };
    let shape = first.shape().to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::InvalidInput(format!("expected an [H, W, 3] image, got {shape:?}")));
    }
    let mut data = Vec::with_capacity(first.len() * images.len());
    for (_, img) in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::InvalidInput("source images differ in size".into()));
        }
        data.extend_from_slice(img.data());
    }
    let (h, w) = (shape[0], shape[1]);
    let batch = Var::constant(Tensor::new(&[images.len(), h, w, 3], data));
    let feats = unet.forward(&batch)?;
    let d = feats.cols();
    Ok(images
        .iter()
        .enumerate()
        .map(|(i, (id, _))| FeatureMap {
            values: feats.slice_rows(i * h * w, h * w).reshape(&[h, w, d]),
            source_view_id: *id,
        })
        .collect())
}
