//! Architecture, parameters and the forward/backward passes.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::*;
use crate::{Error, Result};

/// Shape of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel width of each encoder stage; its length is the depth.
    pub widths: Vec<usize>,
    pub bottleneck: usize,
    pub tile_px: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            widths: vec![32, 64, 128, 256],
            bottleneck: 512,
            tile_px: 100,
        }
    }
}

impl UNetConfig {
    /// A narrow variant for CPU-bound training with `1 / divisor` of the
    /// default channel widths.
    pub fn narrow(divisor: usize) -> Self {
        let d = UNetConfig::default();
        Self {
            widths: d.widths.iter().map(|w| (w / divisor).max(1)).collect(),
            bottleneck: (d.bottleneck / divisor).max(1),
            ..d
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Side of the padded grid the network runs on.
    pub fn padded_px(&self) -> usize {
        let m = 1usize << self.depth();
        self.tile_px.div_ceil(m) * m
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.bottleneck == 0 || self.widths.contains(&0) {
            return Err(Error::domain("channel counts must be positive"));
        }
        if self.widths.is_empty() || self.depth() > 8 {
            return Err(Error::domain("depth must be between 1 and 8"));
        }
        if self.tile_px == 0 || self.padded_px() - self.tile_px >= self.tile_px {
            return Err(Error::domain(format!(
                "tile of {}px is too small for depth {}",
                self.tile_px,
                self.depth()
            )));
        }
        Ok(())
    }

    /// Every convolution in evaluation order.
    pub fn layers(&self) -> Vec<ConvSpec> {
        let mut out = Vec::new();
        let mut c = self.in_channels;
        for (k, &w) in self.widths.iter().enumerate() {
            out.push(ConvSpec::new(format!("enc{}.conv1", k + 1), c, w, 3));
            out.push(ConvSpec::new(format!("enc{}.conv2", k + 1), w, w, 3));
            c = w;
        }
        out.push(ConvSpec::new("bottleneck.conv1".into(), c, self.bottleneck, 3));
        out.push(ConvSpec::new("bottleneck.conv2".into(), self.bottleneck, self.bottleneck, 3));
        c = self.bottleneck;
        for (k, &w) in self.widths.iter().enumerate().rev() {
            out.push(ConvSpec::new(format!("dec{}.up", k + 1), c, w, 3));
            out.push(ConvSpec::new(format!("dec{}.conv1", k + 1), 2 * w, w, 3));
            out.push(ConvSpec::new(format!("dec{}.conv2", k + 1), w, w, 3));
            c = w;
        }
        out.push(ConvSpec::new("head".into(), c, 1, 1));
        out
    }

    /// Names of all parameter arrays, in storage order.
    pub fn array_names(&self) -> Vec<String> {
        self.layers()
            .iter()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub ks: usize,
}

impl ConvSpec {
    fn new(name: String, cin: usize, cout: usize, ks: usize) -> Self {
        Self { name, cin, cout, ks }
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.ks, self.ks]
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.ks * self.ks
    }
}

/// Nominal (mean, std) of the normalized elevation and rough-estimate
/// channels over synthetic city tiles; used only to condition the first
/// layer at initialization.
pub const INPUT_STATS: [(f64, f64); 2] = [(0.07, 0.08), (0.85, 0.07)];

/// Nominal mean of the normalized target.
pub const TARGET_MEAN: f64 = 0.83;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: UNetConfig,
    pub seed: u64,
    pub training_epochs: usize,
}

/// All trainable arrays: per convolution a `[cout, cin, k, k]` weight
/// followed by a `[cout]` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub meta: ModelMeta,
    pub arrays: Vec<ParamArray<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Seeded He-uniform weights in `+-sqrt(6 / fan_in)`. The first
    /// convolution is scaled and biased as if its input were standardized
    /// with [`INPUT_STATS`], and the head bias starts at the logit of
    /// [`TARGET_MEAN`]; all other biases are zero.
    pub fn init(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arrays = Vec::new();
        let layers = config.layers();
        let last = layers.len() - 1;
        for (li, l) in layers.iter().enumerate() {
            let bound = (6.0 / l.fan_in() as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let n: usize = l.weight_dims().iter().product();
            let mut weight: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            let mut bias = vec![0.0; l.cout];
            if li == 0 {
                let taps = l.ks * l.ks;
                for o in 0..l.cout {
                    for c in 0..l.cin {
                        let (mean, std) = INPUT_STATS.get(c).copied().unwrap_or((0.0, 1.0));
                        for t in 0..taps {
                            let w = &mut weight[(o * l.cin + c) * taps + t];
                            *w /= std;
                            bias[o] -= *w * mean;
                        }
                    }
                }
            } else if li == last {
                bias.fill((TARGET_MEAN / (1.0 - TARGET_MEAN)).ln());
            }
            arrays.push(ParamArray {
                name: format!("{}.weight", l.name),
                dims: l.weight_dims(),
                data: weight.into_iter().map(T::from_f64).collect(),
            });
            arrays.push(ParamArray {
                name: format!("{}.bias", l.name),
                dims: vec![l.cout],
                data: bias.into_iter().map(T::from_f64).collect(),
            });
        }
        Ok(Self {
            meta: ModelMeta {
                config: config.clone(),
                seed,
                training_epochs: 0,
            },
            arrays,
        })
    }

    /// Same architecture with every parameter zero.
    pub fn zeros(config: &UNetConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for a in &mut p.arrays {
            a.data.fill(T::zero());
        }
        Ok(p)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.meta.config
    }

    pub fn count(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray<T>> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamArray<T>> {
        self.arrays.iter_mut().find(|a| a.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ParamArray {
                    name: a.name.clone(),
                    dims: a.dims.clone(),
                    data: a.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Zero gradient buffers shaped like the parameters.
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.arrays.iter().map(|a| vec![T::zero(); a.data.len()]).collect()
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        let c = self.config();
        let want = c.in_channels * c.tile_px * c.tile_px;
        if input.len() != want {
            return Err(Error::Shape(format!(
                "model expects {} x {} x {} input ({want} values), got {}",
                c.in_channels,
                c.tile_px,
                c.tile_px,
                input.len()
            )));
        }
        Ok(())
    }
}

impl ModelParams<f32> {
    pub fn to_f64(&self) -> ModelParams<f64> {
        self.cast()
    }
}

/// Activations kept for the backward pass.
struct Tape<T> {
    /// Input of every convolution, by layer index.
    conv_in: Vec<Vec<T>>,
    /// Post-activation output of every hidden convolution.
    conv_out: Vec<Vec<T>>,
    /// Spatial side of every convolution.
    side: Vec<usize>,
    pool_arg: Vec<Vec<u32>>,
    /// Sigmoid output on the padded grid.
    prob: Vec<T>,
}

struct Runner<'a, T: Real> {
    params: &'a ModelParams<T>,
    layers: Vec<ConvSpec>,
    tape: Option<Tape<T>>,
}

impl<'a, T: Real> Runner<'a, T> {
    fn conv(&mut self, idx: usize, x: Vec<T>, side: usize, relu: bool) -> Vec<T> {
        let l = &self.layers[idx];
        let w = &self.params.arrays[2 * idx].data;
        let b = &self.params.arrays[2 * idx + 1].data;
        let mut y = conv_forward(&x, l.cin, side, side, w, b, l.cout, l.ks);
        if relu {
            relu_inplace(&mut y);
        }
        if let Some(t) = &mut self.tape {
            t.conv_in[idx] = x;
            t.conv_out[idx] = if relu { y.clone() } else { Vec::new() };
            t.side[idx] = side;
        }
        y
    }

    fn run(&mut self, input: &[T]) -> Vec<T> {
        let cfg = self.params.config().clone();
        let (n, m) = (cfg.tile_px, cfg.padded_px());
        let mut x = reflect_pad(input, cfg.in_channels, n, m);
        let mut side = m;
        let mut li = 0;
        let mut skips = Vec::with_capacity(cfg.depth());
        for &w in &cfg.widths {
            x = self.conv(li, x, side, true);
            x = self.conv(li + 1, x, side, true);
            li += 2;
            let (pooled, arg) = maxpool_forward(&x, w, side, side);
            skips.push(x);
            if let Some(t) = &mut self.tape {
                t.pool_arg.push(arg);
            }
            x = pooled;
            side /= 2;
        }
        x = self.conv(li, x, side, true);
        x = self.conv(li + 1, x, side, true);
        li += 2;
        let mut c = cfg.bottleneck;
        for &w in cfg.widths.iter().rev() {
            let up = upsample_forward(&x, c, side, side);
            side *= 2;
            let u = self.conv(li, up, side, true);
            let mut cat = skips.pop().expect("one skip per stage");
            cat.extend_from_slice(&u);
            x = self.conv(li + 1, cat, side, true);
            x = self.conv(li + 2, x, side, true);
            li += 3;
            c = w;
        }
        let mut logits = self.conv(li, x, side, false);
        for v in &mut logits {
            *v = sigmoid(*v);
        }
        if let Some(t) = &mut self.tape {
            t.prob = logits.clone();
        }
        crop_center(&logits, m, n)
    }
}

/// Network output (normalized path gain in `(0, 1)`) for one channel-major
/// input of `in_channels x tile_px x tile_px` values.
pub fn forward<T: Real>(params: &ModelParams<T>, input: &[T]) -> Result<Vec<T>> {
    params.check_input(input)?;
    let mut r = Runner {
        params,
        layers: params.config().layers(),
        tape: None,
    };
    Ok(r.run(input))
}

/// Mean squared error over pixels where `mask` is set.
pub fn loss_masked_mse<T: Real>(pred: &[T], target: &[T], mask: &[bool]) -> Result<T> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "pred/target/mask lengths {} / {} / {} differ",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let mut sum = T::zero();
    let mut count = 0usize;
    for k in 0..pred.len() {
        if mask[k] {
            let d = pred[k] - target[k];
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::domain("mask has no valid pixels"));
    }
    Ok(sum / T::from_f64(count as f64))
}

/// Output, loss term and parameter gradients of one sample.
///
/// The loss is `sum_valid (pred - target)^2 / denom`; passing the number of
/// valid pixels as `denom` gives [`loss_masked_mse`], while a batch-wide
/// count lets per-sample gradients be summed into the batch gradient.
pub fn backward_scaled<T: Real>(
    params: &ModelParams<T>,
    input: &[T],
    target: &[T],
    mask: &[bool],
    denom: f64,
) -> Result<(Vec<T>, T, Vec<Vec<T>>)> {
    params.check_input(input)?;
    let cfg = params.config().clone();
    let (n, m) = (cfg.tile_px, cfg.padded_px());
    if target.len() != n * n || mask.len() != n * n {
        return Err(Error::Shape("target and mask must match the tile".into()));
    }
    let layers = cfg.layers();
    let nl = layers.len();
    let mut r = Runner {
        params,
        layers: layers.clone(),
        tape: Some(Tape {
            conv_in: vec![Vec::new(); nl],
            conv_out: vec![Vec::new(); nl],
            side: vec![0; nl],
            pool_arg: Vec::new(),
            prob: Vec::new(),
        }),
    };
    let pred = r.run(input);
    let tape = r.tape.take().expect("tape recorded");

    let scale = T::from_f64(1.0 / denom);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let before = (m - n) / 2;
    let mut dy = vec![T::zero(); m * m];
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            if !mask[k] {
                continue;
            }
            let d = pred[k] - target[k];
            loss += d * d * scale;
            let p = tape.prob[(i + before) * m + j + before];
            // Through the sigmoid.
            dy[(i + before) * m + j + before] = two * d * scale * p * (T::one() - p);
        }
    }

    let mut grads = params.zero_grads();
    let mut conv_back = |idx: usize, dy: &mut Vec<T>, need_dx: bool| -> Option<Vec<T>> {
        let l = &layers[idx];
        if !tape.conv_out[idx].is_empty() {
            relu_backward(&tape.conv_out[idx], dy);
        }
        let side = tape.side[idx];
        let (gw, gb) = grads.split_at_mut(2 * idx + 1);
        conv_backward(
            &tape.conv_in[idx],
            l.cin,
            side,
            side,
            &params.arrays[2 * idx].data,
            l.cout,
            l.ks,
            dy,
            &mut gw[2 * idx],
            &mut gb[0],
            need_dx,
        )
    };

    let mut li = nl - 1;
    let mut g = conv_back(li, &mut dy, true).expect("dx requested");
    let mut skip_grads = Vec::with_capacity(cfg.depth());
    for &w in &cfg.widths {
        // Decoder stages run deepest first, so unwind shallowest first.
        li -= 3;
        let mut g2 = g;
        let mut g1 = conv_back(li + 2, &mut g2, true).expect("dx requested");
        let gcat = conv_back(li + 1, &mut g1, true).expect("dx requested");
        let side = tape.side[li + 1];
        let (gskip, gu) = gcat.split_at(w * side * side);
        skip_grads.push(gskip.to_vec());
        let mut gu = gu.to_vec();
        let gup = conv_back(li, &mut gu, true).expect("dx requested");
        let cin = layers[li].cin;
        g = upsample_backward(&gup, cin, side / 2, side / 2);
    }
    li -= 2;
    let mut gb2 = g;
    let mut gb1 = conv_back(li + 1, &mut gb2, true).expect("dx requested");
    g = conv_back(li, &mut gb1, true).expect("dx requested");
    for (k, &w) in cfg.widths.iter().enumerate().rev() {
        li -= 2;
        let side = tape.side[li];
        let mut gs = maxpool_backward(&g, &tape.pool_arg[k], w * side * side);
        for (a, b) in gs.iter_mut().zip(&skip_grads[k]) {
            *a += *b;
        }
        let mut ga = conv_back(li + 1, &mut gs, true).expect("dx requested");
        let need = k > 0;
        match conv_back(li, &mut ga, need) {
            Some(gx) => g = gx,
            None => g = Vec::new(),
        }
    }
    Ok((pred, loss, grads))
}

/// Exact gradients of [`loss_masked_mse`] with respect to every parameter
/// array, in storage order.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    input: &[T],
    target: &[T],
    mask: &[bool],
) -> Result<(T, Vec<Vec<T>>)> {
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::domain("mask has no valid pixels"));
    }
    let (_, loss, grads) = backward_scaled(params, input, target, mask, count as f64)?;
    Ok((loss, grads))
}
