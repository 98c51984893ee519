//! The multi-task network: backbone, taps, and the six head wirings.

pub(crate) mod checkpoint;
mod config;

use ndarray::{concatenate, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

pub use checkpoint::{read_container, write_container, Container, TensorEntry, FORMAT_VERSION};
pub use config::{BackboneConfig, HeadVariant, ModelConfig, NUM_STAGES};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{self, Real};

/// Hidden width of the fully-connected quality regressor (variant a).
pub const DENSE_HIDDEN: usize = 512;

/// A named trainable tensor, stored flat in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// First axis × everything else.
    fn as_matrix(&self) -> ArrayView2<'_, T> {
        let rows = self.shape[0];
        ArrayView2::from_shape((rows, self.data.len() / rows), &self.data).expect("param shape")
    }

    fn as_vector(&self) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.data[..])
    }
}

/// Gradients aligned index-for-index with [`Model::params`].
pub type Grads<T> = Vec<Vec<T>>;

#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: usize,
    bias: usize,
    cin: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tap {
    Four,
    Five,
}

#[derive(Clone, Debug)]
enum QualityHead {
    Dense { fc1: Layer, fc2: Layer },
    Single { q: Layer },
    FusedTap5 { qa: Layer, qb: Layer, fuse: Layer },
    Fused { q4: Layer, q5: Layer, fuse: Layer },
}

#[derive(Clone, Debug)]
struct Layout {
    stages: Vec<Vec<Layer>>,
    distortion: Option<(Layer, Tap)>,
    quality: QualityHead,
}

/// Post-pool outputs of stages 4 and 5.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTaps<T> {
    pub t4: Array3<T>,
    pub t5: Array3<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForwardOutput<T> {
    /// Distortion logits, absent for the quality-only variants.
    pub d_logits: Option<Vec<T>>,
    pub s: T,
}

impl<T: Real> ForwardOutput<T> {
    pub fn to_f64(&self) -> ForwardOutput<f64> {
        ForwardOutput {
            d_logits: self.d_logits.as_ref().map(|d| d.iter().map(|v| v.to_f64_lossy()).collect()),
            s: self.s.to_f64_lossy(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CensusRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Census {
    pub rows: Vec<CensusRow>,
    pub total: usize,
}

struct ConvCache<T> {
    cols: Array2<T>,
    normalized: Array3<T>,
    inv_std: Vec<T>,
}

struct PoolCache {
    arg: Vec<u32>,
    h: usize,
    w: usize,
}

enum HeadCache<T> {
    None,
    Dense { hidden: Array1<T> },
    Fused { stacked: Array3<T> },
}

/// Intermediates kept by [`Model::forward_train`] for the backward pass.
pub struct Trace<T> {
    convs: Vec<ConvCache<T>>,
    pools: Vec<PoolCache>,
    taps: FeatureTaps<T>,
    head: HeadCache<T>,
}

impl<T: Real> Trace<T> {
    /// ReLU signs and max-pool switches of the pass. Inputs with equal
    /// patterns lie in the same piecewise-linear region of the network.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.extend(c.normalized.iter().map(|&v| u32::from(v > T::zero())));
        }
        for p in &self.pools {
            out.extend_from_slice(&p.arg);
        }
        if let HeadCache::Dense { hidden } = &self.head {
            out.extend(hidden.iter().map(|&v| u32::from(v > T::zero())));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

struct Builder<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> Builder<T> {
    fn layer(&mut self, prefix: &str, weight_shape: Vec<usize>) -> Layer {
        let cout = weight_shape[0];
        let cin = weight_shape[1];
        let weight = self.params.len();
        self.params.push(Param::zeros(format!("{prefix}.weight"), weight_shape));
        let bias = self.params.len();
        self.params.push(Param::zeros(format!("{prefix}.bias"), vec![cout]));
        Layer { weight, bias, cin }
    }

    fn pointwise(&mut self, prefix: &str, cin: usize, cout: usize) -> Layer {
        self.layer(prefix, vec![cout, cin, 1, 1])
    }
}

fn param_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over (seed, index)
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model. Weights are He-normal (std
    /// `sqrt(2 / fan_in)`), biases zero; each tensor draws from its own
    /// stream derived from `config.seed`, so `f32` and `f64` builds agree up
    /// to rounding.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let bb = &config.backbone;
        let k = bb.kernel_size;
        let mut b = Builder { params: Vec::new() };
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut cin = 3;
        for (si, (&cout, &n)) in bb.stage_channels.iter().zip(&bb.convs_per_stage).enumerate() {
            let mut convs = Vec::with_capacity(n);
            for ci in 0..n {
                convs.push(b.layer(&format!("backbone.stage{}.conv{}", si + 1, ci + 1), vec![cout, cin, k, k]));
                cin = cout;
            }
            stages.push(convs);
        }
        let c4 = bb.tap4_channels();
        let c5 = bb.tap5_channels();
        let m = config.num_distortions;
        let side5 = config.patch_side / 32;
        let distortion = match config.variant {
            HeadVariant::A | HeadVariant::B => None,
            HeadVariant::C | HeadVariant::E => Some((b.pointwise("head.distortion", c5, m), Tap::Five)),
            HeadVariant::D | HeadVariant::F => Some((b.pointwise("head.distortion", c4, m), Tap::Four)),
        };
        let quality = match config.variant {
            HeadVariant::A => QualityHead::Dense {
                fc1: b.layer("head.quality.fc1", vec![DENSE_HIDDEN, c5 * side5 * side5]),
                fc2: b.layer("head.quality.fc2", vec![1, DENSE_HIDDEN]),
            },
            HeadVariant::B | HeadVariant::C | HeadVariant::D => QualityHead::Single {
                q: b.pointwise("head.quality.map5", c5, 1),
            },
            HeadVariant::E => QualityHead::FusedTap5 {
                qa: b.pointwise("head.quality.map5a", c5, 1),
                qb: b.pointwise("head.quality.map5b", c5, 1),
                fuse: b.pointwise("head.quality.fuse", 2, 1),
            },
            HeadVariant::F => QualityHead::Fused {
                q4: b.pointwise("head.quality.map4", c4, 1),
                q5: b.pointwise("head.quality.map5", c5, 1),
                fuse: b.pointwise("head.quality.fuse", 2, 1),
            },
        };
        let mut params = b.params;
        for (i, p) in params.iter_mut().enumerate() {
            if p.shape.len() < 2 {
                continue; // bias
            }
            let fan_in: usize = p.shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let mut rng = ChaCha8Rng::seed_from_u64(param_seed(config.seed, i));
            for v in p.data.iter_mut() {
                *v = T::of(normal.sample(&mut rng));
            }
        }
        Ok(Self {
            config,
            params,
            layout: Layout {
                stages,
                distortion,
                quality,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn census(&self) -> Census {
        let rows: Vec<CensusRow> = self
            .params
            .iter()
            .map(|p| CensusRow {
                name: p.name.clone(),
                shape: p.shape.clone(),
                count: p.len(),
            })
            .collect();
        let total = rows.iter().map(|r| r.count).sum();
        Census { rows, total }
    }

    fn check_input(&self, patch: &Array3<T>, exact_side: bool) -> Result<usize> {
        let (c, h, w) = patch.dim();
        if c != 3 || h != w || h == 0 || h % 32 != 0 {
            return Err(Error::Shape(format!(
                "expected a 3×S×S patch with S a multiple of 32, got {c}×{h}×{w}"
            )));
        }
        if exact_side && h != self.config.patch_side {
            return Err(Error::Shape(format!(
                "model expects {0}×{0} patches, got {h}×{w}",
                self.config.patch_side
            )));
        }
        Ok(h)
    }

    fn run_backbone(&self, patch: &Array3<T>, mut trace: Option<(&mut Vec<ConvCache<T>>, &mut Vec<PoolCache>)>) -> FeatureTaps<T> {
        let k = self.config.backbone.kernel_size;
        let eps = T::of(self.config.backbone.in_epsilon);
        let mut x = patch.as_standard_layout().into_owned();
        let mut t4 = None;
        for (si, stage) in self.layout.stages.iter().enumerate() {
            for layer in stage {
                let w = self.params[layer.weight].as_matrix();
                let b = self.params[layer.bias].as_vector();
                let (mut y, cols) = nn::conv_forward(x.view(), w, b, k);
                let inv_std = nn::instance_norm_inplace(&mut y, eps);
                let mut act = y.clone();
                nn::relu_inplace(&mut act);
                if let Some((convs, _)) = trace.as_mut() {
                    convs.push(ConvCache {
                        cols,
                        normalized: y,
                        inv_std,
                    });
                }
                x = act;
            }
            let (_, h, w) = x.dim();
            let (pooled, arg) = nn::max_pool2(x.view());
            if let Some((_, pools)) = trace.as_mut() {
                pools.push(PoolCache { arg, h, w });
            }
            x = pooled;
            if si == 3 {
                t4 = Some(x.clone());
            }
        }
        FeatureTaps {
            t4: t4.expect("five stages"),
            t5: x,
        }
    }

    /// Post-pool stage-4 and stage-5 feature maps for a `3×S×S` patch, any
    /// `S` divisible by 32.
    pub fn forward_backbone(&self, patch: &Array3<T>) -> Result<FeatureTaps<T>> {
        self.check_input(patch, false)?;
        Ok(self.run_backbone(patch, None))
    }

    /// Activation of the first backbone conv (after IN and ReLU).
    pub fn first_conv_activation(&self, patch: &Array3<T>) -> Result<Array3<T>> {
        self.check_input(patch, false)?;
        let layer = self.layout.stages[0][0];
        let (mut y, _) = nn::conv_forward(
            patch.view(),
            self.params[layer.weight].as_matrix(),
            self.params[layer.bias].as_vector(),
            self.config.backbone.kernel_size,
        );
        nn::instance_norm_inplace(&mut y, T::of(self.config.backbone.in_epsilon));
        nn::relu_inplace(&mut y);
        Ok(y)
    }

    fn pointwise(&self, layer: Layer, x: &Array3<T>) -> Array3<T> {
        nn::pointwise_forward(x.view(), self.params[layer.weight].as_matrix(), self.params[layer.bias].as_vector())
    }

    fn tap<'a>(taps: &'a FeatureTaps<T>, tap: Tap) -> &'a Array3<T> {
        match tap {
            Tap::Four => &taps.t4,
            Tap::Five => &taps.t5,
        }
    }

    /// Distortion logit map (`m × h × w` at the head's tap) and its GAP.
    /// `None` for the quality-only variants.
    pub fn distortion_head(&self, taps: &FeatureTaps<T>) -> Option<(Array3<T>, Vec<T>)> {
        let (layer, tap) = self.layout.distortion?;
        let map = self.pointwise(layer, Self::tap(taps, tap));
        let logits = nn::gap(map.view()).to_vec();
        Some((map, logits))
    }

    /// The coarse single-channel quality maps the head combines, each at
    /// tap-5 resolution. Empty for the dense variant.
    pub fn quality_maps(&self, taps: &FeatureTaps<T>) -> Vec<Array3<T>> {
        match &self.layout.quality {
            QualityHead::Dense { .. } => Vec::new(),
            QualityHead::Single { q } => vec![self.pointwise(*q, &taps.t5)],
            QualityHead::FusedTap5 { qa, qb, .. } => vec![self.pointwise(*qa, &taps.t5), self.pointwise(*qb, &taps.t5)],
            QualityHead::Fused { q4, q5, .. } => {
                let m4 = self.pointwise(*q4, &taps.t4);
                vec![nn::avg_pool2(m4.view()), self.pointwise(*q5, &taps.t5)]
            }
        }
    }

    fn run_quality(&self, taps: &FeatureTaps<T>) -> Result<(T, HeadCache<T>)> {
        match &self.layout.quality {
            QualityHead::Dense { fc1, fc2 } => {
                let x = taps.t5.as_standard_layout();
                let flat = ArrayView1::from(x.as_slice().expect("contiguous"));
                let w1 = self.params[fc1.weight].as_matrix();
                if w1.ncols() != flat.len() {
                    return Err(Error::Shape(format!(
                        "dense quality head expects {} tap-5 features, got {}",
                        w1.ncols(),
                        flat.len()
                    )));
                }
                let hidden = w1.dot(&flat) + &self.params[fc1.bias].as_vector();
                let act = hidden.mapv(|v| v.max(T::zero()));
                let s = self.params[fc2.weight].as_matrix().dot(&act)[0] + self.params[fc2.bias].data[0];
                Ok((s, HeadCache::Dense { hidden }))
            }
            QualityHead::Single { .. } => {
                let maps = self.quality_maps(taps);
                Ok((nn::gap(maps[0].view())[0], HeadCache::None))
            }
            QualityHead::FusedTap5 { fuse, .. } | QualityHead::Fused { fuse, .. } => {
                let maps = self.quality_maps(taps);
                let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
                let stacked = concatenate(Axis(0), &views).expect("equal map sizes");
                let fused = self.pointwise(*fuse, &stacked);
                Ok((nn::gap(fused.view())[0], HeadCache::Fused { stacked }))
            }
        }
    }

    /// Scalar quality score from the taps.
    pub fn quality_head(&self, taps: &FeatureTaps<T>) -> Result<T> {
        self.run_quality(taps).map(|(s, _)| s)
    }

    pub fn forward(&self, patch: &Array3<T>) -> Result<ForwardOutput<T>> {
        self.check_input(patch, true)?;
        let taps = self.run_backbone(patch, None);
        let d_logits = self.distortion_head(&taps).map(|(_, d)| d);
        let s = self.quality_head(&taps)?;
        Ok(ForwardOutput { d_logits, s })
    }

    pub fn forward_batch(&self, patches: &[Array3<T>], exec: Exec) -> Result<Vec<ForwardOutput<T>>> {
        exec.map(patches, |p| self.forward(p)).into_iter().collect()
    }

    /// Forward pass keeping every intermediate needed by [`Model::backward`].
    pub fn forward_train(&self, patch: &Array3<T>) -> Result<(ForwardOutput<T>, Trace<T>)> {
        self.check_input(patch, true)?;
        let mut convs = Vec::new();
        let mut pools = Vec::new();
        let taps = self.run_backbone(patch, Some((&mut convs, &mut pools)));
        let d_logits = self.distortion_head(&taps).map(|(_, d)| d);
        let (s, head) = self.run_quality(&taps)?;
        Ok((
            ForwardOutput { d_logits, s },
            Trace {
                convs,
                pools,
                taps,
                head,
            },
        ))
    }

    fn pointwise_grad(&self, layer: Layer, dout: &Array3<T>, x: &Array3<T>, grads: &mut Grads<T>) -> Array3<T> {
        let (dw, db, dx) = nn::pointwise_backward(dout.view(), x.view(), self.params[layer.weight].as_matrix());
        accumulate(&mut grads[layer.weight], dw.iter());
        accumulate(&mut grads[layer.bias], db.iter());
        dx
    }

    /// Backpropagates output gradients (`dL/d_logits`, `dL/ds`) through a
    /// recorded trace, returning parameter gradients.
    pub fn backward(&self, trace: &Trace<T>, d_logits: Option<&[T]>, d_s: T) -> Grads<T> {
        let mut grads = self.zero_grads();
        let taps = &trace.taps;
        let mut g4 = Array3::<T>::zeros(taps.t4.dim());
        let mut g5 = Array3::<T>::zeros(taps.t5.dim());

        if let (Some((layer, tap)), Some(dl)) = (self.layout.distortion, d_logits) {
            let x = Self::tap(taps, tap);
            let (_, h, w) = x.dim();
            let dmap = nn::gap_backward(ArrayView1::from(dl), h, w);
            let dx = self.pointwise_grad(layer, &dmap, x, &mut grads);
            match tap {
                Tap::Four => g4 += &dx,
                Tap::Five => g5 += &dx,
            }
        }

        let (_, h5, w5) = taps.t5.dim();
        match (&self.layout.quality, &trace.head) {
            (QualityHead::Dense { fc1, fc2 }, HeadCache::Dense { hidden }) => {
                let act = hidden.mapv(|v| v.max(T::zero()));
                let w2 = self.params[fc2.weight].as_matrix();
                accumulate(&mut grads[fc2.weight], act.iter().map(|&a| a * d_s).collect::<Vec<_>>().iter());
                grads[fc2.bias][0] = grads[fc2.bias][0] + d_s;
                let dh = Array1::from_iter(
                    hidden
                        .iter()
                        .zip(w2.row(0))
                        .map(|(&hv, &wv)| if hv > T::zero() { wv * d_s } else { T::zero() }),
                );
                let x = taps.t5.as_standard_layout();
                let flat = ArrayView1::from(x.as_slice().expect("contiguous"));
                let dh2 = dh.view().insert_axis(Axis(1));
                let dw1 = dh2.dot(&flat.insert_axis(Axis(0)));
                accumulate(&mut grads[fc1.weight], dw1.iter());
                accumulate(&mut grads[fc1.bias], dh.iter());
                let dx = self.params[fc1.weight].as_matrix().t().dot(&dh);
                g5 += &dx.into_shape_with_order(taps.t5.dim()).expect("tap shape");
            }
            (QualityHead::Single { q }, _) => {
                let dmap = nn::gap_backward(ArrayView1::from(&[d_s][..]), h5, w5);
                g5 += &self.pointwise_grad(*q, &dmap, &taps.t5, &mut grads);
            }
            (QualityHead::FusedTap5 { qa, qb, fuse }, HeadCache::Fused { stacked })
            | (QualityHead::Fused { q4: qa, q5: qb, fuse }, HeadCache::Fused { stacked }) => {
                let dfused = nn::gap_backward(ArrayView1::from(&[d_s][..]), h5, w5);
                let dstack = self.pointwise_grad(*fuse, &dfused, stacked, &mut grads);
                let d_first = dstack.slice(ndarray::s![0..1, .., ..]).to_owned();
                let d_second = dstack.slice(ndarray::s![1..2, .., ..]).to_owned();
                g5 += &self.pointwise_grad(*qb, &d_second, &taps.t5, &mut grads);
                if matches!(self.layout.quality, QualityHead::Fused { .. }) {
                    let dmap4 = nn::avg_pool2_backward(d_first.view());
                    g4 += &self.pointwise_grad(*qa, &dmap4, &taps.t4, &mut grads);
                } else {
                    g5 += &self.pointwise_grad(*qa, &d_first, &taps.t5, &mut grads);
                }
            }
            _ => unreachable!("head cache matches layout"),
        }

        let k = self.config.backbone.kernel_size;
        let mut conv_idx = trace.convs.len();
        let mut g = g5;
        for si in (0..NUM_STAGES).rev() {
            if si == 3 {
                g += &g4;
            }
            let pool = &trace.pools[si];
            g = nn::max_pool2_backward(g.view(), &pool.arg, pool.h, pool.w);
            for layer in self.layout.stages[si].iter().rev() {
                conv_idx -= 1;
                let cache = &trace.convs[conv_idx];
                g.zip_mut_with(&cache.normalized, |gv, &yv| {
                    if yv <= T::zero() {
                        *gv = T::zero();
                    }
                });
                nn::instance_norm_backward_inplace(&mut g, cache.normalized.view(), &cache.inv_std);
                let (dw, db, dx) = nn::conv_backward(
                    g.view(),
                    cache.cols.view(),
                    self.params[layer.weight].as_matrix(),
                    layer.cin,
                    k,
                    conv_idx > 0,
                );
                accumulate(&mut grads[layer.weight], dw.iter());
                accumulate(&mut grads[layer.bias], db.iter());
                if let Some(dx) = dx {
                    g = dx;
                }
            }
        }
        grads
    }
}

fn accumulate<'a, T: Real>(dst: &mut [T], src: impl Iterator<Item = &'a T>) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    fn random_patch<T: Real>(side: usize, seed: u64) -> Array3<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((3, side, side), |_| T::of(rng.random_range(0.0..1.0)))
    }

    #[test]
    fn tiny_f_layout() {
        let model = Model::<f32>::build(ModelConfig::tiny(HeadVariant::F, 4, 128, 0)).unwrap();
        let shape = |n: &str| model.param(n).unwrap().shape.clone();
        assert_eq!(shape("head.distortion.weight"), vec![4, 64, 1, 1]);
        assert_eq!(shape("head.quality.map4.weight"), vec![1, 64, 1, 1]);
        assert_eq!(shape("head.quality.map5.weight"), vec![1, 64, 1, 1]);
        assert_eq!(shape("head.quality.fuse.weight"), vec![1, 2, 1, 1]);
    }

    #[test]
    fn full_scale_distortion_head() {
        let model = Model::<f32>::build(ModelConfig::new(BackboneConfig::full(), HeadVariant::F, 5, 128, 0)).unwrap();
        assert_eq!(model.param("head.distortion.weight").unwrap().shape, vec![5, 512, 1, 1]);
        assert_eq!(model.param("backbone.stage4.conv3.weight").unwrap().shape[0], 512);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::tiny(HeadVariant::F, 4, 32, 17);
        let a = Model::<f32>::build(cfg.clone()).unwrap();
        let b = Model::<f32>::build(cfg).unwrap();
        assert_eq!(a.params(), b.params());
        for p in a.params().iter().filter(|p| p.name.ends_with("bias")) {
            assert!(p.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(matches!(
            Model::<f32>::build(ModelConfig::tiny(HeadVariant::F, 4, 48, 0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Model::<f32>::build(ModelConfig::tiny(HeadVariant::C, 0, 32, 0)),
            Err(Error::Config(_))
        ));
        // quality-only variants do not need classes
        assert!(Model::<f32>::build(ModelConfig::tiny(HeadVariant::B, 0, 32, 0)).is_ok());
    }

    #[test]
    fn census_counts() {
        let a = Model::<f32>::build(ModelConfig::tiny(HeadVariant::A, 4, 128, 0)).unwrap().census();
        let b = Model::<f32>::build(ModelConfig::tiny(HeadVariant::B, 4, 128, 0)).unwrap().census();
        assert!(b.total < a.total);
        let conv1 = a.rows.iter().filter(|r| r.name.starts_with("backbone.stage1.conv1.")).map(|r| r.count).sum::<usize>();
        assert_eq!(conv1, 8 * 3 * 3 * 3 + 8);
        assert_eq!(a.total, a.rows.iter().map(|r| r.count).sum::<usize>());
    }

    #[test]
    fn shapes_follow_input_side() {
        let model = Model::<f32>::build(ModelConfig::tiny(HeadVariant::F, 4, 32, 1)).unwrap();
        for side in [32, 64, 128, 160] {
            let taps = model.forward_backbone(&random_patch(side, 2)).unwrap();
            assert_eq!(taps.t4.dim(), (64, side / 16, side / 16));
            assert_eq!(taps.t5.dim(), (64, side / 32, side / 32));
            let (map, d) = model.distortion_head(&taps).unwrap();
            assert_eq!(map.dim(), (4, side / 16, side / 16));
            assert_eq!(d.len(), 4);
            for q in model.quality_maps(&taps) {
                assert_eq!(q.dim(), (1, side / 32, side / 32));
            }
        }
    }

    #[test]
    fn wrong_input_shape() {
        let model = Model::<f32>::build(ModelConfig::tiny(HeadVariant::F, 4, 32, 1)).unwrap();
        assert!(matches!(model.forward_backbone(&Array3::zeros((3, 40, 40))), Err(Error::Shape(_))));
        assert!(matches!(model.forward(&Array3::zeros((3, 64, 64))), Err(Error::Shape(_))));
        assert!(matches!(model.forward(&Array3::zeros((1, 32, 32))), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_image_gives_finite_outputs() {
        let model = Model::<f32>::build(ModelConfig::tiny(HeadVariant::F, 4, 64, 3)).unwrap();
        let out = model.forward(&Array3::zeros((3, 64, 64))).unwrap();
        assert!(out.s.is_finite());
        assert!(out.d_logits.unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_taps_give_zero_score() {
        for variant in HeadVariant::ALL {
            let model = Model::<f64>::build(ModelConfig::tiny(variant, 4, 64, 3)).unwrap();
            let taps = FeatureTaps {
                t4: Array3::zeros((64, 4, 4)),
                t5: Array3::zeros((64, 2, 2)),
            };
            assert_eq!(model.quality_head(&taps).unwrap(), 0.0, "variant {variant}");
        }
    }

    #[test]
    fn variant_b_constant_map_passes_through() {
        let mut model = Model::<f64>::build(ModelConfig::tiny(HeadVariant::B, 4, 64, 3)).unwrap();
        // weight picks channel 0 with gain 1, bias 0.5 → map value = t5[0] + 0.5
        for p in model.params_mut() {
            if p.name == "head.quality.map5.weight" {
                p.data.iter_mut().for_each(|v| *v = 0.0);
                p.data[0] = 1.0;
            }
            if p.name == "head.quality.map5.bias" {
                p.data[0] = 0.5;
            }
        }
        let mut t5 = Array3::zeros((64, 2, 2));
        t5.index_axis_mut(Axis(0), 0).fill(2.0);
        let taps = FeatureTaps {
            t4: Array3::zeros((64, 4, 4)),
            t5,
        };
        assert_eq!(model.quality_head(&taps).unwrap(), 2.5);
    }

    #[test]
    fn quality_only_variants_have_no_logits() {
        for variant in [HeadVariant::A, HeadVariant::B] {
            let model = Model::<f32>::build(ModelConfig::tiny(variant, 4, 32, 3)).unwrap();
            assert!(model.forward(&random_patch(32, 1)).unwrap().d_logits.is_none());
        }
    }

    #[test]
    fn batched_equals_looped() {
        let model = Model::<f32>::build(ModelConfig::tiny(HeadVariant::F, 4, 32, 9)).unwrap();
        let patches: Vec<_> = (0..5).map(|i| random_patch::<f32>(32, 100 + i)).collect();
        let batched = model.forward_batch(&patches, Exec::Parallel).unwrap();
        for (p, b) in patches.iter().zip(&batched) {
            assert_eq!(&model.forward(p).unwrap(), b);
        }
        assert_eq!(batched, model.forward_batch(&patches, Exec::Sequential).unwrap());
    }

    #[test]
    fn train_forward_matches_inference() {
        for variant in HeadVariant::ALL {
            let model = Model::<f64>::build(ModelConfig::tiny(variant, 3, 64, 4)).unwrap();
            let p = random_patch::<f64>(64, 8);
            let (out, _) = model.forward_train(&p).unwrap();
            assert_eq!(out, model.forward(&p).unwrap());
        }
    }
}
