//! The five two-layer MLPs that turn an anchor's feature and its relation to
//! the camera into neural-Gaussian attributes, with exact backward passes.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scaffold::{Anchor, FEATURE_DIM};

/// Hidden width of every decoder MLP.
pub const HIDDEN: usize = 32;
/// Attribute-head input: blended feature, distance, direction.
pub const HEAD_INPUT: usize = FEATURE_DIM + 1 + 3;
/// Feature-bank weight net input: distance, direction.
pub const BANK_INPUT: usize = 4;

/// `Linear(in → 32) → ReLU → Linear(32 → out)` with parameters packed as
/// `[w1 (32×in, row-major), b1 (32), w2 (out×32), b2 (out)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub in_dim: usize,
    pub out_dim: usize,
    pub params: Vec<f64>,
}

/// Activations saved by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl Mlp {
    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        HIDDEN * in_dim + HIDDEN + out_dim * HIDDEN + out_dim
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            params: vec![0.0; Self::param_count(in_dim, out_dim)],
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut mlp = Self::zeros(in_dim, out_dim);
        let (w1, _, w2, _) = mlp.split_mut();
        let b = 1.0 / (in_dim as f64).sqrt();
        for w in w1.iter_mut() {
            *w = rng.gen_range(-b..=b);
        }
        let b = 1.0 / (HIDDEN as f64).sqrt();
        for w in w2.iter_mut() {
            *w = rng.gen_range(-b..=b);
        }
        mlp
    }

    fn offsets(&self) -> [usize; 3] {
        let a = HIDDEN * self.in_dim;
        let b = a + HIDDEN;
        let c = b + self.out_dim * HIDDEN;
        [a, b, c]
    }

    pub fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let [a, b, c] = self.offsets();
        let (w1, rest) = self.params.split_at(a);
        let (b1, rest) = rest.split_at(b - a);
        let (w2, b2) = rest.split_at(c - b);
        (w1, b1, w2, b2)
    }

    fn split_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64], &mut [f64]) {
        let [a, b, c] = self.offsets();
        let (w1, rest) = self.params.split_at_mut(a);
        let (b1, rest) = rest.split_at_mut(b - a);
        let (w2, b2) = rest.split_at_mut(c - b);
        (w1, b1, w2, b2)
    }

    pub fn forward(&self, input: &[f64], out: &mut [f64]) -> MlpCache {
        debug_assert_eq!(input.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        let (w1, b1, w2, b2) = self.split();
        let mut hidden = vec![0.0; HIDDEN];
        for (h, (row, bias)) in hidden.iter_mut().zip(w1.chunks_exact(self.in_dim).zip(b1)) {
            let z = bias + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
            *h = z.max(0.0);
        }
        for (o, (row, bias)) in out.iter_mut().zip(w2.chunks_exact(HIDDEN).zip(b2)) {
            *o = bias + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
        }
        MlpCache {
            input: input.to_vec(),
            hidden,
        }
    }

    /// Accumulates parameter gradients into `grad` and, when requested, adds
    /// the input gradient into `dinput`. ReLU has zero subgradient at 0.
    pub fn backward(
        &self,
        cache: &MlpCache,
        dout: &[f64],
        grad: &mut [f64],
        dinput: Option<&mut [f64]>,
    ) {
        debug_assert_eq!(grad.len(), self.params.len());
        let [oa, ob, oc] = self.offsets();
        let (w1, _, w2, _) = self.split();
        let (gw1, rest) = grad.split_at_mut(oa);
        let (gb1, rest) = rest.split_at_mut(ob - oa);
        let (gw2, gb2) = rest.split_at_mut(oc - ob);

        let mut dhidden = [0.0; HIDDEN];
        for (o, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb2[o] += d;
            let row = &w2[o * HIDDEN..(o + 1) * HIDDEN];
            let grow = &mut gw2[o * HIDDEN..(o + 1) * HIDDEN];
            for j in 0..HIDDEN {
                grow[j] += d * cache.hidden[j];
                dhidden[j] += d * row[j];
            }
        }
        let mut dinput = dinput;
        for j in 0..HIDDEN {
            if cache.hidden[j] <= 0.0 {
                continue;
            }
            let dz = dhidden[j];
            gb1[j] += dz;
            let grow = &mut gw1[j * self.in_dim..(j + 1) * self.in_dim];
            for (g, x) in grow.iter_mut().zip(&cache.input) {
                *g += dz * x;
            }
            if let Some(di) = dinput.as_deref_mut() {
                let row = &w1[j * self.in_dim..(j + 1) * self.in_dim];
                for (d, w) in di.iter_mut().zip(row) {
                    *d += dz * w;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    FeatureBank = 0,
    Opacity = 1,
    Color = 2,
    Rotation = 3,
    Scale = 4,
}

impl Head {
    pub const ALL: [Head; 5] = [
        Head::FeatureBank,
        Head::Opacity,
        Head::Color,
        Head::Rotation,
        Head::Scale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Head::FeatureBank => "feature_bank",
            Head::Opacity => "opacity",
            Head::Color => "color",
            Head::Rotation => "rotation",
            Head::Scale => "scale",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSet {
    pub k: usize,
    /// Indexed by [`Head`].
    pub nets: [Mlp; 5],
}

/// Gradient buffers shaped like [`DecoderSet::nets`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads(pub [Vec<f64>; 5]);

impl DecoderGrads {
    pub fn add(&mut self, other: &DecoderGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl DecoderSet {
    fn shapes(k: usize) -> [(usize, usize); 5] {
        [
            (BANK_INPUT, 3),
            (HEAD_INPUT, k),
            (HEAD_INPUT, 3 * k),
            (HEAD_INPUT, 4 * k),
            (HEAD_INPUT, 3 * k),
        ]
    }

    pub fn init<R: Rng>(k: usize, rng: &mut R) -> Self {
        let nets = Self::shapes(k).map(|(i, o)| Mlp::init(i, o, rng));
        Self { k, nets }
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            nets: Self::shapes(k).map(|(i, o)| Mlp::zeros(i, o)),
        }
    }

    pub fn net(&self, head: Head) -> &Mlp {
        &self.nets[head as usize]
    }

    pub fn net_mut(&mut self, head: Head) -> &mut Mlp {
        &mut self.nets[head as usize]
    }

    pub fn zero_grads(&self) -> DecoderGrads {
        DecoderGrads(self.nets.clone().map(|n| vec![0.0; n.params.len()]))
    }

    pub fn param_counts(&self) -> [usize; 5] {
        self.nets.clone().map(|n| n.params.len())
    }
}

/// Camera-relative inputs for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewContext {
    pub distance: f64,
    pub direction: Vector3<f64>,
    pub blended_feature: [f64; FEATURE_DIM],
    pub bank_weights: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct ViewCache {
    bank: MlpCache,
    pooled: [[f64; FEATURE_DIM]; 3],
}

/// Averages consecutive groups of `group` entries and repeats each mean
/// `group` times. The operator is symmetric, so it is also its own transpose.
pub fn pool_repeat(f: &[f64; FEATURE_DIM], group: usize) -> [f64; FEATURE_DIM] {
    let mut out = [0.0; FEATURE_DIM];
    for (src, dst) in f.chunks_exact(group).zip(out.chunks_exact_mut(group)) {
        let mean = src.iter().sum::<f64>() / group as f64;
        dst.fill(mean);
    }
    out
}

fn softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = z.map(|v| (v - m).exp());
    let s = e[0] + e[1] + e[2];
    e.map(|v| v / s)
}

/// Distance, direction and view-blended feature of `anchor` seen from `camera_position`.
pub fn view_context(
    anchor: &Anchor,
    camera_position: &Vector3<f64>,
    decoders: &DecoderSet,
) -> Result<(ViewContext, ViewCache)> {
    let rel = anchor.position - camera_position;
    let distance = rel.norm();
    if !(distance > 0.0) {
        return Err(Error::Validation("camera coincides with anchor".into()));
    }
    let direction = rel / distance;
    let input = [distance, direction.x, direction.y, direction.z];
    let mut logits = [0.0; 3];
    let bank = decoders.net(Head::FeatureBank).forward(&input, &mut logits);
    let w = softmax3(logits);
    let pooled = [
        anchor.feature,
        pool_repeat(&anchor.feature, 2),
        pool_repeat(&anchor.feature, 4),
    ];
    let mut blended = [0.0; FEATURE_DIM];
    for (i, b) in blended.iter_mut().enumerate() {
        *b = w[0] * pooled[0][i] + w[1] * pooled[1][i] + w[2] * pooled[2][i];
    }
    Ok((
        ViewContext {
            distance,
            direction,
            blended_feature: blended,
            bank_weights: w,
        },
        ViewCache { bank, pooled },
    ))
}

/// Activated head outputs for the `k` Gaussians of one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedHeads {
    /// `tanh` outputs in (-1, 1).
    pub opacity: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<[f64; 3]>,
    /// Raw quaternions with zero norm, replaced by the identity.
    pub degenerate_rotations: usize,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    caches: [MlpCache; 4],
    raw_rotations: Vec<[f64; 4]>,
    scale_sigmoid: Vec<f64>,
    base_scale: [f64; 3],
}

fn head_input(ctx: &ViewContext) -> [f64; HEAD_INPUT] {
    let mut x = [0.0; HEAD_INPUT];
    x[..FEATURE_DIM].copy_from_slice(&ctx.blended_feature);
    x[FEATURE_DIM] = ctx.distance;
    x[FEATURE_DIM + 1] = ctx.direction.x;
    x[FEATURE_DIM + 2] = ctx.direction.y;
    x[FEATURE_DIM + 3] = ctx.direction.z;
    x
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Runs the four attribute heads once for all `k` Gaussians of an anchor.
pub fn decode_attributes(
    ctx: &ViewContext,
    decoders: &DecoderSet,
    anchor: &Anchor,
) -> (DecodedHeads, HeadCache) {
    let k = decoders.k;
    let x = head_input(ctx);

    let mut alpha = vec![0.0; k];
    let ca = decoders.net(Head::Opacity).forward(&x, &mut alpha);
    for a in alpha.iter_mut() {
        *a = a.tanh();
    }

    let mut color = vec![0.0; 3 * k];
    let cc = decoders.net(Head::Color).forward(&x, &mut color);
    let colors = color
        .chunks_exact(3)
        .map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])])
        .collect();

    let mut rot = vec![0.0; 4 * k];
    let cr = decoders.net(Head::Rotation).forward(&x, &mut rot);
    let raw_rotations: Vec<[f64; 4]> = rot
        .chunks_exact(4)
        .map(|q| [q[0], q[1], q[2], q[3]])
        .collect();
    let mut degenerate = 0;
    let rotations = raw_rotations
        .iter()
        .map(|q| {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.0 && n.is_finite() {
                q.map(|v| v / n)
            } else {
                degenerate += 1;
                [1.0, 0.0, 0.0, 0.0]
            }
        })
        .collect();

    let mut sc = vec![0.0; 3 * k];
    let cs = decoders.net(Head::Scale).forward(&x, &mut sc);
    let scale_sigmoid: Vec<f64> = sc.iter().map(|&z| sigmoid(z)).collect();
    let base_scale = anchor.base_scale();
    let scales = scale_sigmoid
        .chunks_exact(3)
        .map(|s| {
            [
                s[0] * base_scale[0],
                s[1] * base_scale[1],
                s[2] * base_scale[2],
            ]
        })
        .collect();

    (
        DecodedHeads {
            opacity: alpha,
            colors,
            rotations,
            scales,
            degenerate_rotations: degenerate,
        },
        HeadCache {
            caches: [ca, cc, cr, cs],
            raw_rotations,
            scale_sigmoid,
            base_scale,
        },
    )
}

/// Upstream gradients w.r.t. the activated head outputs of one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub opacity: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<[f64; 3]>,
}

impl HeadGrads {
    pub fn zeros(k: usize) -> Self {
        Self {
            opacity: vec![0.0; k],
            colors: vec![[0.0; 3]; k],
            rotations: vec![[0.0; 4]; k],
            scales: vec![[0.0; 3]; k],
        }
    }
}

/// Gradients reaching an anchor's own parameters through the decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorInputGrads {
    pub feature: [f64; FEATURE_DIM],
    pub log_base_scale: [f64; 3],
}

/// Backpropagates head-output gradients through the heads, the feature bank
/// blend and the bank-weight net.
pub fn backward(
    decoders: &DecoderSet,
    ctx: &ViewContext,
    view_cache: &ViewCache,
    head_cache: &HeadCache,
    heads: &DecodedHeads,
    upstream: &HeadGrads,
    grads: &mut DecoderGrads,
) -> Result<AnchorInputGrads> {
    let k = decoders.k;
    if upstream.opacity.len() != k
        || upstream.colors.len() != k
        || upstream.rotations.len() != k
        || upstream.scales.len() != k
        || heads.opacity.len() != k
    {
        return Err(Error::Internal(format!(
            "decoder backward expects k = {k} gradients per head"
        )));
    }
    let mut dx = [0.0; HEAD_INPUT];

    let dz: Vec<f64> = heads
        .opacity
        .iter()
        .zip(&upstream.opacity)
        .map(|(a, g)| g * (1.0 - a * a))
        .collect();
    let [ca, cc, cr, cs] = &head_cache.caches;
    decoders.net(Head::Opacity).backward(
        ca,
        &dz,
        &mut grads.0[Head::Opacity as usize],
        Some(&mut dx),
    );

    let dz: Vec<f64> = heads
        .colors
        .iter()
        .zip(&upstream.colors)
        .flat_map(|(c, g)| (0..3).map(move |i| g[i] * c[i] * (1.0 - c[i])))
        .collect();
    decoders
        .net(Head::Color)
        .backward(cc, &dz, &mut grads.0[Head::Color as usize], Some(&mut dx));

    let mut dz = vec![0.0; 4 * k];
    for (i, (raw, g)) in head_cache
        .raw_rotations
        .iter()
        .zip(&upstream.rotations)
        .enumerate()
    {
        let n = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2] + raw[3] * raw[3]).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            continue;
        }
        let q = heads.rotations[i];
        let dot = q[0] * g[0] + q[1] * g[1] + q[2] * g[2] + q[3] * g[3];
        for j in 0..4 {
            dz[4 * i + j] = (g[j] - q[j] * dot) / n;
        }
    }
    decoders.net(Head::Rotation).backward(
        cr,
        &dz,
        &mut grads.0[Head::Rotation as usize],
        Some(&mut dx),
    );

    let mut dz = vec![0.0; 3 * k];
    let mut dbase = [0.0; 3];
    for (i, g) in upstream.scales.iter().enumerate() {
        for j in 0..3 {
            let s = head_cache.scale_sigmoid[3 * i + j];
            dz[3 * i + j] = g[j] * head_cache.base_scale[j] * s * (1.0 - s);
            dbase[j] += g[j] * s;
        }
    }
    decoders
        .net(Head::Scale)
        .backward(cs, &dz, &mut grads.0[Head::Scale as usize], Some(&mut dx));

    // blended feature = Σ w_n · pooled_n
    let dblend = &dx[..FEATURE_DIM];
    let w = ctx.bank_weights;
    let mut dfeature = [0.0; FEATURE_DIM];
    let mut dw = [0.0; 3];
    for (n, pooled) in view_cache.pooled.iter().enumerate() {
        dw[n] = dblend.iter().zip(pooled).map(|(a, b)| a * b).sum();
    }
    let mut scaled = [[0.0; FEATURE_DIM]; 3];
    for (n, s) in scaled.iter_mut().enumerate() {
        for (v, d) in s.iter_mut().zip(dblend) {
            *v = w[n] * d;
        }
    }
    let back1 = pool_repeat(&scaled[1], 2);
    let back2 = pool_repeat(&scaled[2], 4);
    for i in 0..FEATURE_DIM {
        dfeature[i] = scaled[0][i] + back1[i] + back2[i];
    }

    let mix: f64 = (0..3).map(|n| w[n] * dw[n]).sum();
    let dlogits: Vec<f64> = (0..3).map(|n| w[n] * (dw[n] - mix)).collect();
    decoders.net(Head::FeatureBank).backward(
        &view_cache.bank,
        &dlogits,
        &mut grads.0[Head::FeatureBank as usize],
        None,
    );

    Ok(AnchorInputGrads {
        feature: dfeature,
        log_base_scale: [
            dbase[0] * head_cache.base_scale[0],
            dbase[1] * head_cache.base_scale[1],
            dbase[2] * head_cache.base_scale[2],
        ],
    })
}
