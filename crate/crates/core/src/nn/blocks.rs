//! Network building blocks: convolution, group norm, SPADE, residual and
//! self-attention blocks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use super::ops::{self, ConvSpec, Padding};
use super::params::{Grads, Init, ParamId, ParamStore};
use crate::real::{gemm, Mat};
use crate::{FeatureMap, Real};

/// Number of normalization groups for `channels` channels: the largest
/// divisor up to 8 that leaves at least 4 channels per group. A group of one
/// channel would cancel the per-channel time-embedding offset.
pub fn groups_for(channels: usize) -> usize {
    (1..=8).rev().find(|&g| channels.is_multiple_of(g) && channels / g >= 4).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    weight: ParamId,
    bias: ParamId,
    spec: ConvSpec,
}

impl Conv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            vec![spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
            Init::FanIn(spec.patch_len()),
            rng,
        );
        let bias = store.add(format!("{name}.bias"), vec![spec.out_channels], Init::Zeros, rng);
        Conv { weight, bias, spec }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<T>) {
        ops::conv_forward(store.get(self.weight), store.get(self.bias), x, &self.spec)
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        col: &[T],
        dy: &FeatureMap<T>,
        grads: &mut Grads<T>,
        need_input: bool,
    ) -> Option<FeatureMap<T>> {
        let (dw, db) = grads.pair_mut(self.weight, self.bias);
        ops::conv_backward(store.get(self.weight), col, dy, &self.spec, dw, db, need_input)
    }
}

fn conv3(in_channels: usize, out_channels: usize) -> ConvSpec {
    ConvSpec { in_channels, out_channels, kernel: 3, padding: Padding::Zero }
}

fn conv1(in_channels: usize, out_channels: usize) -> ConvSpec {
    ConvSpec { in_channels, out_channels, kernel: 1, padding: Padding::Zero }
}

#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    gain: ParamId,
    bias: ParamId,
    groups: usize,
}

pub(crate) struct NormCache<T> {
    xhat: FeatureMap<T>,
    rstd: Vec<T>,
}

impl GroupNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let gain = store.add(format!("{name}.gain"), vec![channels], Init::Ones, rng);
        let bias = store.add(format!("{name}.bias"), vec![channels], Init::Zeros, rng);
        GroupNorm { gain, bias, groups: groups_for(channels) }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &FeatureMap<T>) -> (FeatureMap<T>, NormCache<T>) {
        let (xhat, rstd) = ops::normalize(x, self.groups);
        let y = ops::affine(&xhat, store.get(self.gain), store.get(self.bias));
        (y, NormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &NormCache<T>,
        dy: &FeatureMap<T>,
        grads: &mut Grads<T>,
    ) -> FeatureMap<T> {
        let (dg, db) = grads.pair_mut(self.gain, self.bias);
        let dxhat = ops::affine_backward(&cache.xhat, store.get(self.gain), dy, dg, db);
        ops::normalize_backward(&cache.xhat, &cache.rstd, &dxhat)
    }
}

/// Spatially-adaptive normalization: parameter-free group norm modulated by
/// per-pixel scale and shift fields computed from the nuclei structure.
#[derive(Debug, Clone)]
pub(crate) struct Spade {
    channels: usize,
    groups: usize,
    head: Conv,
    modulation: Conv,
}

pub(crate) struct SpadeCache<T> {
    xhat: FeatureMap<T>,
    rstd: Vec<T>,
    head_col: Vec<T>,
    hidden: FeatureMap<T>,
    mod_col: Vec<T>,
    gamma_beta: FeatureMap<T>,
}

impl Spade {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let head = Conv::new(
            store,
            &format!("{name}.head"),
            ConvSpec { in_channels: cond_channels, out_channels: hidden, kernel: 3, padding: Padding::Replicate },
            rng,
        );
        let modulation = Conv::new(
            store,
            &format!("{name}.modulation"),
            ConvSpec { in_channels: hidden, out_channels: 2 * channels, kernel: 3, padding: Padding::Replicate },
            rng,
        );
        Spade { channels, groups: groups_for(channels), head, modulation }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &FeatureMap<T>,
        cond: &FeatureMap<T>,
    ) -> (FeatureMap<T>, SpadeCache<T>) {
        let (xhat, rstd) = ops::normalize(x, self.groups);
        let small = ops::resize_nearest(cond, x.height, x.width);
        let (hidden, head_col) = self.head.forward(store, &small);
        let (gamma_beta, mod_col) = self.modulation.forward(store, &ops::silu_map(&hidden));
        let n = x.plane_len();
        let c = self.channels;
        let mut y = xhat.clone();
        for (i, v) in y.data.iter_mut().enumerate() {
            let gamma = gamma_beta.data[i];
            let beta = gamma_beta.data[c * n + i];
            *v = *v * (T::one() + gamma) + beta;
        }
        (y, SpadeCache { xhat, rstd, head_col, hidden, mod_col, gamma_beta })
    }

    /// Returns the input gradient and, when `want_cond`, the per-channel sum
    /// of the gradient w.r.t. the (resized) condition.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &SpadeCache<T>,
        dy: &FeatureMap<T>,
        grads: &mut Grads<T>,
        want_cond: bool,
    ) -> (FeatureMap<T>, Option<Vec<T>>) {
        let n = dy.plane_len();
        let c = self.channels;
        let mut dgb = FeatureMap::zeros(2 * c, dy.height, dy.width);
        let mut dxhat = dy.clone();
        for i in 0..c * n {
            let d = dy.data[i];
            dgb.data[i] = d * cache.xhat.data[i];
            dgb.data[c * n + i] = d;
            dxhat.data[i] = d * (T::one() + cache.gamma_beta.data[i]);
        }
        let dact = self.modulation.backward(store, &cache.mod_col, &dgb, grads, true).expect("input grad");
        let dhidden = ops::silu_map_backward(&cache.hidden, &dact);
        let dcond = self.head.backward(store, &cache.head_col, &dhidden, grads, want_cond);
        let sums = dcond.map(|d| (0..d.channels).map(|ch| ops::sum(d.plane(ch))).collect());
        (ops::normalize_backward(&cache.xhat, &cache.rstd, &dxhat), sums)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Norm {
    Group(GroupNorm),
    Spade(Spade),
}

pub(crate) enum AnyNormCache<T> {
    Group(NormCache<T>),
    Spade(SpadeCache<T>),
}

impl Norm {
    fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &FeatureMap<T>,
        cond: Option<&FeatureMap<T>>,
    ) -> (FeatureMap<T>, AnyNormCache<T>) {
        match self {
            Norm::Group(n) => {
                let (y, c) = n.forward(store, x);
                (y, AnyNormCache::Group(c))
            }
            Norm::Spade(s) => {
                let (y, c) = s.forward(store, x, cond.expect("SPADE block needs a condition"));
                (y, AnyNormCache::Spade(c))
            }
        }
    }

    fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &AnyNormCache<T>,
        dy: &FeatureMap<T>,
        grads: &mut Grads<T>,
        want_cond: bool,
    ) -> (FeatureMap<T>, Option<Vec<T>>) {
        match (self, cache) {
            (Norm::Group(n), AnyNormCache::Group(c)) => (n.backward(store, c, dy, grads), None),
            (Norm::Spade(s), AnyNormCache::Spade(c)) => s.backward(store, c, dy, grads, want_cond),
            _ => unreachable!("norm cache does not match its layer"),
        }
    }
}

fn add_sums<T: Real>(acc: &mut Option<Vec<T>>, more: Option<Vec<T>>) {
    if let Some(m) = more {
        match acc {
            Some(a) => a.iter_mut().zip(m).for_each(|(x, y)| *x += y),
            None => *acc = Some(m),
        }
    }
}

/// Two norm-SiLU-conv stages with the projected time embedding added after
/// the first, plus a (1x1 projected when needed) skip connection. The norms
/// are SPADE in the conditional variant.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb_weight: ParamId,
    temb_bias: ParamId,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

pub(crate) struct ResCache<T> {
    n1: AnyNormCache<T>,
    pre1: FeatureMap<T>,
    col1: Vec<T>,
    n2: AnyNormCache<T>,
    pre2: FeatureMap<T>,
    col2: Vec<T>,
    skip_col: Option<Vec<T>>,
}

/// How a residual block normalizes.
#[derive(Debug, Clone, Copy)]
pub(crate) enum NormKind {
    Group,
    /// SPADE with the given condition channels and head width.
    Spade { cond_channels: usize, hidden: usize },
}

impl ResBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        temb_dim: usize,
        kind: NormKind,
        rng: &mut R,
    ) -> Self {
        let make_norm = |store: &mut ParamStore<T>, tag: &str, ch: usize, rng: &mut R| match kind {
            NormKind::Group => Norm::Group(GroupNorm::new(store, &format!("{name}.{tag}"), ch, rng)),
            NormKind::Spade { cond_channels, hidden } => {
                Norm::Spade(Spade::new(store, &format!("{name}.{tag}"), ch, cond_channels, hidden, rng))
            }
        };
        let norm1 = make_norm(store, "norm1", in_channels, rng);
        let first = Conv::new(store, &format!("{name}.conv1"), conv3(in_channels, out_channels), rng);
        let temb_weight =
            store.add(format!("{name}.temb.weight"), vec![out_channels, temb_dim], Init::FanIn(temb_dim), rng);
        let temb_bias = store.add(format!("{name}.temb.bias"), vec![out_channels], Init::Zeros, rng);
        let norm2 = make_norm(store, "norm2", out_channels, rng);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), conv3(out_channels, out_channels), rng);
        let skip = (in_channels != out_channels)
            .then(|| Conv::new(store, &format!("{name}.skip"), conv1(in_channels, out_channels), rng));
        ResBlock { norm1, conv1: first, temb_weight, temb_bias, norm2, conv2, skip }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &FeatureMap<T>,
        temb: &[T],
        cond: Option<&FeatureMap<T>>,
    ) -> (FeatureMap<T>, ResCache<T>) {
        let (pre1, n1) = self.norm1.forward(store, x, cond);
        let (mut h, col1) = self.conv1.forward(store, &ops::silu_map(&pre1));
        let proj = ops::linear(store.get(self.temb_weight), store.get(self.temb_bias), temb);
        for (c, &p) in proj.iter().enumerate() {
            for v in h.plane_mut(c) {
                *v += p;
            }
        }
        let (pre2, n2) = self.norm2.forward(store, &h, cond);
        let (mut y, col2) = self.conv2.forward(store, &ops::silu_map(&pre2));
        let skip_col = match &self.skip {
            Some(conv) => {
                let (s, col) = conv.forward(store, x);
                ops::add_assign(&mut y, &s);
                Some(col)
            }
            None => {
                ops::add_assign(&mut y, x);
                None
            }
        };
        (y, ResCache { n1, pre1, col1, n2, pre2, col2, skip_col })
    }

    /// Returns `(dx, d temb, condition gradient sums)`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &ResCache<T>,
        temb: &[T],
        dy: &FeatureMap<T>,
        grads: &mut Grads<T>,
        want_cond: bool,
    ) -> (FeatureMap<T>, Vec<T>, Option<Vec<T>>) {
        let ds2 = self.conv2.backward(store, &cache.col2, dy, grads, true).expect("input grad");
        let dpre2 = ops::silu_map_backward(&cache.pre2, &ds2);
        let (dh, mut cond_sums) = self.norm2.backward(store, &cache.n2, &dpre2, grads, want_cond);

        let dproj: Vec<T> = (0..dh.channels).map(|c| ops::sum(dh.plane(c))).collect();
        let dtemb = {
            let (dw, db) = grads.pair_mut(self.temb_weight, self.temb_bias);
            ops::linear_backward(store.get(self.temb_weight), temb, &dproj, dw, db)
        };

        let ds1 = self.conv1.backward(store, &cache.col1, &dh, grads, true).expect("input grad");
        let dpre1 = ops::silu_map_backward(&cache.pre1, &ds1);
        let (mut dx, sums1) = self.norm1.backward(store, &cache.n1, &dpre1, grads, want_cond);
        add_sums(&mut cond_sums, sums1);

        match (&self.skip, &cache.skip_col) {
            (Some(conv), Some(col)) => {
                let ds = conv.backward(store, col, dy, grads, true).expect("input grad");
                ops::add_assign(&mut dx, &ds);
            }
            _ => ops::add_assign(&mut dx, dy),
        }
        (dx, dtemb, cond_sums)
    }
}

/// Single-head self-attention over spatial positions with a residual
/// connection.
#[derive(Debug, Clone)]
pub(crate) struct AttnBlock {
    norm: GroupNorm,
    query: Conv,
    key: Conv,
    value: Conv,
    out: Conv,
}

pub(crate) struct AttnCache<T> {
    norm: NormCache<T>,
    hn: Vec<T>,
    q: FeatureMap<T>,
    k: FeatureMap<T>,
    v: FeatureMap<T>,
    attn: Vec<T>,
    o: Vec<T>,
}

impl AttnBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        AttnBlock {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, rng),
            query: Conv::new(store, &format!("{name}.query"), conv1(channels, channels), rng),
            key: Conv::new(store, &format!("{name}.key"), conv1(channels, channels), rng),
            value: Conv::new(store, &format!("{name}.value"), conv1(channels, channels), rng),
            out: Conv::new(store, &format!("{name}.out"), conv1(channels, channels), rng),
        }
    }

    fn scale<T: Real>(channels: usize) -> T {
        T::of(1.0 / (channels as f64).sqrt())
    }

    /// Attention weights, `[positions, positions]` row-stochastic.
    #[cfg(test)]
    pub fn weights<T: Real>(&self, store: &ParamStore<T>, x: &FeatureMap<T>) -> Vec<T> {
        self.forward(store, x).1.attn
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &FeatureMap<T>) -> (FeatureMap<T>, AttnCache<T>) {
        let (c, n) = (x.channels, x.plane_len());
        let (hn, norm) = self.norm.forward(store, x);
        let (q, _) = self.query.forward(store, &hn);
        let (k, _) = self.key.forward(store, &hn);
        let (v, _) = self.value.forward(store, &hn);
        let mut attn = vec![T::zero(); n * n];
        // scores[i, j] = <q[:, i], k[:, j]>
        gemm(n, c, n, Mat::rm_t(&q.data, n), Mat::rm(&k.data, n), T::zero(), &mut attn);
        let s = Self::scale::<T>(c);
        attn.iter_mut().for_each(|a| *a *= s);
        ops::softmax_rows(&mut attn, n);
        // o[:, i] = sum_j attn[i, j] v[:, j]
        let mut o = FeatureMap::zeros(c, x.height, x.width);
        gemm(c, n, n, Mat::rm(&v.data, n), Mat::rm_t(&attn, n), T::zero(), &mut o.data);
        let (mut y, _) = self.out.forward(store, &o);
        ops::add_assign(&mut y, x);
        (y, AttnCache { norm, hn: hn.data, q, k, v, attn, o: o.data })
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &AttnCache<T>,
        dy: &FeatureMap<T>,
        grads: &mut Grads<T>,
    ) -> FeatureMap<T> {
        let (c, n) = (dy.channels, dy.plane_len());
        let do_ = self.out.backward(store, &cache.o, dy, grads, true).expect("input grad");
        let mut dv = FeatureMap::zeros(c, dy.height, dy.width);
        gemm(c, n, n, Mat::rm(&do_.data, n), Mat::rm(&cache.attn, n), T::zero(), &mut dv.data);
        let mut ds = vec![T::zero(); n * n];
        gemm(n, c, n, Mat::rm_t(&do_.data, n), Mat::rm(&cache.v.data, n), T::zero(), &mut ds);
        for (row_a, row_d) in cache.attn.chunks(n).zip(ds.chunks_mut(n)) {
            let dot = T::of(row_a.iter().zip(row_d.iter()).map(|(a, d)| a.as_f64() * d.as_f64()).sum::<f64>());
            for (d, &a) in row_d.iter_mut().zip(row_a) {
                *d = a * (*d - dot);
            }
        }
        let s = Self::scale::<T>(c);
        ds.iter_mut().for_each(|d| *d *= s);
        let mut dq = FeatureMap::zeros(c, dy.height, dy.width);
        gemm(c, n, n, Mat::rm(&cache.k.data, n), Mat::rm_t(&ds, n), T::zero(), &mut dq.data);
        let mut dk = FeatureMap::zeros(c, dy.height, dy.width);
        gemm(c, n, n, Mat::rm(&cache.q.data, n), Mat::rm(&ds, n), T::zero(), &mut dk.data);

        let mut dhn = self.query.backward(store, &cache.hn, &dq, grads, true).expect("input grad");
        ops::add_assign(&mut dhn, &self.key.backward(store, &cache.hn, &dk, grads, true).expect("input grad"));
        ops::add_assign(&mut dhn, &self.value.backward(store, &cache.hn, &dv, grads, true).expect("input grad"));
        let mut dx = self.norm.backward(store, &cache.norm, &dhn, grads);
        ops::add_assign(&mut dx, dy);
        dx
    }
}
