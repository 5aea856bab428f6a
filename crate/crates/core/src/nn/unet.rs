//! The noise-prediction U-Net.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::blocks::{AttnBlock, AttnCache, Conv, GroupNorm, NormCache, NormKind, ResBlock, ResCache};
use super::ops::{self, ConvSpec, Padding};
use super::params::{Grads, Init, ParamId, ParamStore};
use super::time::time_embed;
use crate::diffusion::Denoiser;
use crate::rng::stream_rng;
use crate::structure::NucleiStructure;
use crate::{Error, FeatureMap, Raster, Real, Result};

/// Channels of images and structures alike.
pub const DATA_CHANNELS: usize = 3;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkShape {
    pub levels: usize,
    /// Width of each level, `levels` entries.
    pub channels: Vec<usize>,
    /// 1-based levels that carry self-attention.
    pub attn_levels: Vec<usize>,
    /// Training resolution (square).
    pub resolution: usize,
    /// Residual blocks per level on each side.
    pub res_blocks: usize,
    /// Hidden width of the SPADE heads.
    pub spade_hidden: usize,
}

impl NetworkShape {
    /// 3 levels of 16/32/64 channels, attention on the last, 32x32.
    pub fn desk_default() -> Self {
        NetworkShape {
            levels: 3,
            channels: vec![16, 32, 64],
            attn_levels: vec![3],
            resolution: 32,
            res_blocks: 1,
            spade_hidden: 32,
        }
    }

    /// 6 levels of 256..1024 channels with attention on the last three.
    pub fn large() -> Self {
        NetworkShape {
            levels: 6,
            channels: vec![256, 256, 512, 512, 1024, 1024],
            attn_levels: vec![4, 5, 6],
            resolution: 256,
            res_blocks: 2,
            spade_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::arg("network needs at least one level"));
        }
        if self.channels.len() != self.levels {
            return Err(Error::arg(format!(
                "{} channel widths given for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.channels.contains(&0) || self.res_blocks == 0 || self.spade_hidden == 0 {
            return Err(Error::arg("channel widths, res_blocks and spade_hidden must be positive"));
        }
        if let Some(&l) = self.attn_levels.iter().find(|&&l| l == 0 || l > self.levels) {
            return Err(Error::arg(format!("attention level {l} outside 1..={}", self.levels)));
        }
        self.check_resolution(self.resolution, self.resolution)
    }

    /// Spatial sizes must survive `levels - 1` halvings.
    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << (self.levels - 1);
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::shape(format!(
                "resolution {height}x{width} not divisible by 2^(levels-1) = {f}"
            )));
        }
        Ok(())
    }

    /// Width of the sinusoidal step embedding.
    pub fn temb_dim(&self) -> usize {
        4 * self.channels[0]
    }

    fn has_attn(&self, level: usize) -> bool {
        self.attn_levels.contains(&(level + 1))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<ResBlock>,
    attns: Vec<Option<AttnBlock>>,
}

type StageCache<T> = Vec<(ResCache<T>, Option<AttnCache<T>>)>;

impl Stage {
    fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        mut h: FeatureMap<T>,
        temb: &[T],
        cond: Option<&FeatureMap<T>>,
    ) -> (FeatureMap<T>, StageCache<T>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (block, attn) in self.blocks.iter().zip(&self.attns) {
            let (y, rc) = block.forward(store, &h, temb, cond);
            h = y;
            let ac = attn.as_ref().map(|a| {
                let (y, ac) = a.forward(store, &h);
                h = y;
                ac
            });
            caches.push((rc, ac));
        }
        (h, caches)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        caches: &StageCache<T>,
        temb: &[T],
        mut dh: FeatureMap<T>,
        grads: &mut Grads<T>,
        dtemb: &mut [T],
        cond_sums: &mut [T],
        want_cond: bool,
    ) -> FeatureMap<T> {
        for ((block, attn), (rc, ac)) in self.blocks.iter().zip(&self.attns).zip(caches).rev() {
            if let (Some(a), Some(ac)) = (attn, ac) {
                dh = a.backward(store, ac, &dh, grads);
            }
            let (dx, dt, cs) = block.backward(store, rc, temb, &dh, grads, want_cond);
            dh = dx;
            dtemb.iter_mut().zip(dt).for_each(|(a, b)| *a += b);
            if let Some(cs) = cs {
                cond_sums.iter_mut().zip(cs).for_each(|(a, b)| *a += b);
            }
        }
        dh
    }
}

/// U-Net noise predictor. The conditional variant uses SPADE residual blocks
/// in the decoder and substitutes a learned null structure when no condition
/// is given.
#[derive(Debug, Clone)]
pub struct Unet<T> {
    shape: NetworkShape,
    conditional: bool,
    store: ParamStore<T>,
    temb1: (ParamId, ParamId),
    temb2: (ParamId, ParamId),
    conv_in: Conv,
    down: Vec<Stage>,
    mid: Stage,
    up: Vec<Stage>,
    out_norm: GroupNorm,
    out_conv: Conv,
    null_cond: Option<ParamId>,
}

/// Intermediate values of one forward pass.
pub struct ForwardCache<T> {
    temb_in: Vec<T>,
    temb_hidden: Vec<T>,
    temb: Vec<T>,
    temb_act: Vec<T>,
    in_col: Vec<T>,
    down: Vec<StageCache<T>>,
    mid: StageCache<T>,
    /// Decoder caches indexed by level.
    up: Vec<StageCache<T>>,
    /// Channels of the upsampled path at each decoder concat.
    up_channels: Vec<usize>,
    out_pre: FeatureMap<T>,
    out_norm: NormCache<T>,
    out_col: Vec<T>,
    used_null: bool,
}

impl<T: Real> Unet<T> {
    /// Builds a network with seeded random initialization.
    pub fn new(shape: NetworkShape, conditional: bool, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = stream_rng(seed, 0);
        let rng = &mut rng;
        let mut store = ParamStore::default();
        let s = &mut store;
        let td = shape.temb_dim();
        let linear = |s: &mut ParamStore<T>, name: &str, out: usize, inp: usize, rng: &mut _| {
            (
                s.add(format!("{name}.weight"), vec![out, inp], Init::FanIn(inp), rng),
                s.add(format!("{name}.bias"), vec![out], Init::Zeros, rng),
            )
        };
        let temb1 = linear(s, "temb.0", td, td, rng);
        let temb2 = linear(s, "temb.1", td, td, rng);
        let c0 = shape.channels[0];
        let conv_in = Conv::new(
            s,
            "input",
            ConvSpec { in_channels: DATA_CHANNELS, out_channels: c0, kernel: 3, padding: Padding::Zero },
            rng,
        );

        let stage = |s: &mut ParamStore<T>, name: &str, level: usize, in_c: usize, kind: NormKind, rng: &mut _| {
            let out_c = shape.channels[level];
            let mut blocks = Vec::new();
            let mut attns = Vec::new();
            for r in 0..shape.res_blocks {
                let ic = if r == 0 { in_c } else { out_c };
                blocks.push(ResBlock::new(s, &format!("{name}.{r}"), ic, out_c, td, kind, rng));
                attns.push(shape.has_attn(level).then(|| AttnBlock::new(s, &format!("{name}.{r}.attn"), out_c, rng)));
            }
            Stage { blocks, attns }
        };

        let mut down = Vec::with_capacity(shape.levels);
        let mut ch = c0;
        for l in 0..shape.levels {
            down.push(stage(s, &format!("down.{l}"), l, ch, NormKind::Group, rng));
            ch = shape.channels[l];
        }
        let last = shape.levels - 1;
        let mid = Stage {
            blocks: vec![ResBlock::new(s, "mid", ch, ch, td, NormKind::Group, rng)],
            attns: vec![shape.has_attn(last).then(|| AttnBlock::new(s, "mid.attn", ch, rng))],
        };
        let kind = if conditional {
            NormKind::Spade { cond_channels: DATA_CHANNELS, hidden: shape.spade_hidden }
        } else {
            NormKind::Group
        };
        let mut up: Vec<Option<Stage>> = (0..shape.levels).map(|_| None).collect();
        for l in (0..shape.levels).rev() {
            up[l] = Some(stage(s, &format!("up.{l}"), l, ch + shape.channels[l], kind, rng));
            ch = shape.channels[l];
        }
        let up = up.into_iter().map(|u| u.expect("every level built")).collect();
        let out_norm = GroupNorm::new(s, "output.norm", c0, rng);
        let out_conv = Conv::new(
            s,
            "output.conv",
            ConvSpec { in_channels: c0, out_channels: DATA_CHANNELS, kernel: 3, padding: Padding::Zero },
            rng,
        );
        let null_cond = conditional.then(|| s.add("null_cond".into(), vec![DATA_CHANNELS], Init::Zeros, rng));
        Ok(Unet { shape, conditional, store, temb1, temb2, conv_in, down, mid, up, out_norm, out_conv, null_cond })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn is_conditional(&self) -> bool {
        self.conditional
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Replaces all parameters; names and shapes must match this network.
    pub fn load_params(&mut self, store: ParamStore<T>) -> Result<()> {
        let ok = store.len() == self.store.len()
            && store
                .params()
                .iter()
                .zip(self.store.params())
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.len() == b.data.len());
        if !ok {
            return Err(Error::shape("parameter set does not match the network shape"));
        }
        if !store.all_finite() {
            return Err(Error::arg("parameters contain non-finite values"));
        }
        self.store = store;
        Ok(())
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Unet<U> {
        Unet {
            shape: self.shape.clone(),
            conditional: self.conditional,
            store: self.store.cast(),
            temb1: self.temb1,
            temb2: self.temb2,
            conv_in: self.conv_in.clone(),
            down: self.down.clone(),
            mid: self.mid.clone(),
            up: self.up.clone(),
            out_norm: self.out_norm.clone(),
            out_conv: self.out_conv.clone(),
            null_cond: self.null_cond,
        }
    }

    fn check_inputs(&self, x: &FeatureMap<T>, t: usize, cond: Option<&FeatureMap<T>>) -> Result<()> {
        if x.channels != DATA_CHANNELS {
            return Err(Error::shape(format!("expected {DATA_CHANNELS} input channels, got {}", x.channels)));
        }
        self.shape.check_resolution(x.height, x.width)?;
        if t == 0 {
            return Err(Error::arg("time steps start at 1"));
        }
        match cond {
            Some(_) if !self.conditional => Err(Error::arg("unconditional network given a condition")),
            Some(c) if c.shape() != x.shape() => Err(Error::shape(format!(
                "condition shape {:?} differs from input shape {:?}",
                c.shape(),
                x.shape()
            ))),
            _ => Ok(()),
        }
    }

    fn null_map(&self, height: usize, width: usize) -> FeatureMap<T> {
        let v = self.store.get(self.null_cond.expect("conditional network"));
        let mut m = FeatureMap::zeros(DATA_CHANNELS, height, width);
        for (c, &val) in v.iter().enumerate() {
            m.plane_mut(c).fill(val);
        }
        m
    }

    /// Forward pass keeping what the backward pass needs.
    pub fn forward(
        &self,
        x: &FeatureMap<T>,
        t: usize,
        cond: Option<&FeatureMap<T>>,
    ) -> Result<(FeatureMap<T>, ForwardCache<T>)> {
        self.check_inputs(x, t, cond)?;
        let st = &self.store;
        let null;
        let used_null = self.conditional && cond.is_none();
        let cond = if used_null {
            null = self.null_map(x.height, x.width);
            Some(&null)
        } else {
            cond
        };
        let dec_cond = if self.conditional { cond } else { None };

        let temb_in: Vec<T> = time_embed(t, self.shape.temb_dim())?.into_iter().map(T::of).collect();
        let temb_hidden = ops::linear(st.get(self.temb1.0), st.get(self.temb1.1), &temb_in);
        let temb = ops::linear(st.get(self.temb2.0), st.get(self.temb2.1), &ops::silu(&temb_hidden));
        let temb_act = ops::silu(&temb);

        let (mut h, in_col) = self.conv_in.forward(st, x);
        let last = self.shape.levels - 1;
        let mut skips = Vec::with_capacity(self.shape.levels);
        let mut down = Vec::with_capacity(self.shape.levels);
        for (l, stage) in self.down.iter().enumerate() {
            let (y, c) = stage.forward(st, h, &temb_act, None);
            down.push(c);
            h = if l < last { ops::avg_pool2(&y) } else { y.clone() };
            skips.push(y);
        }
        let (mut h, mid) = self.mid.forward(st, h, &temb_act, None);
        let mut up: Vec<StageCache<T>> = (0..self.shape.levels).map(|_| Vec::new()).collect();
        let mut up_channels = vec![0; self.shape.levels];
        for l in (0..self.shape.levels).rev() {
            if l < last {
                h = ops::upsample2(&h);
            }
            up_channels[l] = h.channels;
            let (y, c) = self.up[l].forward(st, ops::concat(&h, &skips[l]), &temb_act, dec_cond);
            up[l] = c;
            h = y;
        }
        let (out_pre, out_norm) = self.out_norm.forward(st, &h);
        let (out, out_col) = self.out_conv.forward(st, &ops::silu_map(&out_pre));
        let cache = ForwardCache {
            temb_in,
            temb_hidden,
            temb,
            temb_act,
            in_col,
            down,
            mid,
            up,
            up_channels,
            out_pre,
            out_norm,
            out_col,
            used_null,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients of `<dout, output>` into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, dout: &FeatureMap<T>, grads: &mut Grads<T>) {
        let st = &self.store;
        let last = self.shape.levels - 1;
        let te = &cache.temb_act;
        let mut dtemb = vec![T::zero(); te.len()];
        let mut cond_sums = vec![T::zero(); DATA_CHANNELS];
        let want_cond = cache.used_null;

        let ds = self.out_conv.backward(st, &cache.out_col, dout, grads, true).expect("input grad");
        let dpre = ops::silu_map_backward(&cache.out_pre, &ds);
        let mut dh = self.out_norm.backward(st, &cache.out_norm, &dpre, grads);

        let mut dskips = Vec::with_capacity(self.shape.levels);
        for l in 0..self.shape.levels {
            let d = self.up[l].backward(st, &cache.up[l], te, dh, grads, &mut dtemb, &mut cond_sums, want_cond);
            let (dprev, dskip) = ops::split(&d, cache.up_channels[l]);
            dskips.push(dskip);
            dh = if l < last { ops::upsample2_backward(&dprev) } else { dprev };
        }
        dh = self.mid.backward(st, &cache.mid, te, dh, grads, &mut dtemb, &mut cond_sums, false);
        for l in (0..self.shape.levels).rev() {
            if l < last {
                dh = ops::avg_pool2_backward(&dh);
            }
            ops::add_assign(&mut dh, &dskips[l]);
            dh = self.down[l].backward(st, &cache.down[l], te, dh, grads, &mut dtemb, &mut cond_sums, false);
        }
        self.conv_in.backward(st, &cache.in_col, &dh, grads, false);

        let dtemb = ops::silu_backward(&cache.temb, &dtemb);
        let dhid = {
            let (dw, db) = grads.pair_mut(self.temb2.0, self.temb2.1);
            ops::linear_backward(st.get(self.temb2.0), &ops::silu(&cache.temb_hidden), &dtemb, dw, db)
        };
        let dhid = ops::silu_backward(&cache.temb_hidden, &dhid);
        let (dw, db) = grads.pair_mut(self.temb1.0, self.temb1.1);
        ops::linear_backward(st.get(self.temb1.0), &cache.temb_in, &dhid, dw, db);

        if let (true, Some(id)) = (want_cond, self.null_cond) {
            grads.get_mut(id).iter_mut().zip(&cond_sums).for_each(|(g, &s)| *g += s);
        }
    }

    /// Predicted noise for `x` at step `t`.
    pub fn predict_map(&self, x: &FeatureMap<T>, t: usize, cond: Option<&FeatureMap<T>>) -> Result<FeatureMap<T>> {
        Ok(self.forward(x, t, cond)?.0)
    }
}

impl Denoiser for Unet<f32> {
    fn predict(&self, x_t: &Raster, t: usize, cond: Option<&NucleiStructure>) -> Result<Raster> {
        self.predict_map(x_t, t, cond.map(|c| c.raster()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_raster;
    use rand::Rng;

    fn tiny(levels: usize) -> NetworkShape {
        NetworkShape {
            levels,
            channels: [4, 8, 8][..levels].to_vec(),
            attn_levels: vec![levels],
            resolution: 8,
            res_blocks: 1,
            spade_hidden: 4,
        }
    }

    #[test]
    fn shape_validation() {
        assert!(NetworkShape::desk_default().validate().is_ok());
        assert!(NetworkShape::large().validate().is_ok());
        let mut s = tiny(2);
        s.attn_levels = vec![3];
        assert!(s.validate().is_err());
        let mut s = tiny(2);
        s.channels.push(4);
        assert!(s.validate().is_err());
        let mut s = tiny(3);
        s.resolution = 6;
        assert!(s.validate().is_err());
    }

    #[test]
    fn output_shape_and_determinism() {
        let net = Unet::<f32>::new(tiny(2), true, 7).unwrap();
        let mut rng = stream_rng(1, 0);
        let x = normal_raster(&mut rng, (3, 8, 8));
        let y = normal_raster(&mut rng, (3, 8, 8));
        let a = net.predict_map(&x, 10, Some(&y)).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a.is_finite());
        assert_eq!(a, net.predict_map(&x, 10, Some(&y)).unwrap());
        let again = Unet::<f32>::new(tiny(2), true, 7).unwrap();
        assert_eq!(a, again.predict_map(&x, 10, Some(&y)).unwrap());
        let x16 = normal_raster(&mut rng, (3, 16, 12));
        assert_eq!(net.predict_map(&x16, 3, None).unwrap().shape(), (3, 16, 12));
    }

    #[test]
    fn input_errors() {
        let cond_net = Unet::<f32>::new(tiny(3), true, 0).unwrap();
        let plain = Unet::<f32>::new(tiny(3), false, 0).unwrap();
        let x = Raster::zeros(3, 8, 8);
        assert!(matches!(cond_net.predict_map(&Raster::zeros(3, 6, 8), 1, None), Err(Error::ShapeMismatch(_))));
        assert!(plain.predict_map(&x, 1, Some(&x)).is_err());
        assert!(cond_net.predict_map(&x, 1, Some(&Raster::zeros(3, 16, 16))).is_err());
        assert!(cond_net.predict_map(&Raster::zeros(1, 8, 8), 1, None).is_err());
        assert!(plain.predict_map(&x, 0, None).is_err());
    }

    #[test]
    fn condition_changes_the_output() {
        let net = Unet::<f32>::new(tiny(2), true, 3).unwrap();
        let mut rng = stream_rng(2, 0);
        let x = normal_raster(&mut rng, (3, 8, 8));
        let a = net.predict_map(&x, 100, Some(&Raster::filled(3, 8, 8, -1.0))).unwrap();
        let b = net.predict_map(&x, 100, Some(&normal_raster(&mut rng, (3, 8, 8)))).unwrap();
        assert_ne!(a, b);
    }

    type Sample = (FeatureMap<f64>, usize, Option<FeatureMap<f64>>, FeatureMap<f64>);

    fn loss(net: &Unet<f64>, batch: &[Sample]) -> f64 {
        batch
            .iter()
            .map(|(x, t, c, target)| {
                let y = net.predict_map(x, *t, c.as_ref()).unwrap();
                y.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut net = Unet::<f64>::new(tiny(2), true, 11).unwrap();
        let mut rng = stream_rng(5, 0);
        net.params_mut().randomize(0.3, &mut rng);
        let mut sample = |c: bool| {
            let x = normal_raster(&mut rng, (3, 4, 4)).cast::<f64>();
            let target = normal_raster(&mut rng, (3, 4, 4)).cast::<f64>();
            let cond = c.then(|| normal_raster(&mut rng, (3, 4, 4)).cast::<f64>());
            let t = rng.random_range(1..1000);
            (x, t, cond, target)
        };
        let batch = [sample(true), sample(false)];
        let mut grads = net.params().zero_grads();
        for (x, t, c, target) in &batch {
            let (y, cache) = net.forward(x, *t, c.as_ref()).unwrap();
            let mut d = y.clone();
            d.data.iter_mut().zip(&target.data).for_each(|(a, b)| *a = 2.0 * (*a - b));
            net.backward(&cache, &d, &mut grads);
        }
        let h = 1e-5;
        for (pi, p) in net.params().params().to_vec().iter().enumerate() {
            let idx = [0, p.data.len() / 2, p.data.len() - 1];
            for &i in &idx {
                let orig = p.data[i];
                net.params_mut().params_mut()[pi].data[i] = orig + h;
                let lp = loss(&net, &batch);
                net.params_mut().params_mut()[pi].data[i] = orig - h;
                let lm = loss(&net, &batch);
                net.params_mut().params_mut()[pi].data[i] = orig;
                let num = (lp - lm) / (2.0 * h);
                let ana = grads.data[pi][i];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-3, "{}[{i}]: analytic {ana} numeric {num}", p.name);
            }
        }
    }
}
