//! Parameter storage, layer builders, and the Adam optimizer.
//!
//! Parameters live outside the tape in a [`ParamStore`]; every forward pass
//! binds the ones it touches as leaves. Gradients come back per leaf and are
//! reduced across the batch in sample order, which keeps training bit-exact
//! regardless of thread scheduling.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (spectral-norm power iteration vectors) are saved in
    /// checkpoints but never updated by the optimizer.
    pub trainable: bool,
}

/// Ordered, named parameter set for one network.
#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    /// Replace all values from another store with identical layout.
    pub fn load_values(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.entries.len(), other.entries.len(), "layout mismatch");
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            assert_eq!(dst.name, src.name, "parameter order mismatch");
            assert_eq!(dst.value.dims(), src.value.dims());
            dst.value = src.value.clone();
        }
    }

    /// Convert every tensor to a different element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Per-tape lazy binding of parameters to leaf nodes.
pub struct Binding {
    nodes: Vec<Option<NodeId>>,
    with_grad: bool,
}

impl Binding {
    pub fn new<T: Scalar>(store: &ParamStore<T>, with_grad: bool) -> Self {
        Self {
            nodes: vec![None; store.len()],
            with_grad,
        }
    }

    pub fn node<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        id: ParamId,
    ) -> NodeId {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let value = store.get(id).clone();
        let n = if self.with_grad && store.entries()[id.0].trainable {
            tape.param(value)
        } else {
            tape.constant(value)
        };
        self.nodes[id.0] = Some(n);
        n
    }

    /// Gradient tensors per parameter index for everything bound with grads.
    pub fn collect_grads<T: Scalar>(
        &self,
        grads: &mut crate::tape::Gradients<T>,
    ) -> Vec<Option<Tensor<T>>> {
        self.nodes
            .iter()
            .map(|n| n.and_then(|id| grads.take(id)))
            .collect()
    }
}

/// Sum per-parameter gradients across batch samples in index order.
pub fn reduce_grads<T: Scalar>(
    mut acc: Vec<Option<Tensor<T>>>,
    sample: Vec<Option<Tensor<T>>>,
) -> Vec<Option<Tensor<T>>> {
    if acc.is_empty() {
        return sample;
    }
    for (a, s) in acc.iter_mut().zip(sample) {
        match (a.as_mut(), s) {
            (Some(t), Some(g)) => t.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
    acc
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-normal scaled by fan-in.
    HeNormal,
    /// Small normal for heads whose output should start near zero mean.
    Normal(f64),
    Zeros,
}

pub fn he_normal<T: Scalar>(rng: &mut ChaCha12Rng, dims: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}

/// 2-d convolution layer with square kernel and optional spectral norm.
#[derive(Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    /// Power-iteration buffers when spectrally normalized.
    pub sn: Option<(ParamId, ParamId)>,
}

#[allow(clippy::too_many_arguments)]
impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let dims = [cout, cin, k, k];
        let w = match init {
            Init::HeNormal => he_normal(rng, &dims, cin * k * k),
            Init::Normal(std) => Tensor::from_fn(&dims, |_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            }),
            Init::Zeros => Tensor::zeros(&dims),
        };
        let w = store.add(&format!("{name}.w"), w, true);
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[cout]), true);
        Self {
            w,
            b: Some(b),
            stride,
            pad,
            sn: None,
        }
    }

    pub fn new_spectral<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let mut conv = Self::new(store, rng, name, cin, cout, k, stride, pad, Init::HeNormal);
        let cols = cin * k * k;
        let mut u = Tensor::from_fn(&[cout], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z)
        });
        normalize_vec(u.data_mut());
        let mut v = Tensor::from_fn(&[cols], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z)
        });
        normalize_vec(v.data_mut());
        let u = store.add(&format!("{name}.sn_u"), u, false);
        let v = store.add(&format!("{name}.sn_v"), v, false);
        conv.sn = Some((u, v));
        conv
    }

    /// One power-iteration step on the spectral-norm buffers.
    pub fn power_iterate<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let Some((uid, vid)) = self.sn else { return };
        let wdims = store.get(self.w).dims().to_vec();
        let rows = wdims[0];
        let cols: usize = wdims[1..].iter().product();
        let w = store.get(self.w).data().to_vec();
        let u = store.get(uid).data().to_vec();
        // v = normalize(W^T u)
        let mut v = vec![T::ZERO; cols];
        for r in 0..rows {
            let ur = u[r];
            for c in 0..cols {
                v[c] += w[r * cols + c] * ur;
            }
        }
        normalize_vec(&mut v);
        // u = normalize(W v)
        let mut nu = vec![T::ZERO; rows];
        for r in 0..rows {
            let mut acc = T::ZERO;
            for c in 0..cols {
                acc += w[r * cols + c] * v[c];
            }
            nu[r] = acc;
        }
        normalize_vec(&mut nu);
        store.get_mut(uid).data_mut().copy_from_slice(&nu);
        store.get_mut(vid).data_mut().copy_from_slice(&v);
    }

    /// Current sigma estimate `u^T W v` from the stored buffers.
    pub fn sigma<T: Scalar>(&self, store: &ParamStore<T>) -> T {
        let Some((uid, vid)) = self.sn else {
            return T::ONE;
        };
        let wdims = store.get(self.w).dims().to_vec();
        let rows = wdims[0];
        let cols: usize = wdims[1..].iter().product();
        let w = store.get(self.w).data();
        let u = store.get(uid).data();
        let v = store.get(vid).data();
        let mut sigma = T::ZERO;
        for r in 0..rows {
            let mut acc = T::ZERO;
            for c in 0..cols {
                acc += w[r * cols + c] * v[c];
            }
            sigma += u[r] * acc;
        }
        sigma
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> NodeId {
        let w = bind.node(tape, store, self.w);
        let w = if let Some((uid, vid)) = self.sn {
            let u = store.get(uid).clone();
            let v = store.get(vid).clone();
            tape.spectral_weight(w, u, v)
        } else {
            w
        };
        let b = self.b.map(|bb| bind.node(tape, store, bb));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

fn normalize_vec<T: Scalar>(v: &mut [T]) {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt() + T::from_f64(1e-12);
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// Residual block: `lrelu(conv2(lrelu(conv1(x))) + skip(x))`.
///
/// The first conv carries the stride; the skip is a 1x1 conv whenever the
/// stride or channel count changes.
#[derive(Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub slope: f64,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv1"),
            cin,
            cout,
            3,
            stride,
            1,
            Init::HeNormal,
        );
        let conv2 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv2"),
            cout,
            cout,
            3,
            1,
            1,
            Init::HeNormal,
        );
        let skip = if cin != cout || stride != 1 {
            Some(Conv2d::new(
                store,
                rng,
                &format!("{name}.skip"),
                cin,
                cout,
                1,
                stride,
                0,
                Init::HeNormal,
            ))
        } else {
            None
        };
        Self {
            conv1,
            conv2,
            skip,
            slope: 0.2,
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> NodeId {
        let h = self.conv1.apply(tape, bind, store, x);
        let h = tape.leaky_relu(h, self.slope);
        let h = self.conv2.apply(tape, bind, store, h);
        let s = match &self.skip {
            Some(sk) => sk.apply(tape, bind, store, x),
            None => x,
        };
        let y = tape.add(h, s);
        tape.leaky_relu(y, self.slope)
    }
}

/// Adam with bias correction; epsilon 1e-8.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Option<Tensor<f32>>>,
    v: Vec<Option<Tensor<f32>>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, nparams: usize) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: (0..nparams).map(|_| None).collect(),
            v: (0..nparams).map(|_| None).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) {
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - (self.beta1).powi(self.t as i32) as f32;
        let bc2 = 1.0 - (self.beta2).powi(self.t as i32) as f32;
        let lr = self.lr as f32;
        let eps = self.eps as f32;
        for (idx, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.entries()[idx].trainable {
                continue;
            }
            let m = self.m[idx].get_or_insert_with(|| Tensor::zeros(g.dims()));
            let v = self.v[idx].get_or_insert_with(|| Tensor::zeros(g.dims()));
            let p = store.get_mut(ParamId(idx));
            for ((pi, mi), (vi, gi)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Optimizer state flattened for checkpointing (moments keyed by slot).
    pub fn state(&self) -> (u64, Vec<(usize, Tensor<f32>, Tensor<f32>)>) {
        let mut slots = Vec::new();
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            if let (Some(m), Some(v)) = (m, v) {
                slots.push((i, m.clone(), v.clone()));
            }
        }
        (self.t, slots)
    }

    pub fn restore(&mut self, t: u64, slots: Vec<(usize, Tensor<f32>, Tensor<f32>)>) {
        self.t = t;
        for (i, m, v) in slots {
            self.m[i] = Some(m);
            self.v[i] = Some(v);
        }
    }
}

/// Derive an independent RNG stream from a master seed, a purpose tag, and
/// two indices. Stateless, so resuming a run never needs RNG serialization.
pub fn stream_rng(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha12Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for byte in tag.as_bytes() {
        h = splitmix64(h ^ (*byte as u64));
    }
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    let mut key = [0u8; 32];
    let mut s = h;
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    use rand::SeedableRng;
    ChaCha12Rng::from_seed(key)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dropout keep-mask with entries `0` or `1/(1-rate)`.
pub fn dropout_mask<T: Scalar>(rng: &mut ChaCha12Rng, dims: &[usize], rate: f64) -> Tensor<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Tensor::from_fn(dims, |_| {
        if rng.random::<f64>() < rate {
            T::ZERO
        } else {
            keep
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_rng_is_stable_and_distinct() {
        use rand::RngCore;
        let mut a = stream_rng(7, "batch", 3, 0);
        let mut b = stream_rng(7, "batch", 3, 0);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = stream_rng(7, "batch", 4, 0);
        let mut a2 = stream_rng(7, "batch", 3, 0);
        assert_ne!(a2.next_u64(), c.next_u64());
    }

    #[test]
    fn adam_moves_toward_minimum() {
        // minimize (p - 3)^2 by feeding the analytic gradient
        let mut store = ParamStore::<f32>::new();
        let p = store.add("p", Tensor::scalar(0.0), true);
        let mut opt = Adam::new(0.1, 0.9, 0.999, store.len());
        for _ in 0..500 {
            let val = store.get(p).item();
            let g = 2.0 * (val - 3.0);
            let grads = vec![Some(Tensor::scalar(g))];
            opt.step(&mut store, &grads);
        }
        assert!((store.get(p).item() - 3.0).abs() < 1e-2);
    }

    #[test]
    fn spectral_norm_caps_singular_value() {
        use crate::tape::Tape;
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(42, "sn-test", 0, 0);
        let conv = Conv2d::new_spectral(&mut store, &mut rng, "d", 3, 4, 3, 1, 1);
        // scale the weight up so sigma is clearly > 1 beforehand
        store.get_mut(conv.w).scale_assign(5.0);
        for _ in 0..50 {
            conv.power_iterate(&mut store);
        }
        let mut tape = Tape::<f64>::new();
        let mut bind = Binding::new(&store, false);
        let w = bind.node(&mut tape, &store, conv.w);
        let (uid, vid) = conv.sn.unwrap();
        let u = store.get(uid).clone();
        let v = store.get(vid).clone();
        let wn = tape.spectral_weight(w, u, v);
        // power method on the normalized weight: top singular value ~ 1
        let wdims = tape.value(wn).dims().to_vec();
        let rows = wdims[0];
        let cols: usize = wdims[1..].iter().product();
        let wv = tape.value(wn).data().to_vec();
        let mut x = vec![1.0f64; cols];
        for _ in 0..100 {
            let mut y = vec![0.0f64; rows];
            for r in 0..rows {
                for c in 0..cols {
                    y[r] += wv[r * cols + c] * x[c];
                }
            }
            let mut nx = vec![0.0f64; cols];
            for r in 0..rows {
                for c in 0..cols {
                    nx[c] += wv[r * cols + c] * y[r];
                }
            }
            let n = nx.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in nx.iter_mut() {
                *v /= n;
            }
            x = nx;
        }
        let mut y = vec![0.0f64; rows];
        for r in 0..rows {
            for c in 0..cols {
                y[r] += wv[r * cols + c] * x[c];
            }
        }
        let sigma_max = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            sigma_max <= 1.0 + 1e-3,
            "top singular value {sigma_max} exceeds 1"
        );
    }
}
