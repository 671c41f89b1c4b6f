//! Named parameter tables and seeded initialisation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// A flat, name-ordered table of model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Moves every entry of `other` in under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) {
        for (k, v) in other.params {
            self.params.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().fill(0.0);
        }
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }
}

/// Generator for one named parameter, independent of construction order.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, mixed into the seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// He-uniform weights `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Conv weight `(c_out, c_in, k, k)` with He-uniform init plus zero bias.
pub fn init_conv(store: &mut ParamStore, seed: u64, name: &str, c_in: usize, c_out: usize, k: usize) {
    let mut rng = param_rng(seed, name);
    store.insert(
        format!("{name}.weight"),
        he_uniform(&[c_out, c_in, k, k], c_in * k * k, &mut rng),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
}

/// Conv weight over `c_main + c_extra` input channels where the `c_main`
/// block is drawn exactly as [`init_conv`] would draw it for `c_main` inputs,
/// and the extra channels come from a separate stream. Models that differ
/// only by the extra input channels therefore share their initial weights.
pub fn init_conv_with_extra(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    c_main: usize,
    c_extra: usize,
    c_out: usize,
    k: usize,
) {
    let mut rng = param_rng(seed, name);
    let main = he_uniform(&[c_out, c_main, k, k], c_main * k * k, &mut rng);
    let mut extra_rng = param_rng(seed, &format!("{name}#extra"));
    let extra = he_uniform(&[c_out, c_extra, k, k], c_main * k * k, &mut extra_rng);
    let kk = k * k;
    let c_in = c_main + c_extra;
    let mut data = Vec::with_capacity(c_out * c_in * kk);
    for co in 0..c_out {
        data.extend_from_slice(&main.data()[co * c_main * kk..(co + 1) * c_main * kk]);
        data.extend_from_slice(&extra.data()[co * c_extra * kk..(co + 1) * c_extra * kk]);
    }
    store.insert(format!("{name}.weight"), Tensor::new(&[c_out, c_in, k, k], data).unwrap());
    store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
}

pub fn init_linear(store: &mut ParamStore, seed: u64, name: &str, d_in: usize, d_out: usize) {
    let mut rng = param_rng(seed, name);
    store.insert(format!("{name}.weight"), he_uniform(&[d_out, d_in], d_in, &mut rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]));
}
