//! Flat parameter storage with a named layout and a parallel gradient buffer.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_for;

use super::config::{ModelConfig, ModelKind};

/// A named sub-tensor inside the flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered, non-overlapping, covering table of sub-tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    index: BTreeMap<String, usize>,
    total: usize,
}

impl Layout {
    pub fn from_specs(specs: Vec<TensorSpec>) -> Self {
        let mut index = BTreeMap::new();
        let mut total = 0;
        for (i, s) in specs.iter().enumerate() {
            debug_assert_eq!(s.offset, total, "layout must be contiguous");
            total += s.len();
            index.insert(s.name.clone(), i);
        }
        Layout {
            specs,
            index,
            total,
        }
    }

    /// Layout for a model of the given kind and shape.
    pub fn for_model(cfg: &ModelConfig, kind: ModelKind) -> Self {
        let d = cfg.d_model;
        let ff = cfg.d_hidden;
        let v = cfg.vocab_size;
        let mut specs = Vec::new();
        let mut off = 0usize;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            specs.push(TensorSpec {
                name,
                shape,
                offset: off,
            });
            off += len;
        };

        match kind {
            ModelKind::Lm => push("embed".into(), vec![v, d]),
            ModelKind::Translator => {
                push("src_embed".into(), vec![v, d]);
                push("tgt_embed".into(), vec![v, d]);
            }
        }
        if kind == ModelKind::Translator {
            for l in 0..cfg.n_layers {
                push(format!("enc.{l}.ln1.g"), vec![d]);
                push(format!("enc.{l}.ln1.b"), vec![d]);
                for w in ["wq", "wk", "wv", "wo"] {
                    push(format!("enc.{l}.attn.{w}"), vec![d, d]);
                }
                push(format!("enc.{l}.ln2.g"), vec![d]);
                push(format!("enc.{l}.ln2.b"), vec![d]);
                push(format!("enc.{l}.ffn.w1"), vec![ff, d]);
                push(format!("enc.{l}.ffn.w2"), vec![d, ff]);
            }
            push("enc.final_ln.g".into(), vec![d]);
            push("enc.final_ln.b".into(), vec![d]);
        }
        for l in 0..cfg.n_layers {
            push(format!("dec.{l}.ln1.g"), vec![d]);
            push(format!("dec.{l}.ln1.b"), vec![d]);
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("dec.{l}.attn.{w}"), vec![d, d]);
            }
            if kind == ModelKind::Translator {
                push(format!("dec.{l}.ln2.g"), vec![d]);
                push(format!("dec.{l}.ln2.b"), vec![d]);
                for w in ["wq", "wk", "wv", "wo"] {
                    push(format!("dec.{l}.cross.{w}"), vec![d, d]);
                }
            }
            push(format!("dec.{l}.ln3.g"), vec![d]);
            push(format!("dec.{l}.ln3.b"), vec![d]);
            push(format!("dec.{l}.ffn.w1"), vec![ff, d]);
            push(format!("dec.{l}.ffn.w2"), vec![d, ff]);
        }
        push("dec.final_ln.g".into(), vec![d]);
        push("dec.final_ln.b".into(), vec![d]);
        push("out_proj".into(), vec![v, d]);

        Layout::from_specs(specs)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.index.get(name).map(|&i| &self.specs[i])
    }

    fn range(&self, name: &str) -> (usize, usize) {
        let spec = self
            .spec(name)
            .unwrap_or_else(|| panic!("unknown tensor `{name}`"));
        (spec.offset, spec.offset + spec.len())
    }
}

/// Flat parameters plus gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<F: Scalar> {
    layout: Arc<Layout>,
    data: Vec<F>,
    grad: Vec<F>,
}

impl<F: Scalar> ParamVector<F> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total();
        ParamVector {
            layout,
            data: vec![F::zero(); n],
            grad: vec![F::zero(); n],
        }
    }

    /// Random initialization of every tensor, including the output projection.
    /// Linear weights use scaled-normal draws; layer-norm gains start at 1.
    pub fn init_random(cfg: &ModelConfig, kind: ModelKind, seed: u64) -> Self {
        let mut pv = Self::init_for_training(cfg, kind, seed);
        let (lo, hi) = pv.layout.range("out_proj");
        let mut rng = rng_for(seed, &[0x0u64, 0x9]);
        let std = (1.0 / cfg.d_model as f64).sqrt();
        fill_normal(&mut pv.data[lo..hi], &mut rng, std);
        pv
    }

    /// Training initialization: random everywhere except the output
    /// projection, which starts at zero so the first predictions are uniform.
    pub fn init_for_training(cfg: &ModelConfig, kind: ModelKind, seed: u64) -> Self {
        let layout = Arc::new(Layout::for_model(cfg, kind));
        let mut pv = Self::zeros(layout.clone());
        let mut rng = rng_for(seed, &[0x0u64, 0x1]);
        for spec in layout.specs() {
            let lo = spec.offset;
            let hi = lo + spec.len();
            let slice = &mut pv.data[lo..hi];
            // Layer-norm tensors are the only ones named `*.g` / `*.b`.
            if spec.name.ends_with(".g") {
                slice.fill(F::one());
            } else if spec.name.ends_with(".b") || spec.name == "out_proj" {
                slice.fill(F::zero());
            } else {
                let fan_in = *spec.shape.last().unwrap() as f64;
                fill_normal(slice, &mut rng, (1.0 / fan_in).sqrt());
            }
        }
        pv
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn grad(&self) -> &[F] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [F] {
        &mut self.grad
    }

    pub fn tensor(&self, name: &str) -> &[F] {
        let (lo, hi) = self.layout.range(name);
        &self.data[lo..hi]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [F] {
        let (lo, hi) = self.layout.range(name);
        &mut self.data[lo..hi]
    }

    pub fn tensor_grad(&self, name: &str) -> &[F] {
        let (lo, hi) = self.layout.range(name);
        &self.grad[lo..hi]
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    /// Splits storage into (params, grads) so the backward pass can read
    /// weights while accumulating into gradients.
    pub fn split_mut(&mut self) -> (&[F], &mut [F], &Layout) {
        (&self.data, &mut self.grad, &self.layout)
    }

    /// First tensor whose gradient contains a non-finite value, if any.
    pub fn non_finite_grad_tensor(&self) -> Option<&str> {
        for spec in self.layout.specs() {
            let lo = spec.offset;
            let hi = lo + spec.len();
            if self.grad[lo..hi].iter().any(|g| !g.is_finite()) {
                return Some(&spec.name);
            }
        }
        None
    }

    /// Euclidean norm of the gradient buffer.
    pub fn grad_norm(&self) -> f64 {
        self.grad
            .iter()
            .map(|g| {
                let x = g.to64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn from_f64_data(layout: Arc<Layout>, data: &[f64]) -> Result<Self> {
        if data.len() != layout.total() {
            return Err(Error::InvalidConfig(format!(
                "parameter array of length {} does not match layout total {}",
                data.len(),
                layout.total()
            )));
        }
        Ok(ParamVector {
            grad: vec![F::zero(); data.len()],
            data: data.iter().map(|&x| F::from64(x)).collect(),
            layout,
        })
    }

    pub fn data_as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to64()).collect()
    }
}

fn fill_normal<F: Scalar>(slice: &mut [F], rng: &mut ChaCha8Rng, std: f64) {
    // Box-Muller on ChaCha draws; rand's Normal would also work but this keeps
    // the stream layout under our control.
    let mut i = 0;
    while i < slice.len() {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        slice[i] = F::from64(r * theta.cos() * std);
        if i + 1 < slice.len() {
            slice[i + 1] = F::from64(r * theta.sin() * std);
        }
        i += 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_hidden: 16,
            max_len: 16,
            vocab_size: 11,
            dropout: 0.0,
        }
    }

    #[test]
    fn layout_is_contiguous_and_covering() {
        for kind in [ModelKind::Lm, ModelKind::Translator] {
            let layout = Layout::for_model(&cfg(), kind);
            let mut expected_off = 0;
            for spec in layout.specs() {
                assert_eq!(spec.offset, expected_off, "{}", spec.name);
                expected_off += spec.len();
            }
            assert_eq!(expected_off, layout.total());
        }
    }

    #[test]
    fn translator_has_encoder_and_cross_tensors() {
        let layout = Layout::for_model(&cfg(), ModelKind::Translator);
        assert!(layout.spec("enc.0.attn.wq").is_some());
        assert!(layout.spec("dec.1.cross.wo").is_some());
        assert!(layout.spec("src_embed").is_some());
        let lm = Layout::for_model(&cfg(), ModelKind::Lm);
        assert!(lm.spec("enc.0.attn.wq").is_none());
        assert!(lm.spec("dec.0.cross.wq").is_none());
        assert!(lm.spec("embed").is_some());
    }

    #[test]
    fn training_init_zeroes_output_projection_and_sets_ln_gains() {
        let pv: ParamVector<f64> = ParamVector::init_for_training(&cfg(), ModelKind::Lm, 1);
        assert!(pv.tensor("out_proj").iter().all(|&x| x == 0.0));
        assert!(pv.tensor("dec.0.ln1.g").iter().all(|&x| x == 1.0));
        assert!(pv.tensor("dec.0.ln1.b").iter().all(|&x| x == 0.0));
        assert!(pv.tensor("dec.0.attn.wq").iter().any(|&x| x != 0.0));
    }

    #[test]
    fn random_init_is_seed_deterministic() {
        let a: ParamVector<f64> = ParamVector::init_random(&cfg(), ModelKind::Translator, 7);
        let b: ParamVector<f64> = ParamVector::init_random(&cfg(), ModelKind::Translator, 7);
        let c: ParamVector<f64> = ParamVector::init_random(&cfg(), ModelKind::Translator, 8);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let a: ParamVector<f64> = ParamVector::init_random(&cfg(), ModelKind::Lm, 3);
        let restored =
            ParamVector::<f64>::from_f64_data(a.layout().clone(), &a.data_as_f64()).unwrap();
        assert_eq!(a.data(), restored.data());
    }
}
