//! The hallucinator: a small generator mapping `(prototype, seed, noise)` to a
//! new feature carrying the seed's label, trained against a frozen classifier.

mod noise;

pub use noise::{fit_noise_spec, NoiseSpec};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::heads::{ClassifierHead, HeadKind, PrototypeRegistry};
use crate::kv::{KvCodec, KvDocument};
use crate::numerics::{softmax_cross_entropy, softmax_cross_entropy_sum, Activation, Affine, AffineCache, AffineGrads, Matrix, Rng};
use crate::synthworld::{Label, LabeledFeature, Origin};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two layers, generating directly in the classifier's input space.
    Conservative,
    /// Three layers, generating before the pre-head transform.
    Aggressive,
}

impl Variant {
    pub fn layer_count(self) -> usize {
        match self {
            Variant::Conservative => 2,
            Variant::Aggressive => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Conservative => "conservative",
            Variant::Aggressive => "aggressive",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conservative" => Ok(Variant::Conservative),
            "aggressive" => Ok(Variant::Aggressive),
            other => Err(Error::Argument(format!("unknown hallucinator variant '{other}'"))),
        }
    }
}

/// Affine stack `3d → d → … → d` with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Hallucinator {
    variant: Variant,
    dim: usize,
    layers: Vec<Affine>,
}

#[derive(Debug, Clone)]
pub struct HallucinatorCache {
    layers: Vec<AffineCache>,
}

#[derive(Debug, Clone)]
pub struct HallucinatorGrads {
    pub layers: Vec<AffineGrads>,
}

impl HallucinatorGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            g.flatten_into(&mut out);
        }
        out
    }
}

/// Identity on the seed block of `[μ; x; ε]`, identity on every square layer,
/// plus i.i.d. `N(0, init_noise_std²)` on every weight. Biases start at zero.
pub fn init_hallucinator(dim: usize, variant: Variant, init_noise_std: f64, rng: &mut Rng) -> Result<Hallucinator> {
    if dim == 0 {
        return Err(Error::Argument("hallucinator dimension must be at least 1".into()));
    }
    let mut layers = Vec::with_capacity(variant.layer_count());
    let mut first = Matrix::zeros(dim, 3 * dim);
    for i in 0..dim {
        first.set(i, dim + i, 1.0);
    }
    layers.push(Affine::new(first, vec![0.0; dim])?);
    for _ in 1..variant.layer_count() {
        layers.push(Affine::new(Matrix::identity(dim), vec![0.0; dim])?);
    }
    if init_noise_std > 0.0 {
        for layer in &mut layers {
            for w in layer.weights.as_mut_slice() {
                *w += init_noise_std * rng.normal();
            }
        }
    }
    Ok(Hallucinator {
        variant,
        dim,
        layers,
    })
}

impl Hallucinator {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Affine::param_count).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.flatten_into(&mut out);
        }
        out
    }

    pub fn load(&mut self, flat: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            at += l.load_from(&flat[at..]);
        }
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Identity
        } else {
            Activation::Relu
        }
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, HallucinatorCache)> {
        if inputs.cols() != 3 * self.dim {
            return shape_err(format!(
                "hallucinator expects {} inputs, got {}",
                3 * self.dim,
                inputs.cols()
            ));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, cache) = layer.forward(&h, self.activation(i))?;
            caches.push(cache);
            h = out;
        }
        Ok((h, HallucinatorCache { layers: caches }))
    }

    pub fn apply(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != 3 * self.dim {
            return shape_err("hallucinator input width");
        }
        let mut h = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h, self.activation(i))?;
        }
        Ok(h)
    }

    pub fn backward(&self, cache: &HallucinatorCache, grad_out: &Matrix) -> Result<HallucinatorGrads> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            let lg = layer.backward(c, &g)?;
            g = lg.input.clone();
            grads.push(lg);
        }
        grads.reverse();
        Ok(HallucinatorGrads { layers: grads })
    }
}

/// Concatenated generator inputs `[μ_c; x; ε]` for a set of hallucinations,
/// with the class each output will carry.
#[derive(Debug, Clone, PartialEq)]
pub struct HallucinationInputs {
    pub inputs: Matrix,
    pub classes: Vec<usize>,
}

impl HallucinationInputs {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// One row per `(class, seed)` request, each with a fresh noise draw.
    pub fn build(
        registry: &PrototypeRegistry,
        requests: &[(usize, &[f64])],
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = registry.dim();
        let mut data = Vec::with_capacity(requests.len() * 3 * d);
        let mut classes = Vec::with_capacity(requests.len());
        for &(class, seed) in requests {
            let proto = registry.prototype(class).ok_or_else(|| {
                Error::Contract(format!("no prototype for class {class}"))
            })?;
            if seed.len() != d {
                return shape_err("seed dimension differs from prototype dimension");
            }
            data.extend_from_slice(proto);
            data.extend_from_slice(seed);
            data.extend(noise.sample(rng));
            classes.push(class);
        }
        Ok(Self {
            inputs: Matrix::from_vec(requests.len(), 3 * d, data)?,
            classes,
        })
    }
}

/// Generates one hallucinated example from a labeled seed.
pub fn hallucinate(
    h: &Hallucinator,
    registry: &PrototypeRegistry,
    seed: &LabeledFeature,
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<LabeledFeature> {
    let Label::Class(class) = seed.label else {
        return Err(Error::Contract("background examples are never hallucinated".into()));
    };
    let batch = HallucinationInputs::build(registry, &[(class, &seed.vector)], noise, rng)?;
    let out = h.apply(&batch.inputs)?;
    Ok(LabeledFeature {
        vector: out.row(0).to_vec(),
        label: Label::Class(class),
        origin: Origin::Hallucinated,
    })
}

/// Generates hallucinations for prepared inputs.
pub fn hallucinate_batch(h: &Hallucinator, batch: &HallucinationInputs) -> Result<Vec<LabeledFeature>> {
    let out = h.apply(&batch.inputs)?;
    Ok(out
        .row_iter()
        .zip(&batch.classes)
        .map(|(v, &c)| LabeledFeature {
            vector: v.to_vec(),
            label: Label::Class(c),
            origin: Origin::Hallucinated,
        })
        .collect())
}

/// Summed cross-entropy of hallucinated examples under a frozen head, with
/// gradients for the hallucinator only.
///
/// When `transform` is given the outputs pass through it (frozen) before the
/// head, which is how the aggressive variant reaches the classifier.
pub fn hallucination_loss(
    h: &Hallucinator,
    transform: Option<&Affine>,
    head: &ClassifierHead,
    batch: &HallucinationInputs,
) -> Result<(f64, HallucinatorGrads)> {
    if batch.is_empty() {
        return Err(Error::Argument("no hallucinated examples".into()));
    }
    let targets = batch
        .classes
        .iter()
        .map(|&c| head.row_of(Label::Class(c)))
        .collect::<Result<Vec<_>>>()?;
    let (generated, cache) = h.forward(&batch.inputs)?;
    let (features, t_cache) = match transform {
        Some(t) => {
            let (f, c) = t.forward(&generated, Activation::Relu)?;
            (f, Some(c))
        }
        None => (generated, None),
    };
    let logits = head.logits(&features)?;
    let (loss, grad_logits) = softmax_cross_entropy_sum(&logits, &targets)?;
    let mut grad = head.backward(&features, &grad_logits)?.inputs;
    if let (Some(t), Some(c)) = (transform, t_cache) {
        grad = t.backward(&c, &grad)?.input;
    }
    Ok((loss, h.backward(&cache, &grad)?))
}

/// Cosine prototypical loss on held-out validation features, with prototypes
/// built from hallucinations.
///
/// Hallucinations are generated before the transform `T`; each class's
/// prototype is the mean of its transformed hallucinations. Validation
/// features pass through `T` and are classified by scaled cosine similarity to
/// those prototypes. Gradients flow to both the hallucinator and `T`.
pub fn aggressive_prototypical_loss(
    h: &Hallucinator,
    transform: &Affine,
    validation: &Matrix,
    validation_classes: &[usize],
    hallucinations: &HallucinationInputs,
    scale: f64,
) -> Result<(f64, HallucinatorGrads, AffineGrads)> {
    if validation.rows() == 0 || validation.rows() != validation_classes.len() {
        return Err(Error::Argument("validation set is empty or mislabeled".into()));
    }
    let mut classes: Vec<usize> = hallucinations.classes.clone();
    classes.sort_unstable();
    classes.dedup();
    let slot = |c: usize| classes.binary_search(&c).ok();
    let targets = validation_classes
        .iter()
        .map(|&c| {
            slot(c).ok_or_else(|| Error::Contract(format!("class {c} has no hallucinated examples")))
        })
        .collect::<Result<Vec<_>>>()?;

    let d = h.dim();
    let (generated, h_cache) = h.forward(&hallucinations.inputs)?;
    let (gen_t, gen_cache) = transform.forward(&generated, Activation::Relu)?;
    let mut protos = Matrix::zeros(classes.len(), transform.output_dim());
    let mut counts = vec![0usize; classes.len()];
    for (row, &c) in gen_t.row_iter().zip(&hallucinations.classes) {
        let k = slot(c).expect("class collected above");
        counts[k] += 1;
        crate::numerics::axpy(1.0, row, protos.row_mut(k));
    }
    for (k, &n) in counts.iter().enumerate() {
        protos.row_mut(k).iter_mut().for_each(|v| *v /= n as f64);
    }
    let (val_t, val_cache) = transform.forward(validation, Activation::Relu)?;

    let proto_head = ClassifierHead {
        kind: HeadKind::Cosine,
        weights: protos,
        scale,
    };
    let logits = proto_head.logits(&val_t)?;
    let (loss, grad_logits) = softmax_cross_entropy(&logits, &targets)?;
    let back = proto_head.backward(&val_t, &grad_logits)?;

    let mut grad_gen_t = Matrix::zeros(gen_t.rows(), gen_t.cols());
    for (i, &c) in hallucinations.classes.iter().enumerate() {
        let k = slot(c).expect("class collected above");
        let inv = 1.0 / counts[k] as f64;
        crate::numerics::axpy(inv, back.weights.row(k), grad_gen_t.row_mut(i));
    }
    let t_from_gen = transform.backward(&gen_cache, &grad_gen_t)?;
    let t_from_val = transform.backward(&val_cache, &back.inputs)?;
    let h_grads = h.backward(&h_cache, &t_from_gen.input)?;
    let mut t_weights = t_from_gen.weights;
    t_weights.add_assign(&t_from_val.weights)?;
    let t_bias = t_from_gen
        .bias
        .iter()
        .zip(&t_from_val.bias)
        .map(|(a, b)| a + b)
        .collect();
    debug_assert_eq!(h_grads.layers[0].input.cols(), 3 * d);
    Ok((
        loss,
        h_grads,
        AffineGrads {
            weights: t_weights,
            bias: t_bias,
            input: Matrix::zeros(0, transform.input_dim()),
        },
    ))
}

impl KvCodec for Hallucinator {
    const KIND: &'static str = "hallucinator";

    fn write_kv(&self, doc: &mut KvDocument) {
        doc.push("variant", self.variant.as_str());
        doc.push("dim", self.dim);
        for (i, l) in self.layers.iter().enumerate() {
            doc.push_matrix(&format!("layer.{i}.weights"), &l.weights);
            doc.push_floats(format!("layer.{i}.bias"), &l.bias);
        }
    }

    fn read_kv(doc: &KvDocument) -> Result<Self> {
        let variant: Variant = doc.get_str("variant")?.parse()?;
        let dim: usize = doc.get("dim")?;
        let layers = (0..variant.layer_count())
            .map(|i| {
                Affine::new(
                    doc.get_matrix(&format!("layer.{i}.weights"))?,
                    doc.get_floats(&format!("layer.{i}.bias"))?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        if layers[0].input_dim() != 3 * dim || layers.iter().any(|l| l.output_dim() != dim) {
            return Err(Error::Parse("hallucinator layer shapes do not match its dimension".into()));
        }
        Ok(Self {
            variant,
            dim,
            layers,
        })
    }
}

#[cfg(test)]
mod tests;
