use log::debug;

use crate::corpns::{corpns_total_loss, head_scores, ObjectnessHead, RpnEnsemble};
use crate::error::{Error, Result};
use crate::hallucinator::{
    aggressive_prototypical_loss, fit_noise_spec, hallucination_loss, init_hallucinator,
    HallucinationInputs, Hallucinator, NoiseSpec, Variant,
};
use crate::heads::{ClassifierHead, PrototypeRegistry};
use crate::numerics::{sgd_update, Activation, Affine, Matrix, Rng};
use crate::synthworld::{Label, LabeledFeature, SyntheticWorld};

use super::config::{TrainConfig, VariantSetting};

/// Abundant base-class training data in raw proposal-feature space.
#[derive(Debug, Clone)]
pub struct BaseData {
    /// Ground-truth instances and their proposals, all base classes.
    pub foreground: Vec<LabeledFeature>,
    pub background: Vec<Vec<f64>>,
    /// Indices into `foreground`, grouped by class.
    pub by_class: Vec<Vec<usize>>,
}

impl BaseData {
    pub fn generate(world: &SyntheticWorld, config: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        let mut foreground = Vec::new();
        let mut by_class = vec![Vec::new(); world.base_classes];
        for class in 0..world.base_classes {
            for _ in 0..config.base.instances_per_class {
                let instance = world.sample_instance(class, rng)?;
                let proposals = world.sample_proposals(&instance, config.proposals_per_instance, rng)?;
                for v in std::iter::once(instance).chain(proposals) {
                    by_class[class].push(foreground.len());
                    foreground.push(LabeledFeature::real(v, Label::Class(class)));
                }
            }
        }
        let background = world
            .sample_background(config.base.background, rng)
            .into_iter()
            .map(|f| f.vector)
            .collect();
        Ok(Self {
            foreground,
            background,
            by_class,
        })
    }
}

/// Everything the base stage hands to fine-tuning. None of it changes afterwards.
#[derive(Debug, Clone)]
pub struct BaseState {
    /// Affine-ReLU map from proposal features to the classifier's input space.
    pub transform: Affine,
    /// Base classes plus background.
    pub head: ClassifierHead,
    pub single_rpn: ObjectnessHead,
    pub ensemble: RpnEnsemble,
    /// Prototypes in the space the hallucinator reads from, base rows frozen.
    pub prototypes: PrototypeRegistry,
    pub noise: NoiseSpec,
    pub hallucinator: Option<Hallucinator>,
    /// Hallucinator classification loss per training iteration (conservative only).
    pub halluc_loss_trace: Vec<f64>,
    /// Base-class training accuracy of `head` after `transform`.
    pub train_accuracy: f64,
}

impl BaseState {
    /// The space hallucinations are generated in: raw features for the
    /// aggressive variant, transformed features otherwise.
    pub fn hallucinates_raw(&self) -> bool {
        self.hallucinator
            .as_ref()
            .is_some_and(|h| h.variant() == Variant::Aggressive)
    }
}

fn rows_of(features: &[&[f64]]) -> Result<Matrix> {
    Matrix::from_rows(features)
}

fn check_finite(stage: &'static str, iteration: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            stage,
            iteration,
            detail: format!("loss became {loss}"),
        })
    }
}

/// Draws a 1:3-style minibatch of foreground indices and background indices.
fn sample_mixed(data: &BaseData, config: &TrainConfig, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let fg = ((config.batch_size as f64) * config.foreground_fraction).round() as usize;
    let fg_idx = (0..fg).map(|_| rng.index(data.foreground.len())).collect();
    let bg_idx = (0..config.batch_size - fg)
        .map(|_| rng.index(data.background.len()))
        .collect();
    (fg_idx, bg_idx)
}

fn objectness_batch(data: &BaseData, config: &TrainConfig, rng: &mut Rng) -> Result<(Matrix, Vec<bool>)> {
    let (fg, bg) = sample_mixed(data, config, rng);
    let rows: Vec<&[f64]> = fg
        .iter()
        .map(|&i| data.foreground[i].vector.as_slice())
        .chain(bg.iter().map(|&i| data.background[i].as_slice()))
        .collect();
    let labels = (0..rows.len()).map(|i| i < fg.len()).collect();
    Ok((rows_of(&rows)?, labels))
}

/// Trains a single objectness scorer with binary cross-entropy.
pub fn train_single_rpn(data: &BaseData, config: &TrainConfig, rng: &mut Rng) -> Result<ObjectnessHead> {
    let d = data.background[0].len();
    let mut head = ObjectnessHead::new(d, 0.1, &mut rng.fork("init"));
    let sgd = &config.base.rpn_sgd;
    for it in 0..sgd.total_iterations {
        let (x, y) = objectness_batch(data, config, rng)?;
        let (loss, grad) = head.loss_and_grads(&x, &y)?;
        check_finite("single-rpn", it, loss)?;
        let mut p = head.flatten();
        sgd_update(&mut p, &grad, sgd.lr_at(it));
        head.load(&p);
    }
    Ok(head)
}

/// Trains the cooperating ensemble with the selected-head objective.
pub fn train_ensemble(data: &BaseData, config: &TrainConfig, rng: &mut Rng) -> Result<RpnEnsemble> {
    let d = data.background[0].len();
    let c = &config.corpns;
    let mut ens = RpnEnsemble::new(c.heads, d, 0.1, c.coop_threshold, c.div_epsilon, &mut rng.fork("init"))?;
    ens.loss_weights = c.loss_weights;
    let sgd = &config.base.rpn_sgd;
    for it in 0..sgd.total_iterations {
        let (x, y) = objectness_batch(data, config, rng)?;
        let (loss, grads) = corpns_total_loss(&ens, &x, &y)?;
        check_finite("corpns", it, loss.total())?;
        let mut p = ens.flatten();
        sgd_update(&mut p, &grads.flatten(), sgd.lr_at(it));
        ens.load(&p);
    }
    Ok(ens)
}

/// Fraction of foreground proposals each ensemble head scores at least `bound`.
pub fn ensemble_foreground_coverage(ens: &RpnEnsemble, data: &BaseData, bound: f64) -> Result<Vec<f64>> {
    let rows: Vec<&[f64]> = data.foreground.iter().map(|f| f.vector.as_slice()).collect();
    let f = head_scores(ens, &rows_of(&rows)?)?;
    Ok(f.row_iter()
        .map(|r| r.iter().filter(|&&s| s >= bound).count() as f64 / r.len() as f64)
        .collect())
}

fn base_targets(head: &ClassifierHead, fg: &[usize], bg: usize, data: &BaseData) -> Result<Vec<usize>> {
    let mut t = fg
        .iter()
        .map(|&i| head.row_of(data.foreground[i].label))
        .collect::<Result<Vec<_>>>()?;
    t.extend(std::iter::repeat(head.background_row()).take(bg));
    Ok(t)
}

/// Trains the transform and base head; for the aggressive variant the
/// hallucinator is trained jointly through the prototypical loss.
pub fn train_base_stage(world: &SyntheticWorld, config: &TrainConfig, rng: &Rng) -> Result<(BaseState, BaseData)> {
    let d = world.feature_dim;
    let data = BaseData::generate(world, config, &mut rng.fork("base-data"))?;
    let mut init_rng = rng.fork("base-init");
    let mut transform = Affine::random(d, d, &mut init_rng);
    let mut head = ClassifierHead::new(
        config.head_kind,
        world.base_classes,
        d,
        config.cosine_scale,
        0.1,
        &mut init_rng,
    );
    let aggressive = config.variant == VariantSetting::Aggressive;

    // Raw-space statistics are fixed before training, so the aggressive
    // hallucinator can read them throughout.
    let raw_rows: Vec<&[f64]> = data.foreground.iter().map(|f| f.vector.as_slice()).collect();
    let mut raw_protos = PrototypeRegistry::new(world.num_classes(), world.base_classes, d);
    raw_protos.freeze_base_prototypes(&data.foreground)?;
    let raw_noise = fit_noise_spec(&raw_rows)?;
    let mut halluc = if aggressive {
        Some(init_hallucinator(d, Variant::Aggressive, config.halluc_init_std, &mut rng.fork("halluc-init"))?)
    } else {
        None
    };

    let mut batch_rng = rng.fork("base-batches");
    let mut agg_rng = rng.fork("aggressive-batches");
    let sgd = &config.base.sgd;
    for it in 0..sgd.total_iterations {
        let (fg, bg) = sample_mixed(&data, config, &mut batch_rng);
        let rows: Vec<&[f64]> = fg
            .iter()
            .map(|&i| data.foreground[i].vector.as_slice())
            .chain(bg.iter().map(|&i| data.background[i].as_slice()))
            .collect();
        let x = rows_of(&rows)?;
        let targets = base_targets(&head, &fg, bg.len(), &data)?;
        let (z, cache) = transform.forward(&x, Activation::Relu)?;
        let (mut loss, hg) = head.loss_and_grads(&z, &targets)?;
        let tg = transform.backward(&cache, &hg.inputs)?;
        let lr = sgd.lr_at(it);

        let mut t_params = Vec::new();
        transform.flatten_into(&mut t_params);
        let mut t_grad = tg.weights.into_vec();
        t_grad.extend_from_slice(&tg.bias);

        if let Some(h) = halluc.as_mut() {
            let (inputs, val, val_classes) = aggressive_batch(&data, &raw_protos, &raw_noise, config, &mut agg_rng)?;
            let (l, h_grads, t_extra) =
                aggressive_prototypical_loss(h, &transform, &val, &val_classes, &inputs, config.cosine_scale)?;
            loss += l;
            crate::numerics::axpy(1.0, t_extra.weights.as_slice(), &mut t_grad[..d * d]);
            crate::numerics::axpy(1.0, &t_extra.bias, &mut t_grad[d * d..]);
            let mut hp = h.flatten();
            sgd_update(&mut hp, &h_grads.flatten(), lr);
            h.load(&hp);
        }
        check_finite("base", it, loss)?;
        sgd_update(head.weights.as_mut_slice(), hg.weights.as_slice(), lr);
        sgd_update(&mut t_params, &t_grad, lr);
        transform.load_from(&t_params);
        if it % 500 == 0 {
            debug!("base stage iteration {it}: loss {loss:.4}");
        }
    }

    let fg_rows: Vec<&[f64]> = data.foreground.iter().map(|f| f.vector.as_slice()).collect();
    let z_fg = transform.apply(&rows_of(&fg_rows)?, Activation::Relu)?;
    let preds = head.predict(&z_fg)?;
    let correct = preds
        .iter()
        .zip(&data.foreground)
        .filter(|((row, _), f)| f.label == Label::Class(*row))
        .count();
    let train_accuracy = correct as f64 / preds.len() as f64;

    let (prototypes, noise) = if aggressive {
        (raw_protos, raw_noise)
    } else {
        let z_examples: Vec<LabeledFeature> = z_fg
            .row_iter()
            .zip(&data.foreground)
            .map(|(v, f)| LabeledFeature::real(v.to_vec(), f.label))
            .collect();
        let mut protos = PrototypeRegistry::new(world.num_classes(), world.base_classes, d);
        protos.freeze_base_prototypes(&z_examples)?;
        let z_rows: Vec<&[f64]> = z_fg.row_iter().collect();
        (protos, fit_noise_spec(&z_rows)?)
    };

    let single_rpn = train_single_rpn(&data, config, &mut rng.fork("single-rpn"))?;
    let ensemble = train_ensemble(&data, config, &mut rng.fork("corpns"))?;
    Ok((
        BaseState {
            transform,
            head,
            single_rpn,
            ensemble,
            prototypes,
            noise,
            hallucinator: halluc,
            halluc_loss_trace: Vec::new(),
            train_accuracy,
        },
        data,
    ))
}

/// Hallucination requests plus disjoint validation features for the
/// aggressive loss, drawn from a random subset of base classes.
fn aggressive_batch(
    data: &BaseData,
    protos: &PrototypeRegistry,
    noise: &NoiseSpec,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(HallucinationInputs, Matrix, Vec<usize>)> {
    let n = config.base.halluc_classes_per_batch.min(data.by_class.len());
    let classes = rng.choose_distinct(data.by_class.len(), n);
    let mut requests: Vec<(usize, &[f64])> = Vec::new();
    let mut val: Vec<&[f64]> = Vec::new();
    let mut val_classes = Vec::new();
    let per = config.base.halluc_per_class;
    let nv = config.base.aggressive_validation_per_class;
    for &c in &classes {
        let pool = &data.by_class[c];
        let picks = rng.choose_distinct(pool.len(), (per + nv).min(pool.len()));
        let (seeds, held) = picks.split_at(picks.len().saturating_sub(nv).max(1));
        for &i in seeds {
            requests.push((c, data.foreground[pool[i]].vector.as_slice()));
        }
        for &i in held {
            val.push(data.foreground[pool[i]].vector.as_slice());
            val_classes.push(c);
        }
    }
    let inputs = HallucinationInputs::build(protos, &requests, noise, rng)?;
    Ok((inputs, rows_of(&val)?, val_classes))
}

/// Trains a conservative hallucinator against the frozen base head with the
/// summed classification loss of its outputs. Returns the loss trace.
pub fn train_hallucinator_base(
    h: &mut Hallucinator,
    head: &ClassifierHead,
    base: &BaseState,
    data: &BaseData,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let transform = (h.variant() == Variant::Aggressive).then_some(&base.transform);
    // Seeds live in the hallucinator's input space.
    let seeds: Vec<Vec<f64>> = if transform.is_some() {
        data.foreground.iter().map(|f| f.vector.clone()).collect()
    } else {
        let rows: Vec<&[f64]> = data.foreground.iter().map(|f| f.vector.as_slice()).collect();
        base.transform
            .apply(&rows_of(&rows)?, Activation::Relu)?
            .row_iter()
            .map(|r| r.to_vec())
            .collect()
    };
    let sgd = &config.base.halluc_sgd;
    let n = config.base.halluc_classes_per_batch.min(data.by_class.len());
    let mut trace = Vec::with_capacity(sgd.total_iterations);
    for it in 0..sgd.total_iterations {
        let classes = rng.choose_distinct(data.by_class.len(), n);
        let mut requests: Vec<(usize, &[f64])> = Vec::new();
        for &c in &classes {
            let pool = &data.by_class[c];
            for _ in 0..config.base.halluc_per_class {
                requests.push((c, seeds[pool[rng.index(pool.len())]].as_slice()));
            }
        }
        let inputs = HallucinationInputs::build(&base.prototypes, &requests, &base.noise, rng)?;
        let (loss, grads) = hallucination_loss(h, transform, head, &inputs)?;
        check_finite("hallucinator-base", it, loss)?;
        trace.push(loss);
        let mut p = h.flatten();
        sgd_update(&mut p, &grads.flatten(), sgd.lr_at(it));
        h.load(&p);
    }
    Ok(trace)
}

/// Base stage followed by hallucinator training, as one cached unit.
pub fn prepare_base(world: &SyntheticWorld, config: &TrainConfig, rng: &Rng) -> Result<BaseState> {
    let (mut state, data) = train_base_stage(world, config, rng)?;
    if state.hallucinator.is_none() {
        let mut h = init_hallucinator(
            world.feature_dim,
            Variant::Conservative,
            config.halluc_init_std,
            &mut rng.fork("halluc-init"),
        )?;
        let head = state.head.clone();
        state.halluc_loss_trace =
            train_hallucinator_base(&mut h, &head, &state, &data, config, &mut rng.fork("halluc-train"))?;
        state.hallucinator = Some(h);
    }
    Ok(state)
}
