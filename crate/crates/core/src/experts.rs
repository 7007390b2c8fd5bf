//! Per-domain adapter training on a frozen base, factor-wise merging, and the
//! delta-average audit.
//!
//! Merging averages the factors (`A* = mean A_t`, `B* = mean B_t`) and the
//! merged layer uses `W0 + B*·A*`. Because `mean(B)·mean(A)` differs from
//! `mean(B·A)` in general, the dense delta average is exposed separately
//! together with the per-layer gap between the two.

use std::collections::BTreeMap;

use crate::diffusion::{denoise_loss, Condition, NoiseSchedule};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{AdamState, LoraAdapter, MlpDenoiser, ParamSet};
use crate::pipeline::synth::SynthPair;
use crate::rng::SeededRng;

/// Label carried by merged adapters.
pub const MERGED_LABEL: &str = "merged";

/// Optimization settings shared by pretraining and expert training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the `‖A‖_F² + ‖B‖_F²` penalty (adapter training only).
    pub lambda: f64,
    pub rank: usize,
    /// Layers that receive adapters; `None` means every hidden-to-hidden layer.
    pub layers: Option<Vec<String>>,
    /// Record the minibatch loss every this many steps (and at the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 32, lr: 3e-4, lambda: 1e-4, rank: 4, layers: None, log_every: 10 }
    }
}

/// `(step, minibatch loss)` pairs.
pub type LossLog = Vec<(usize, f64)>;

fn condition_for(domain: Domain, domains: &[Domain]) -> Result<Condition> {
    let idx = domains.iter().position(|&d| d == domain).ok_or_else(|| Error::UnknownDomain(domain.to_string()))?;
    Condition::new(idx, domains.len())
}

fn run_adam(
    model: &mut MlpDenoiser,
    set: ParamSet,
    data: &[(&[f64], Condition)],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<LossLog> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let lambda = if set == ParamSet::Adapters { cfg.lambda } else { 0.0 };
    let mut params = model.params(set);
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut log = LossLog::new();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 1..=cfg.steps {
        batch.clear();
        batch.extend((0..cfg.batch_size).map(|_| data[rng.below(data.len())]));
        let (loss, grad) = denoise_loss(model, &batch, sched, lambda, set, rng)?;
        adam.step(&mut params, &grad)?;
        model.set_params(set, &params)?;
        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            log.push((step, loss));
        }
    }
    Ok(log)
}

/// Trains every base weight and bias on the pooled, conditioned dataset.
pub fn pretrain_base(
    model: &MlpDenoiser,
    dataset: &[SynthPair],
    domains: &[Domain],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(MlpDenoiser, LossLog)> {
    if dataset.is_empty() {
        return Err(Error::invalid("pretraining dataset is empty"));
    }
    let conds = dataset.iter().map(|p| condition_for(p.domain, domains)).collect::<Result<Vec<_>>>()?;
    let data: Vec<(&[f64], Condition)> = dataset.iter().zip(conds).map(|(p, c)| (p.sample.as_slice(), c)).collect();
    let mut model = model.base();
    let log = run_adam(&mut model, ParamSet::Base, &data, sched, cfg, rng)?;
    Ok((model, log))
}

/// Result of training one domain expert.
#[derive(Debug, Clone)]
pub struct ExpertTraining {
    pub adapters: Vec<LoraAdapter>,
    pub log: LossLog,
}

/// Trains fresh adapters (B = 0) for `domain` against its own data with the
/// base weights frozen. `A` factors are drawn from `rng` before training.
pub fn train_expert(
    base: &MlpDenoiser,
    domain: Domain,
    domains: &[Domain],
    dataset: &[SynthPair],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<ExpertTraining> {
    let layers = cfg.layers.clone().unwrap_or_else(|| base.hidden_layer_names());
    if layers.is_empty() {
        return Err(Error::invalid("no layers to adapt"));
    }
    let init = base.init_adapters(&layers, domain.label(), cfg.rank, rng)?;
    train_expert_from(base, init, domain, domains, dataset, sched, cfg, rng)
}

/// Like [`train_expert`] but starting from explicit adapters, e.g. a shared
/// initialization reused by every domain.
#[allow(clippy::too_many_arguments)]
pub fn train_expert_from(
    base: &MlpDenoiser,
    init: Vec<LoraAdapter>,
    domain: Domain,
    domains: &[Domain],
    dataset: &[SynthPair],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<ExpertTraining> {
    if dataset.is_empty() {
        return Err(Error::invalid(format!("no training data for domain {domain}")));
    }
    if let Some(p) = dataset.iter().find(|p| p.domain != domain) {
        return Err(Error::invalid(format!("expert for {domain} given a sample from {} (prompt {})", p.domain, p.prompt_id)));
    }
    if !base.adapters().is_empty() {
        return Err(Error::invalid("base model already carries adapters"));
    }
    let cond = condition_for(domain, domains)?;
    let init: Vec<LoraAdapter> = init.into_iter().map(|a| a.with_domain(domain.label())).collect();
    let mut model = base.with_adapters(&init)?;
    let data: Vec<(&[f64], Condition)> = dataset.iter().map(|p| (p.sample.as_slice(), cond)).collect();
    let log = run_adam(&mut model, ParamSet::Adapters, &data, sched, cfg, rng)?;
    Ok(ExpertTraining { adapters: model.adapters(), log })
}

/// A frozen base plus one adapter set per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSet {
    base: MlpDenoiser,
    experts: BTreeMap<String, Vec<LoraAdapter>>,
}

impl ExpertSet {
    /// Checks that every expert adapts the same layers with the same shapes
    /// and that those layers exist in `base`.
    pub fn new(base: MlpDenoiser, experts: BTreeMap<String, Vec<LoraAdapter>>) -> Result<Self> {
        let set = Self { base: base.base(), experts };
        set.validate()?;
        Ok(set)
    }

    pub fn base(&self) -> &MlpDenoiser {
        &self.base
    }

    pub fn experts(&self) -> &BTreeMap<String, Vec<LoraAdapter>> {
        &self.experts
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Base with the named expert's adapters attached.
    pub fn expert_model(&self, label: &str) -> Result<MlpDenoiser> {
        let ads = self.experts.get(label).ok_or_else(|| Error::invalid(format!("no expert `{label}`")))?;
        self.base.with_adapters(ads)
    }

    fn validate(&self) -> Result<()> {
        let Some((first_label, reference)) = self.experts.iter().next() else {
            return Err(Error::invalid("expert set is empty"));
        };
        for ad in reference {
            let layer = self
                .base
                .layer(ad.layer_name())
                .ok_or_else(|| Error::MergeMismatch { layer: ad.layer_name().to_string(), detail: "not a layer of the base model".into() })?;
            if (layer.d_out(), layer.d_in()) != (ad.d_out(), ad.d_in()) {
                return Err(Error::MergeMismatch {
                    layer: ad.layer_name().to_string(),
                    detail: format!("adapter is {}x{}, layer is {}x{}", ad.d_out(), ad.d_in(), layer.d_out(), layer.d_in()),
                });
            }
        }
        for (label, ads) in &self.experts {
            if ads.len() != reference.len() {
                let missing = reference.iter().find(|r| !ads.iter().any(|a| a.layer_name() == r.layer_name())).or_else(|| reference.first());
                return Err(Error::MergeMismatch {
                    layer: missing.map_or_else(String::new, |a| a.layer_name().to_string()),
                    detail: format!("expert `{label}` adapts {} layers, `{first_label}` adapts {}", ads.len(), reference.len()),
                });
            }
            for (a, r) in ads.iter().zip(reference) {
                if a.layer_name() != r.layer_name() {
                    return Err(Error::MergeMismatch {
                        layer: r.layer_name().to_string(),
                        detail: format!("expert `{label}` has `{}` in its place", a.layer_name()),
                    });
                }
                if a.a().shape() != r.a().shape() || a.b().shape() != r.b().shape() {
                    return Err(Error::MergeMismatch {
                        layer: r.layer_name().to_string(),
                        detail: format!("expert `{label}` has rank {} vs {}", a.rank(), r.rank()),
                    });
                }
            }
        }
        Ok(())
    }

    fn layer_names(&self) -> Vec<String> {
        self.experts.values().next().map(|ads| ads.iter().map(|a| a.layer_name().to_string()).collect()).unwrap_or_default()
    }

    fn layer_adapters(&self, i: usize) -> impl Iterator<Item = &LoraAdapter> {
        self.experts.values().map(move |ads| &ads[i])
    }
}

fn mean_of<'a>(ms: impl Iterator<Item = &'a Matrix>, n: usize) -> Result<Matrix> {
    let mut iter = ms;
    let mut acc = iter.next().ok_or_else(|| Error::invalid("nothing to average"))?.clone();
    for m in iter {
        acc.add_assign(m)?;
    }
    let n = n as f64;
    acc.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Factor-wise merge: per layer, `A* = mean_t A_t` and `B* = mean_t B_t`.
pub fn merge_experts(experts: &ExpertSet) -> Result<Vec<LoraAdapter>> {
    experts.validate()?;
    let n = experts.len();
    experts
        .layer_names()
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let a = mean_of(experts.layer_adapters(i).map(LoraAdapter::a), n)?;
            let b = mean_of(experts.layer_adapters(i).map(LoraAdapter::b), n)?;
            LoraAdapter::from_factors(name, MERGED_LABEL, a, b)
        })
        .collect()
}

/// Dense per-layer mean of materialized deltas, `mean_t B_t·A_t`.
pub fn merge_deltas_oracle(experts: &ExpertSet) -> Result<Vec<(String, Matrix)>> {
    experts.validate()?;
    let n = experts.len();
    experts
        .layer_names()
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let deltas: Vec<Matrix> = experts.layer_adapters(i).map(LoraAdapter::delta).collect();
            Ok((name, mean_of(deltas.iter(), n)?))
        })
        .collect()
}

/// Per-layer `‖B*·A* − mean_t B_t·A_t‖_F`.
pub fn merge_discrepancy(experts: &ExpertSet) -> Result<Vec<(String, f64)>> {
    let merged = merge_experts(experts)?;
    let oracle = merge_deltas_oracle(experts)?;
    merged.iter().zip(oracle).map(|(m, (name, dense))| Ok((name, m.delta().sub(&dense)?.frobenius_norm()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eig;
    use crate::net::{LinearLayer, TIME_EMBED_DIM};

    /// A 3-layer model whose middle layer is 2x2, for hand-sized merges.
    fn tiny_base() -> MlpDenoiser {
        let mut rng = SeededRng::new(0);
        let d_in = 1 + 1 + TIME_EMBED_DIM;
        let layers = vec![
            LinearLayer::new("input", Matrix::random_normal(2, d_in, 0.3, &mut rng), vec![0.0; 2]).unwrap(),
            LinearLayer::new("hidden1", Matrix::identity(2), vec![0.0; 2]).unwrap(),
            LinearLayer::new("output", Matrix::random_normal(1, 2, 0.3, &mut rng), vec![0.0]).unwrap(),
        ];
        MlpDenoiser::from_layers(1, 1, layers).unwrap()
    }

    fn adapter(a: &[[f64; 2]], b: &[[f64; 1]]) -> LoraAdapter {
        LoraAdapter::from_factors("hidden1", "x", Matrix::from_rows(a).unwrap(), Matrix::from_rows(b).unwrap()).unwrap()
    }

    fn rank_one_pair() -> ExpertSet {
        let mut experts = BTreeMap::new();
        experts.insert("typical_parts".to_string(), vec![adapter(&[[1.0, 0.0]], &[[1.0], [0.0]])]);
        experts.insert("scene_narratives".to_string(), vec![adapter(&[[0.0, 1.0]], &[[0.0], [1.0]])]);
        ExpertSet::new(tiny_base(), experts).unwrap()
    }

    #[test]
    fn rank_one_pair_hand_values() {
        let set = rank_one_pair();
        let merged = merge_experts(&set).unwrap();
        assert_eq!(merged[0].a(), &Matrix::from_rows(&[[0.5, 0.5]]).unwrap());
        assert_eq!(merged[0].b(), &Matrix::from_rows(&[[0.5], [0.5]]).unwrap());
        assert_eq!(merged[0].delta(), Matrix::from_rows(&[[0.25, 0.25], [0.25, 0.25]]).unwrap());
        let dense = merge_deltas_oracle(&set).unwrap();
        assert_eq!(dense[0].1, Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]]).unwrap());
        let gap = merge_discrepancy(&set).unwrap();
        assert_eq!(gap, vec![("hidden1".to_string(), 0.5)]);
    }

    #[test]
    fn singleton_merge_is_exact() {
        let mut rng = SeededRng::new(3);
        let ad = LoraAdapter::from_factors("hidden1", "typical_parts", Matrix::random_normal(1, 2, 1.0, &mut rng), Matrix::random_normal(2, 1, 1.0, &mut rng))
            .unwrap();
        let set = ExpertSet::new(tiny_base(), BTreeMap::from([("typical_parts".to_string(), vec![ad.clone()])])).unwrap();
        let merged = merge_experts(&set).unwrap();
        assert_eq!(merged[0].a(), ad.a());
        assert_eq!(merged[0].b(), ad.b());
        assert_eq!(merge_deltas_oracle(&set).unwrap()[0].1, ad.delta());
        assert_eq!(merge_discrepancy(&set).unwrap()[0].1, 0.0);
    }

    #[test]
    fn identical_experts_merge_to_themselves() {
        let mut rng = SeededRng::new(4);
        let ad = LoraAdapter::from_factors("hidden1", "x", Matrix::random_normal(2, 2, 1.0, &mut rng), Matrix::random_normal(2, 2, 1.0, &mut rng)).unwrap();
        let experts = Domain::ALL.iter().map(|d| (d.to_string(), vec![ad.clone()])).collect();
        let set = ExpertSet::new(tiny_base(), experts).unwrap();
        let merged = merge_experts(&set).unwrap();
        assert!(merged[0].a().sub(ad.a()).unwrap().max_abs() < 1e-12);
        assert!(merged[0].b().sub(ad.b()).unwrap().max_abs() < 1e-12);
        assert!(merge_discrepancy(&set).unwrap()[0].1 < 1e-12);
        let dense = &merge_deltas_oracle(&set).unwrap()[0].1;
        assert!(dense.sub(&merged[0].delta()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn merge_scales_linearly() {
        let set = rank_one_pair();
        let scaled: BTreeMap<_, _> = set
            .experts()
            .iter()
            .map(|(k, ads)| {
                let ads = ads.iter().map(|a| LoraAdapter::from_factors(a.layer_name(), a.domain(), a.a().scale(3.0), a.b().clone()).unwrap()).collect();
                (k.clone(), ads)
            })
            .collect();
        let scaled = ExpertSet::new(tiny_base(), scaled).unwrap();
        let m = merge_experts(&set).unwrap();
        let ms = merge_experts(&scaled).unwrap();
        assert_eq!(ms[0].a(), &m[0].a().scale(3.0));
        assert_eq!(ms[0].b(), m[0].b());
    }

    #[test]
    fn merged_delta_rank_is_bounded() {
        let mut rng = SeededRng::new(6);
        let base = MlpDenoiser::new(3, 3, &[10, 10, 10], &mut rng).unwrap();
        let experts = Domain::ALL
            .iter()
            .map(|d| {
                let ads = base
                    .hidden_layer_names()
                    .iter()
                    .map(|name| {
                        LoraAdapter::from_factors(
                            name.clone(),
                            d.label(),
                            Matrix::random_normal(2, 10, 1.0, &mut rng),
                            Matrix::random_normal(10, 2, 1.0, &mut rng),
                        )
                        .unwrap()
                    })
                    .collect();
                (d.to_string(), ads)
            })
            .collect();
        let set = ExpertSet::new(base, experts).unwrap();
        for ad in merge_experts(&set).unwrap() {
            let d = ad.delta();
            let gram = d.transpose().matmul(&d).unwrap();
            let eig = sym_eig(&gram).unwrap();
            assert!(eig.values.iter().filter(|&&l| l > 1e-10).count() <= 2);
        }
        // The dense average generally has higher rank.
        let dense = &merge_deltas_oracle(&set).unwrap()[0].1;
        let eig = sym_eig(&dense.transpose().matmul(dense).unwrap()).unwrap();
        assert!(eig.values.iter().filter(|&&l| l > 1e-10).count() > 2);
    }

    #[test]
    fn mismatched_experts_name_the_layer() {
        let mut experts = BTreeMap::new();
        experts.insert("a".to_string(), vec![adapter(&[[1.0, 0.0]], &[[1.0], [0.0]])]);
        let rank2 = LoraAdapter::from_factors("hidden1", "b", Matrix::identity(2), Matrix::identity(2)).unwrap();
        experts.insert("b".to_string(), vec![rank2]);
        let err = ExpertSet::new(tiny_base(), experts).unwrap_err();
        assert!(matches!(err, Error::MergeMismatch { ref layer, .. } if layer == "hidden1"), "{err}");

        let mut experts = BTreeMap::new();
        let wrong = LoraAdapter::from_factors("output", "a", Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
        experts.insert("a".to_string(), vec![adapter(&[[1.0, 0.0]], &[[1.0], [0.0]])]);
        experts.insert("b".to_string(), vec![wrong]);
        assert!(matches!(ExpertSet::new(tiny_base(), experts), Err(Error::MergeMismatch { .. })));
        assert!(ExpertSet::new(tiny_base(), BTreeMap::new()).is_err());
    }

    fn pairs(domain: Domain, n: usize, center: f64, rng: &mut SeededRng) -> Vec<SynthPair> {
        (0..n).map(|i| SynthPair { prompt_id: i as u64, domain, sample: vec![center + 0.3 * rng.normal(), -center + 0.3 * rng.normal()] }).collect()
    }

    #[test]
    fn zero_step_training_is_noop() {
        let mut rng = SeededRng::new(7);
        let base = MlpDenoiser::new(2, 2, &[8, 8, 8], &mut rng).unwrap();
        let data = pairs(Domain::TypicalParts, 10, 1.0, &mut rng);
        let sched = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let cfg = TrainConfig { steps: 0, rank: 2, ..TrainConfig::default() };
        let doms = [Domain::TypicalParts, Domain::Implausible];
        let out = train_expert(&base, Domain::TypicalParts, &doms, &data, &sched, &cfg, &mut rng).unwrap();
        assert!(out.adapters.iter().all(|a| a.delta().max_abs() == 0.0));
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_leaves_base_alone() {
        let mut rng = SeededRng::new(8);
        let base = MlpDenoiser::new(2, 2, &[8, 8, 8], &mut rng).unwrap();
        let snapshot = base.params(ParamSet::Base);
        let data = pairs(Domain::Implausible, 20, 1.5, &mut rng);
        let sched = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let cfg = TrainConfig { steps: 30, batch_size: 8, lr: 1e-2, rank: 2, ..TrainConfig::default() };
        let doms = [Domain::TypicalParts, Domain::Implausible];
        let a = train_expert(&base, Domain::Implausible, &doms, &data, &sched, &cfg, &mut SeededRng::new(1)).unwrap();
        let b = train_expert(&base, Domain::Implausible, &doms, &data, &sched, &cfg, &mut SeededRng::new(1)).unwrap();
        assert_eq!(a.adapters, b.adapters);
        assert!(a.adapters.iter().any(|ad| ad.delta().max_abs() > 0.0));
        let after = base.params(ParamSet::Base);
        assert!(snapshot.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn training_rejects_bad_datasets() {
        let mut rng = SeededRng::new(9);
        let base = MlpDenoiser::new(2, 2, &[8, 8, 8], &mut rng).unwrap();
        let sched = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let cfg = TrainConfig::default();
        let doms = [Domain::TypicalParts, Domain::Implausible];
        assert!(train_expert(&base, Domain::TypicalParts, &doms, &[], &sched, &cfg, &mut rng).is_err());
        let mut mixed = pairs(Domain::TypicalParts, 3, 1.0, &mut rng);
        mixed.extend(pairs(Domain::Implausible, 3, 1.0, &mut rng));
        assert!(train_expert(&base, Domain::TypicalParts, &doms, &mixed, &sched, &cfg, &mut rng).is_err());
        let other = pairs(Domain::SceneNarratives, 3, 1.0, &mut rng);
        assert!(matches!(train_expert(&base, Domain::SceneNarratives, &doms, &other, &sched, &cfg, &mut rng), Err(Error::UnknownDomain(_))));
    }
}
