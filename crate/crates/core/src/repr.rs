//! Fused per-state latents from a product of Gaussian experts.
//!
//! Every modality has an affine encoder producing a diagonal Gaussian expert
//! and an affine decoder mapping the latent back to that modality. Experts are
//! fused in closed form together with a unit prior, and the model is trained
//! to reconstruct the *current* observation of every modality from a
//! reparameterized sample of the fused posterior.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{self, DemoSet, Modality};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprConfig {
    pub latent_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Zero means full batch.
    pub batch_size: usize,
    pub kl_weight: f64,
    pub seed: u64,
    /// Initialize every modality's encoder/decoder from the same stream, so
    /// modalities with equal dims start identical.
    pub tie_init: bool,
}

impl Default for ReprConfig {
    fn default() -> Self {
        ReprConfig {
            latent_dim: 8,
            epochs: 60,
            learning_rate: 1e-2,
            batch_size: 256,
            kl_weight: 1e-3,
            seed: 0,
            tie_init: false,
        }
    }
}

impl ReprConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.latent_dim == 0 {
            return Err("latent_dim must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("learning_rate must be > 0".into());
        }
        if !(self.kl_weight >= 0.0) {
            return Err("kl_weight must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianExpert {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianExpert {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Self {
        GaussianExpert {
            mean,
            log_variance: variance.into_iter().map(f64::ln).collect(),
        }
    }

    pub fn unit(dim: usize) -> Self {
        GaussianExpert {
            mean: vec![0.0; dim],
            log_variance: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_variance.iter().map(|lv| lv.exp()).collect()
    }
}

/// Product of diagonal Gaussians: precisions add, means combine
/// precision-weighted. `include_prior` multiplies in N(0, I).
pub fn poe_fuse(experts: &[GaussianExpert], include_prior: bool) -> Result<GaussianExpert> {
    let first = experts
        .first()
        .ok_or(Error::EmptyInput("poe_fuse needs at least one expert"))?;
    let dim = first.dim();
    if let Some(bad) = experts
        .iter()
        .find(|e| e.dim() != dim || e.log_variance.len() != dim)
    {
        return Err(Error::shape(format!("{dim}-dim experts"), format!("{}-dim expert", bad.dim())));
    }
    let mut precision = vec![if include_prior { 1.0 } else { 0.0 }; dim];
    let mut weighted = vec![0.0; dim];
    for e in experts {
        for j in 0..dim {
            let p = (-e.log_variance[j]).exp();
            precision[j] += p;
            weighted[j] += p * e.mean[j];
        }
    }
    Ok(GaussianExpert {
        mean: weighted.iter().zip(&precision).map(|(w, p)| w / p).collect(),
        log_variance: precision.iter().map(|p| -p.ln()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprModel {
    pub modalities: Vec<Modality>,
    pub latent_dim: usize,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Training loss before the first epoch, then after every epoch.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().unwrap()
    }
}

/// Per-modality observation batches, `n × dim_m` each.
pub type Batch = Vec<Array2<f64>>;

struct Layout {
    encoders: Vec<(Mlp, usize)>,
    decoders: Vec<(Mlp, usize)>,
    total: usize,
}

impl ReprModel {
    fn layout(&self) -> Layout {
        layout(&self.modalities, self.latent_dim)
    }

    pub fn init(modalities: &[Modality], cfg: &ReprConfig) -> Self {
        let lay = layout(modalities, cfg.latent_dim);
        let mut params = vec![0.0; lay.total];
        for (m, ((enc, eo), (dec, doff))) in lay.encoders.iter().zip(&lay.decoders).enumerate() {
            let stream = if cfg.tie_init { 0 } else { m as u64 };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            let e = enc.init(&mut rng);
            params[*eo..eo + e.len()].copy_from_slice(&e);
            let d = dec.init(&mut rng);
            params[*doff..doff + d.len()].copy_from_slice(&d);
        }
        ReprModel {
            modalities: modalities.to_vec(),
            latent_dim: cfg.latent_dim,
            params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Per-modality experts for one state.
    pub fn experts(&self, state: &[&[f64]]) -> Result<Vec<GaussianExpert>> {
        self.check_state(state)?;
        let lay = self.layout();
        let d = self.latent_dim;
        Ok(lay
            .encoders
            .iter()
            .zip(state)
            .map(|((enc, off), x)| {
                let out = enc.forward_one(&self.params[*off..off + enc.num_params()], x);
                GaussianExpert {
                    mean: out[..d].to_vec(),
                    log_variance: out[d..].to_vec(),
                }
            })
            .collect())
    }

    fn check_state(&self, state: &[&[f64]]) -> Result<()> {
        if state.len() != self.modalities.len() {
            return Err(Error::shape(
                format!("{} modalities", self.modalities.len()),
                format!("{} modalities", state.len()),
            ));
        }
        for (m, x) in self.modalities.iter().zip(state) {
            if x.len() != m.dim {
                return Err(Error::shape(
                    format!("`{}` of dim {}", m.name, m.dim),
                    format!("dim {}", x.len()),
                ));
            }
        }
        Ok(())
    }

    /// Fused posterior mean of one state.
    pub fn encode(&self, state: &[&[f64]]) -> Result<Vec<f64>> {
        Ok(poe_fuse(&self.experts(state)?, true)?.mean)
    }

    /// Fused posterior means for a batch, `n × latent_dim`.
    pub fn encode_batch(&self, batch: &[Array2<f64>]) -> Result<Array2<f64>> {
        if batch.len() != self.modalities.len() {
            return Err(Error::shape(
                format!("{} modalities", self.modalities.len()),
                format!("{} modalities", batch.len()),
            ));
        }
        for (m, x) in self.modalities.iter().zip(batch) {
            if x.ncols() != m.dim {
                return Err(Error::shape(
                    format!("`{}` of dim {}", m.name, m.dim),
                    format!("dim {}", x.ncols()),
                ));
            }
        }
        Ok(self.fuse_batch(batch).mean)
    }

    /// Latents for every state of a trajectory, `len × latent_dim`.
    pub fn encode_trajectory(&self, set: &DemoSet, traj: &data::Trajectory) -> Result<Array2<f64>> {
        self.encode_batch(&trajectory_batch(set, traj))
    }

    fn fuse_batch(&self, batch: &[Array2<f64>]) -> Fused {
        let lay = self.layout();
        let d = self.latent_dim;
        let n = batch[0].nrows();
        let mut precision = Array2::<f64>::ones((n, d));
        let mut weighted = Array2::<f64>::zeros((n, d));
        let mut experts = Vec::with_capacity(batch.len());
        for ((enc, off), x) in lay.encoders.iter().zip(batch) {
            let trace = enc.forward_trace(&self.params[*off..off + enc.num_params()], x.view());
            let out = trace.output();
            let mu = out.slice(s![.., ..d]).to_owned();
            let prec = out.slice(s![.., d..]).mapv(|lv| (-lv).exp());
            precision += &prec;
            weighted += &(&prec * &mu);
            experts.push((trace, mu, prec));
        }
        let var = precision.mapv(f64::recip);
        let mean = &weighted * &var;
        Fused {
            mean,
            var,
            experts,
        }
    }

    /// Loss and its gradient for `batch` under fixed reparameterization
    /// noise `noise` (`n × latent_dim`).
    pub fn loss_and_grad(
        &self,
        batch: &[Array2<f64>],
        noise: ArrayView2<f64>,
        kl_weight: f64,
        want_grad: bool,
    ) -> (LossParts, Vec<f64>) {
        let n = batch[0].nrows();
        let mut grad = if want_grad {
            vec![0.0; self.params.len()]
        } else {
            Vec::new()
        };
        if n == 0 {
            return (LossParts::default(), grad);
        }
        let lay = self.layout();
        let d = self.latent_dim;
        let nf = n as f64;
        let fused = self.fuse_batch(batch);
        let std = fused.var.mapv(f64::sqrt);
        let z = &fused.mean + &(&std * &noise);

        let mut recon = Vec::with_capacity(batch.len());
        let mut dz = Array2::<f64>::zeros((n, d));
        for ((dec, off), x) in lay.decoders.iter().zip(batch) {
            let p = &self.params[*off..off + dec.num_params()];
            let trace = dec.forward_trace(p, z.view());
            let err = trace.output() - x;
            let count = (n * x.ncols()) as f64;
            recon.push(err.mapv(|e| e * e).sum() / count);
            if want_grad {
                let g_out = err * (2.0 / count);
                dz += &dec.backward(p, &trace, g_out, &mut grad[*off..off + dec.num_params()]);
            }
        }
        let kl = 0.5
            * ndarray::Zip::from(&fused.mean)
                .and(&fused.var)
                .fold(0.0, |acc, &mu, &var| acc + var + mu * mu - 1.0 - var.ln())
            / nf;
        let total = recon.iter().sum::<f64>() + kl_weight * kl;

        if want_grad {
            let dmu = &dz + &(&fused.mean * (kl_weight / nf));
            let dvar = ndarray::Zip::from(&dz)
                .and(&noise)
                .and(&std)
                .and(&fused.var)
                .map_collect(|&g, &e, &sd, &var| {
                    g * e * 0.5 / sd + kl_weight / nf * 0.5 * (1.0 - 1.0 / var)
                });
            for (((enc, off), (trace, mu_m, prec_m)), _) in
                lay.encoders.iter().zip(&fused.experts).zip(batch)
            {
                let mut g_out = Array2::<f64>::zeros((n, 2 * d));
                for i in 0..n {
                    for j in 0..d {
                        let var = fused.var[[i, j]];
                        let t = prec_m[[i, j]];
                        g_out[[i, j]] = dmu[[i, j]] * t * var;
                        g_out[[i, d + j]] = -dmu[[i, j]] * t * var * (mu_m[[i, j]] - fused.mean[[i, j]])
                            + dvar[[i, j]] * t * var * var;
                    }
                }
                let p = &self.params[*off..off + enc.num_params()];
                enc.backward(p, trace, g_out, &mut grad[*off..off + enc.num_params()]);
            }
        }
        (
            LossParts {
                total,
                reconstruction: recon,
                kl,
            },
            grad,
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>, cfg: &ReprConfig) -> Result<()> {
        let dir = dir.as_ref();
        let header = ReprHeader {
            modalities: self.modalities.clone(),
            latent_dim: self.latent_dim,
            num_params: self.params.len(),
            config: cfg.clone(),
        };
        data::write_json(dir.join(REPR_HEADER), &header)?;
        data::write_f32_blob(dir.join(REPR_PARAMS), &data::params_to_f32(&self.params))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(ReprModel, ReprConfig)> {
        let dir = dir.as_ref();
        let header: ReprHeader = data::read_json(dir.join(REPR_HEADER))?;
        let params = data::params_from_f32(&data::read_f32_blob(dir.join(REPR_PARAMS))?);
        let model = ReprModel {
            modalities: header.modalities,
            latent_dim: header.latent_dim,
            params,
        };
        let expected = model.layout().total;
        if model.params.len() != expected || header.num_params != expected {
            return Err(Error::CorruptData {
                file: REPR_PARAMS.into(),
                detail: format!("{} params, layout needs {expected}", model.params.len()),
            });
        }
        Ok((model, header.config))
    }
}

pub const REPR_HEADER: &str = "repr.json";
pub const REPR_PARAMS: &str = "repr.params.f32";

#[derive(Serialize, Deserialize)]
struct ReprHeader {
    modalities: Vec<Modality>,
    latent_dim: usize,
    num_params: usize,
    config: ReprConfig,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// Per-modality reconstruction MSE.
    pub reconstruction: Vec<f64>,
    pub kl: f64,
}

struct Fused {
    mean: Array2<f64>,
    var: Array2<f64>,
    experts: Vec<(nn::Trace, Array2<f64>, Array2<f64>)>,
}

fn layout(modalities: &[Modality], latent_dim: usize) -> Layout {
    let mut encoders = Vec::new();
    let mut decoders = Vec::new();
    let mut off = 0;
    for m in modalities {
        let enc = Mlp::new(&[m.dim, 2 * latent_dim]);
        let n = enc.num_params();
        encoders.push((enc, off));
        off += n;
        let dec = Mlp::new(&[latent_dim, m.dim]);
        let n = dec.num_params();
        decoders.push((dec, off));
        off += n;
    }
    Layout {
        encoders,
        decoders,
        total: off,
    }
}

/// Per-modality observation matrices for one trajectory.
pub fn trajectory_batch(set: &DemoSet, traj: &data::Trajectory) -> Batch {
    set.modalities
        .iter()
        .zip(&traj.observations)
        .map(|(m, values)| {
            Array2::from_shape_fn((traj.len, m.dim), |(t, j)| f64::from(values[t * m.dim + j]))
        })
        .collect()
}

/// Every state of every trajectory, stacked per modality.
pub fn dataset_batch(set: &DemoSet) -> Batch {
    let per_traj: Vec<Batch> = set
        .trajectories
        .iter()
        .map(|t| trajectory_batch(set, t))
        .collect();
    (0..set.modalities.len())
        .map(|m| {
            let views: Vec<_> = per_traj.iter().map(|b| b[m].view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("equal modality widths")
        })
        .collect()
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn select_rows(batch: &[Array2<f64>], rows: &[usize]) -> Batch {
    batch.iter().map(|x| x.select(Axis(0), rows)).collect()
}

/// Trains the fused representation.
///
/// Every state keeps one reparameterization draw for the whole run, so the
/// objective is a fixed function of the parameters. After each epoch the full
/// training loss is evaluated; an epoch that increases it is rolled back and
/// the learning rate halved, which makes the recorded loss non-increasing.
pub fn train_repr(set: &DemoSet, cfg: &ReprConfig) -> Result<(ReprModel, TrainReport)> {
    cfg.validate().map_err(Error::Format)?;
    let batch = dataset_batch(set);
    let mut model = ReprModel::init(&set.modalities, cfg);
    let n = batch.first().map_or(0, |b| b.nrows());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_4e9);
    let noise = gaussian_matrix(n, cfg.latent_dim, &mut rng);

    let mut current = model.loss_and_grad(&batch, noise.view(), cfg.kl_weight, false).0.total;
    if !current.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    let mut report = TrainReport {
        losses: vec![current],
    };
    let mut opt = Adam::new(model.num_params(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let batch_size = if cfg.batch_size == 0 { n.max(1) } else { cfg.batch_size };

    for epoch in 1..=cfg.epochs {
        let snapshot = (model.params.clone(), opt.clone());
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let xb = select_rows(&batch, chunk);
            let nb = noise.select(Axis(0), chunk);
            let (_, grad) = model.loss_and_grad(&xb, nb.view(), cfg.kl_weight, true);
            opt.step(&mut model.params, &grad);
        }
        let loss = model.loss_and_grad(&batch, noise.view(), cfg.kl_weight, false).0.total;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        if loss > current {
            let lr = opt.lr * 0.5;
            model.params = snapshot.0;
            opt = snapshot.1;
            opt.lr = lr;
        } else {
            current = loss;
        }
        report.losses.push(current);
    }
    Ok((model, report))
}

/// Compares the analytic training-loss gradient with central differences
/// over at least 50 randomly chosen parameters (all of them when the model
/// has fewer). Deterministic in `seed`.
pub fn grad_check(model: &ReprModel, batch: &[Array2<f64>], kl_weight: f64, eps: f64, seed: u64) -> f64 {
    let n = batch.first().map_or(0, |b| b.nrows());
    if n == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian_matrix(n, model.latent_dim, &mut rng);
    let (_, grad) = model.loss_and_grad(batch, noise.view(), kl_weight, true);
    let indices = nn::sample_indices(model.num_params(), 64, &mut rng);
    let mut probe = model.clone();
    nn::max_relative_error(&model.params, &grad, &indices, eps, 1e-6, |p| {
        probe.params.copy_from_slice(p);
        probe.loss_and_grad(batch, noise.view(), kl_weight, false).0.total
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ModalityKind;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn modality(name: &str, dim: usize) -> Modality {
        Modality {
            name: name.into(),
            dim,
            kind: ModalityKind::Observation,
        }
    }

    fn expert(mean: &[f64], var: &[f64]) -> GaussianExpert {
        GaussianExpert::new(mean.to_vec(), var.to_vec())
    }

    #[test]
    fn fuse_two_units_with_prior() {
        let f = poe_fuse(&[GaussianExpert::unit(2), GaussianExpert::unit(2)], true).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(f.mean[j], 0.0);
            assert_abs_diff_eq!(f.variance()[j], 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fuse_without_prior() {
        let f = poe_fuse(&[expert(&[2.0], &[1.0]), expert(&[0.0], &[1.0])], false).unwrap();
        assert_abs_diff_eq!(f.mean[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.variance()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn fuse_single_expert_with_prior() {
        let f = poe_fuse(&[expert(&[3.0], &[0.5])], true).unwrap();
        assert_abs_diff_eq!(f.mean[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.variance()[0], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn fuse_rejects_mismatched_dims() {
        let err = poe_fuse(&[GaussianExpert::unit(2), GaussianExpert::unit(3)], true).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(matches!(poe_fuse(&[], true), Err(Error::EmptyInput(_))));
    }

    fn arb_expert(dim: usize) -> impl Strategy<Value = GaussianExpert> {
        (
            proptest::collection::vec(-5.0f64..5.0, dim),
            proptest::collection::vec(-3.0f64..3.0, dim),
        )
            .prop_map(|(mean, log_variance)| GaussianExpert { mean, log_variance })
    }

    proptest! {
        #[test]
        fn fuse_is_permutation_invariant(
            experts in proptest::collection::vec(arb_expert(3), 1..5),
            prior in any::<bool>(),
        ) {
            let a = poe_fuse(&experts, prior).unwrap();
            let mut rev = experts.clone();
            rev.reverse();
            rev.rotate_left(experts.len() / 2);
            let b = poe_fuse(&rev, prior).unwrap();
            for j in 0..3 {
                prop_assert!((a.mean[j] - b.mean[j]).abs() < 1e-9);
                prop_assert!((a.log_variance[j] - b.log_variance[j]).abs() < 1e-9);
            }
        }

        #[test]
        fn fused_variance_below_every_expert(
            experts in proptest::collection::vec(arb_expert(2), 1..5),
            prior in any::<bool>(),
        ) {
            let f = poe_fuse(&experts, prior).unwrap();
            for e in &experts {
                for j in 0..2 {
                    prop_assert!(f.variance()[j] <= e.variance()[j] * (1.0 + 1e-12));
                }
            }
        }

        #[test]
        fn infinite_variance_expert_is_identity(
            experts in proptest::collection::vec(arb_expert(2), 1..4),
            prior in any::<bool>(),
        ) {
            let base = poe_fuse(&experts, prior).unwrap();
            let mut more = experts.clone();
            more.push(expert(&[100.0, -40.0], &[1e12, 1e12]));
            let f = poe_fuse(&more, prior).unwrap();
            for j in 0..2 {
                prop_assert!((f.mean[j] - base.mean[j]).abs() < 1e-6);
                prop_assert!((f.variance()[j] - base.variance()[j]).abs() < 1e-6);
            }
        }
    }

    fn random_batch(dims: &[usize], n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        dims.iter().map(|&d| gaussian_matrix(n, d, &mut rng)).collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mods = vec![modality("a", 4), modality("b", 3), modality("c", 2)];
        for seed in 0..5 {
            let cfg = ReprConfig {
                latent_dim: 3,
                seed,
                ..Default::default()
            };
            let model = ReprModel::init(&mods, &cfg);
            let batch = random_batch(&[4, 3, 2], 16, seed + 100);
            let err = grad_check(&model, &batch, 0.5, 1e-5, seed);
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn grad_check_edge_cases() {
        let mods = vec![modality("a", 3)];
        let model = ReprModel::init(&mods, &ReprConfig::default());
        let empty = vec![Array2::zeros((0, 3))];
        assert_eq!(grad_check(&model, &empty, 1e-3, 1e-5, 0), 0.0);
        let batch = random_batch(&[3], 8, 1);
        let a = grad_check(&model, &batch, 1e-3, 1e-5, 9);
        let b = grad_check(&model, &batch, 1e-3, 1e-5, 9);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn zero_encoder_encodes_to_origin() {
        let mods = vec![modality("a", 3), modality("b", 2)];
        let mut model = ReprModel::init(&mods, &ReprConfig::default());
        model.params.iter_mut().for_each(|p| *p = 0.0);
        let h = model.encode(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5]]).unwrap();
        assert_eq!(h, vec![0.0; 8]);
    }

    #[test]
    fn encode_is_deterministic_and_checks_shape() {
        let mods = vec![modality("a", 3)];
        let model = ReprModel::init(&mods, &ReprConfig::default());
        let x = [0.3, -0.1, 0.9];
        assert_eq!(model.encode(&[&x]).unwrap(), model.encode(&[&x]).unwrap());
        assert!(matches!(
            model.encode(&[&x[..2]]),
            Err(Error::Shape { .. })
        ));
        let batch = random_batch(&[3], 12, 4);
        let h = model.encode_batch(&batch).unwrap();
        assert_eq!(h.dim(), (12, 8));
        assert!(h.iter().all(|v| v.is_finite()));
        let row = batch[0].row(5).to_vec();
        let single = model.encode(&[&row]).unwrap();
        for j in 0..8 {
            assert_abs_diff_eq!(h[[5, j]], single[j], epsilon = 1e-12);
        }
    }
}
