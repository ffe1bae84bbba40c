//! The full generator (encoder → decoder → adjacency → refinement), the
//! discriminators, and the combined training objective.

use crate::adversarial::{adversarial_losses, discriminate, pose_loss, DiscriminatorParams, PROB_EPS};
use crate::attention::{hierarchical_refine, Refiner};
use crate::dgcn::{build_adjacency, EdgeMlpParams};
use crate::diffcore::{DiffValue, Matrix, Tape};
use crate::encdec::{adaptive_node_count, decode, encode, DecoderParams, EncoderParams};
use crate::error::{Error, Result};
use crate::graphcore::{laplacian, laplacian_matrix, DiffSkeleton, PointCloud, SkeletonGraph};
use crate::metrics::match_nodes;
use crate::nn::{Activation, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::spectral::{eigh_matrix, spectral_loss_aligned};

use super::config::TrainConfig;

/// Every trainable part. All parts are built regardless of the ablation
/// flags, in a fixed order, so configurations that differ only in flags
/// start from identical weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub edge: EdgeMlpParams,
    pub discriminator: DiscriminatorParams,
    pub refiner: Refiner,
    pub topology_discriminator: DiscriminatorParams,
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(cfg.seed);
        let slope = cfg.leaky_slope;
        let encoder = EncoderParams::new(
            &mut store,
            &mut rng,
            &cfg.encoder_samples,
            &cfg.encoder_radii,
            cfg.encoder_hidden,
            cfg.global_dim,
            slope,
        )?;
        let decoder = DecoderParams::new(
            &mut store,
            &mut rng,
            cfg.global_dim,
            &cfg.decoder_hidden,
            cfg.feature_dim,
            (cfg.n_min, cfg.n_max),
            slope,
        )?;
        let edge = EdgeMlpParams::new(&mut store, &mut rng, cfg.feature_dim, &cfg.edge_hidden, Activation::LeakyRelu(slope));
        let discriminator = DiscriminatorParams::new(&mut store, &mut rng, cfg.disc_k, cfg.disc_bins, &cfg.disc_hidden, slope)?;
        let refiner = Refiner::new(&mut store, &mut rng, cfg.feature_dim, &cfg.attention_thresholds, cfg.attention_gate);
        let topology_discriminator = DiscriminatorParams::spectral(&mut store, &mut rng, cfg.disc_k.max(1), &cfg.disc_hidden, slope)?;
        Ok(Self {
            store,
            encoder,
            decoder,
            edge,
            discriminator,
            refiner,
            topology_discriminator,
        })
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.params();
        ids.extend(self.decoder.params());
        ids.extend(self.edge.params());
        ids.extend(self.refiner.params());
        ids
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        let mut ids = self.discriminator.params();
        ids.extend(self.topology_discriminator.params());
        ids
    }

    /// `N_max` when adaptive complexity is off.
    pub fn node_count(&self, cfg: &TrainConfig, pc: &PointCloud) -> Result<usize> {
        if cfg.adaptive_complexity {
            adaptive_node_count(pc, cfg.knn_k.min(pc.len().saturating_sub(1)).max(1), (cfg.n_min, cfg.n_max))
        } else {
            Ok(cfg.n_max)
        }
    }

    /// Predicted skeleton on the tape; refinement runs only when enabled.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, cfg: &TrainConfig, pc: &PointCloud, n: usize) -> Result<DiffSkeleton> {
        let global = encode(tape, p, pc, &self.encoder)?;
        let dec = decode(tape, p, global, n, &self.decoder)?;
        let adjacency = build_adjacency(tape, p, dec.features, dec.joints, &self.edge)?;
        let skel = DiffSkeleton {
            joints: dec.joints,
            adjacency,
            features: dec.features,
        };
        if cfg.hierarchical_attention {
            hierarchical_refine(tape, p, &skel, &self.refiner)
        } else {
            Ok(skel)
        }
    }

    /// Predicted skeleton values (soft adjacency, joints clamped to the unit box).
    pub fn predict(&self, cfg: &TrainConfig, pc: &PointCloud, n: usize) -> Result<SkeletonGraph> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let skel = self.forward(&mut tape, &p, cfg, pc, n)?;
        let joints = tape.value(skel.joints).map(|x| x.clamp(0.0, 1.0));
        let adjacency = tape.value(skel.adjacency).clone();
        let features = tape.value(skel.features).clone();
        SkeletonGraph::new(joints, adjacency, features)
    }
}

/// Ground truth with the pieces the losses need precomputed.
#[derive(Debug, Clone)]
pub struct Target {
    pub graph: SkeletonGraph,
    pub laplacian: Matrix,
    pub spectrum: Vec<f64>,
}

impl Target {
    pub fn new(graph: SkeletonGraph) -> Result<Self> {
        let laplacian = laplacian_matrix(&graph.adjacency)?;
        let spectrum = eigh_matrix(&laplacian)?.eigenvalues;
        Ok(Self { graph, laplacian, spectrum })
    }
}

/// Loss terms of one sample; disabled terms are `None` and build no nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: DiffValue,
    pub pose: DiffValue,
    pub spectral: Option<DiffValue>,
    pub adversarial: Option<DiffValue>,
}

/// Ground-truth Laplacian re-indexed onto predicted nodes through the
/// matching; unmatched predicted nodes get zero rows and columns.
pub fn aligned_laplacian(l_gt: &Matrix, pairs: &[(usize, usize)], n_pred: usize) -> Matrix {
    let mut out = Matrix::zeros(n_pred, n_pred);
    for &(i, a) in pairs {
        for &(j, b) in pairs {
            out[(i, j)] = l_gt[(a, b)];
        }
    }
    out
}

fn generator_adversarial(
    tape: &mut Tape,
    p: &Bound,
    pred: &DiffSkeleton,
    model: &Model,
    cfg: &TrainConfig,
    gt_graph: &SkeletonGraph,
    pairs: &[(usize, usize)],
) -> Result<DiffValue> {
    let gt = DiffSkeleton::constant(tape, gt_graph);
    let mut gen = adversarial_losses(tape, p, pred, &gt, pairs, &model.discriminator)?.generator;
    if cfg.topology_discriminator {
        let d = discriminate(tape, p, pred, &model.topology_discriminator)?;
        let c = tape.clamp(d, PROB_EPS, 1.0 - PROB_EPS);
        let l = tape.log(c)?;
        gen = tape.sub(gen, l)?;
    }
    Ok(gen)
}

/// `w_coord·L_pose + w_spectral·L_spectral + w_adv·L_gen`, each term gated
/// by its flag.
pub fn total_loss(
    tape: &mut Tape,
    p: &Bound,
    pred: &DiffSkeleton,
    target: &Target,
    cfg: &TrainConfig,
    model: &Model,
) -> Result<LossTerms> {
    let spectral_on = cfg.spectral_loss && cfg.w_spectral > 0.0;
    let adv_on = cfg.adversarial && cfg.w_adv > 0.0;
    if cfg.w_coord == 0.0 && !spectral_on && !adv_on {
        return Err(Error::Config("every active loss weight is zero; nothing to optimize".into()));
    }
    let n_pred = tape.shape(pred.joints).0;
    let pairs = match_nodes(tape.value(pred.joints), &target.graph.joints);
    let pose = pose_loss(tape, pred.joints, &target.graph.joints, &pairs)?;
    let mut total = tape.scale(pose, cfg.w_coord);
    let spectral = if spectral_on {
        let l_pred = laplacian(tape, pred.adjacency)?;
        let aligned = aligned_laplacian(&target.laplacian, &pairs, n_pred);
        let k = (cfg.spectral_k > 0).then_some(cfg.spectral_k.min(n_pred.max(target.spectrum.len())));
        let s = spectral_loss_aligned(tape, l_pred, &target.spectrum, Some(&aligned), k, cfg.alpha)?;
        let w = tape.scale(s, cfg.w_spectral);
        total = tape.add(total, w)?;
        Some(s)
    } else {
        None
    };
    let adversarial = if adv_on {
        let g = generator_adversarial(tape, p, pred, model, cfg, &target.graph, &pairs)?;
        let w = tape.scale(g, cfg.w_adv);
        total = tape.add(total, w)?;
        Some(g)
    } else {
        None
    };
    Ok(LossTerms {
        total,
        pose,
        spectral,
        adversarial,
    })
}

/// Discriminator objective on a detached prediction.
pub fn discriminator_loss(tape: &mut Tape, p: &Bound, pred: &SkeletonGraph, target: &Target, cfg: &TrainConfig, model: &Model) -> Result<DiffValue> {
    let ps = DiffSkeleton::constant(tape, pred);
    let gs = DiffSkeleton::constant(tape, &target.graph);
    let pairs = match_nodes(&pred.joints, &target.graph.joints);
    let mut loss = adversarial_losses(tape, p, &ps, &gs, &pairs, &model.discriminator)?.discriminator;
    if cfg.topology_discriminator {
        let second = adversarial_losses(tape, p, &ps, &gs, &pairs, &model.topology_discriminator)?.discriminator;
        loss = tape.add(loss, second)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, Perturb, Tolerance};
    use crate::synthdata::{make_record, Category};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            encoder_samples: vec![16, 4],
            encoder_radii: vec![0.3, 0.6],
            encoder_hidden: 8,
            global_dim: 8,
            decoder_hidden: vec![16],
            feature_dim: 4,
            n_max: 6,
            edge_hidden: vec![6],
            disc_hidden: vec![6],
            disc_k: 4,
            disc_bins: 4,
            ..TrainConfig::default()
        }
    }

    fn sample() -> (PointCloud, Target) {
        let r = make_record("s".into(), Category::Tree, 6, 48, 0.01, 5).unwrap();
        (r.cloud(), Target::new(r.graph().unwrap()).unwrap())
    }

    #[test]
    fn identical_prediction_with_neutral_discriminator() {
        let cfg = TrainConfig { alpha: 0.0, ..small_cfg() };
        let mut model = Model::new(&cfg).unwrap();
        model.discriminator.mlp.zero_last(&mut model.store);
        let (_, target) = sample();
        let mut t = Tape::new();
        let p = model.store.bind(&mut t);
        let pred = DiffSkeleton::constant(&mut t, &target.graph);
        let terms = total_loss(&mut t, &p, &pred, &target, &cfg, &model).unwrap();
        assert!((t.scalar(terms.total) - cfg.w_adv * 2f64.ln()).abs() < 1e-12);
        assert_eq!(t.scalar(terms.pose), 0.0);
        assert!(t.scalar(terms.spectral.unwrap()).abs() < 1e-20);
    }

    #[test]
    fn disabled_terms_build_nothing_and_weights_are_checked() {
        let (pc, target) = sample();
        let mut cfg = small_cfg();
        cfg.spectral_loss = false;
        cfg.adversarial = false;
        let model = Model::new(&cfg).unwrap();
        let n = model.node_count(&cfg, &pc).unwrap();
        let mut t = Tape::new();
        let p = model.store.bind(&mut t);
        let pred = model.forward(&mut t, &p, &cfg, &pc, n).unwrap();
        let before = t.len();
        let terms = total_loss(&mut t, &p, &pred, &target, &cfg, &model).unwrap();
        assert!(terms.spectral.is_none() && terms.adversarial.is_none());
        let pose_only = t.len() - before;

        let mut weighted = cfg.clone();
        weighted.w_spectral = 7.0;
        weighted.w_adv = 3.0;
        let mut t2 = Tape::new();
        let p2 = model.store.bind(&mut t2);
        let pred2 = model.forward(&mut t2, &p2, &weighted, &pc, n).unwrap();
        let before2 = t2.len();
        let terms2 = total_loss(&mut t2, &p2, &pred2, &target, &weighted, &model).unwrap();
        assert_eq!(t2.len() - before2, pose_only);
        assert_eq!(t.scalar(terms.total), t2.scalar(terms2.total));

        let zero = TrainConfig { w_coord: 0.0, ..cfg };
        assert!(matches!(total_loss(&mut t, &p, &pred, &target, &zero, &model), Err(Error::Config(_))));
    }

    #[test]
    fn identical_flags_give_identical_initial_weights() {
        let cfg = small_cfg();
        let a = Model::new(&cfg).unwrap();
        for (_, variant) in cfg.ablation_variants() {
            assert_eq!(Model::new(&variant).unwrap().store, a.store);
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let cfg = TrainConfig { topology_discriminator: true, ..small_cfg() };
        let model = Model::new(&cfg).unwrap();
        let (pc, target) = sample();
        let n = model.node_count(&cfg, &pc).unwrap();
        for id in [model.decoder.mlp.layers[1].bias, model.edge.mlp.layers[0].weight, model.refiner.levels[0].weight] {
            let report = check_gradients(&[model.store.get(id).clone()], &[Perturb::Entry], 1e-6, Tolerance::default(), |t, l| {
                let p = model.store.bind(t).with(id, l[0]);
                let pred = model.forward(t, &p, &cfg, &pc, n)?;
                Ok(total_loss(t, &p, &pred, &target, &cfg, &model)?.total)
            })
            .unwrap();
            assert!(report.passed(), "{}: {report:?}", model.store.name(id));
        }
    }
}
