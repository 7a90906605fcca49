//! A small fixed problem for finite-difference checks of the student losses.

use std::collections::BTreeMap;

use protogroup::augment::ViewPair;
use protogroup::autodiff::{Graph, Tensor};
use protogroup::contrastive::{build_pairs, contrastive_loss, PairInputs, PairStrategy, Samples};
use protogroup::grouping::{
    compute_assignments, extract_groups, grouping_loss, pool_segments, teacher_assignments, teacher_logits,
};
use protogroup::networks::{encode, evaluate, EncoderInput, ModelState, NetworkConfig, ParamSet, PROTOTYPES};
use protogroup::segment::SegmentMap;
use rand::Rng;

pub struct GradProblem {
    pub cfg: NetworkConfig,
    pub student: ParamSet,
    pub pair: ViewPair,
    pub segments: SegmentMap,
    pub z_k: Tensor,
    pub teacher_prototypes: Tensor,
    pub center: Vec<f64>,
    pub samples: Samples,
    pub contrast_k: Tensor,
    pub tau_s: f64,
    pub tau_t: f64,
}

/// `P` segments over 30 points, `n` prototypes, feature dim `d`, `samples` contrastive samples.
pub fn problem(p: usize, n: usize, d: usize, samples: usize, seed: u64) -> GradProblem {
    let cfg = super::tiny_network(d, n);
    let mut state = ModelState::init(&cfg, seed).unwrap();
    let mut r = super::rng(seed + 100);
    // generic point: zero-initialized biases leave some features exactly at
    // the origin, where unit normalization is not differentiable
    for (_, t) in state.student.iter_mut().chain(state.teacher.iter_mut()) {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.2 * r.random_range(-1.0..1.0));
    }
    let view_q = super::random_cloud(30, seed + 1);
    let mut view_k = view_q.clone();
    for c in view_k.coords.iter_mut() {
        c.iter_mut().for_each(|v| *v += 0.02 * r.random_range(-1.0..1.0));
    }
    for c in view_k.colors.iter_mut() {
        c.iter_mut()
            .for_each(|v| *v = (*v + 0.1 * r.random_range(-1.0..1.0)).clamp(0.0, 1.0));
    }
    let raw: Vec<usize> = (0..30).map(|i| i % p).collect();
    let segments = SegmentMap::from_labels(&view_q.ids, &raw);
    let tf = evaluate(&state.teacher, &view_k, &cfg).unwrap();
    let mut g = Graph::new();
    let gk = g.constant(tf.group.clone());
    let zk = pool_segments(&mut g, gk, &view_k.ids, &segments).unwrap();
    let samples = Samples {
        q: (0..samples).map(|_| r.random_range(0..30)).collect(),
        k: (0..samples).map(|_| r.random_range(0..30)).collect(),
        with_replacement: true,
    };
    let contrast_k = {
        let rows: Vec<Vec<f64>> = samples.k.iter().map(|&i| tf.contrast.row(i).to_vec()).collect();
        Tensor::from_rows(&super::unit_rows(&rows)).unwrap()
    };
    GradProblem {
        center: (0..n).map(|_| 0.1 * r.random_range(-1.0..1.0)).collect(),
        teacher_prototypes: state.teacher.get(PROTOTYPES).unwrap().clone(),
        z_k: g.value(zk).clone(),
        pair: ViewPair::from_views(view_q, view_k),
        student: state.student,
        cfg,
        segments,
        samples,
        contrast_k,
        tau_s: 0.1,
        tau_t: 0.07,
    }
}

pub enum Loss {
    Group { informative: bool },
    Con,
}

impl GradProblem {
    pub fn teacher_k(&self) -> Tensor {
        let logits = teacher_logits(&self.z_k, &self.teacher_prototypes).unwrap();
        teacher_assignments(&logits, &self.center, self.tau_t).unwrap()
    }

    /// Loss value and, when requested, analytic gradients for every student parameter.
    pub fn eval(&self, params: &ParamSet, loss: &Loss, grads: bool) -> (f64, BTreeMap<String, Vec<f64>>) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let input = EncoderInput::from_cloud(&self.pair.view_q, &self.cfg.encoder).unwrap();
        let enc = encode(&mut g, &bound, &input, &self.cfg, true).unwrap();
        let out = match loss {
            Loss::Group { informative } => {
                let zq = pool_segments(&mut g, enc.group, &self.pair.view_q.ids, &self.segments).unwrap();
                let scores = compute_assignments(
                    &mut g,
                    zq,
                    bound.var(PROTOTYPES).unwrap(),
                    &self.z_k,
                    &self.teacher_prototypes,
                    &self.center,
                    self.tau_s,
                    self.tau_t,
                    true,
                )
                .unwrap();
                grouping_loss(&mut g, &scores, *informative).unwrap().loss
            }
            Loss::Con => {
                let k = self.teacher_k();
                let groups = extract_groups(&k, &self.segments).unwrap();
                let inputs = PairInputs {
                    segments: Some(&self.segments),
                    grouping: Some(&groups),
                    teacher_scores: Some(&k),
                    grid_size: None,
                    confidence_weights: true,
                };
                let pairs = build_pairs(PairStrategy::SegmentGrouping, &self.pair, &self.samples, &inputs).unwrap();
                assert!(!pairs.is_empty());
                let picked = g.gather_rows(enc.contrast, &self.samples.q).unwrap();
                let vq = g.l2_normalize_rows(picked).unwrap();
                contrastive_loss(&mut g, vq, &self.contrast_k, &pairs, 0.4)
                    .unwrap()
                    .unwrap()
            }
        };
        let value = g.value(out).item();
        let mut map = BTreeMap::new();
        if grads {
            g.backward(out).unwrap();
            for (name, t) in params.iter() {
                let v = bound.var(name).unwrap();
                let grad = g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
                map.insert(name.clone(), grad);
            }
        }
        (value, map)
    }

    /// Worst relative error of analytic vs central-difference gradients.
    pub fn check(&self, loss: &Loss) -> (f64, String) {
        let (_, analytic) = self.eval(&self.student, loss, true);
        let f = |p: &ParamSet| self.eval(p, loss, false).0;
        super::worst_relative_error(&self.student, &analytic, &f, 1e-4, 1e-6)
    }
}
