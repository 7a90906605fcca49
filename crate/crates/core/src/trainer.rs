//! Joint pre-training loop: grouping distillation plus contrastive learning.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{make_view_pair, AugmentConfig, ViewPair};
use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::contrastive::{build_pairs, contrastive_loss, sample_points, PairInputs, PairStrategy};
use crate::error::{Error, Result};
use crate::grouping::{compute_assignments, extract_groups, grouping_loss, pool_segments, update_center};
use crate::networks::{ema_update, encode, BoundParams, EncoderInput, ModelState, NetworkConfig, ParamSet, PROTOTYPES};
use crate::pointcloud::ply::load_ply;
use crate::pointcloud::synthetic::{generate_dataset, SceneRecipe};
use crate::pointcloud::{estimate_normals, knn_graph, PointCloud};
use crate::rng::{derive_seed, seeded};
use crate::segment::{segment_overlap, SegmentConfig, SegmentMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingConfig {
    pub tau_s: f64,
    pub tau_t: f64,
    pub centering: bool,
    /// When false the teacher uses the student temperature.
    pub sharpening: bool,
    pub center_momentum: f64,
    pub informative_aware: bool,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            tau_s: 0.1,
            tau_t: 0.07,
            centering: true,
            sharpening: true,
            center_momentum: 0.9,
            informative_aware: true,
        }
    }
}

impl GroupingConfig {
    pub fn teacher_temperature(&self) -> f64 {
        if self.sharpening {
            self.tau_t
        } else {
            self.tau_s
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub strategy: PairStrategy,
    pub num_samples: usize,
    pub tau: f64,
    pub grid_size: f64,
    pub confidence_weights: bool,
    /// Average the loss over both view orders.
    pub symmetric: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            strategy: PairStrategy::SegmentGrouping,
            num_samples: 2048,
            tau: 0.4,
            grid_size: 1.0,
            confidence_weights: true,
            symmetric: false,
        }
    }
}

/// Where pre-training scenes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of `.ply` scenes; when unset, scenes are generated.
    pub dir: Option<PathBuf>,
    /// Scene recipe for generated data; the built-in room when unset.
    pub recipe: Option<PathBuf>,
    pub synthetic_scenes: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            recipe: None,
            synthetic_scenes: 64,
            synthetic_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lambda_group: f64,
    pub lambda_con: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Warmup length in epochs; when unset, 1% of all steps.
    pub warmup_epochs: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub segment: SegmentConfig,
    pub network: NetworkConfig,
    pub grouping: GroupingConfig,
    pub contrastive: ContrastiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lambda_group: 1.0,
            lambda_con: 1.0,
            lr: 0.1,
            weight_decay: 1e-4,
            sgd_momentum: 0.8,
            batch_size: 32,
            epochs: 1200,
            warmup_epochs: None,
            checkpoint_every: None,
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            segment: SegmentConfig::default(),
            network: NetworkConfig::default(),
            grouping: GroupingConfig::default(),
            contrastive: ContrastiveConfig::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check(self.lambda_group >= 0.0 && self.lambda_con >= 0.0, || {
            "loss weights must be non-negative".into()
        })?;
        check(self.lr >= 0.0 && self.lr.is_finite(), || {
            format!("lr {} invalid", self.lr)
        })?;
        check(self.weight_decay >= 0.0, || "weight_decay must be non-negative".into())?;
        check((0.0..1.0).contains(&self.sgd_momentum), || {
            format!("sgd_momentum {} outside [0, 1)", self.sgd_momentum)
        })?;
        check(self.batch_size > 0, || "batch_size must be positive".into())?;
        check(self.checkpoint_every != Some(0), || {
            "checkpoint_every must be positive".into()
        })?;
        let g = &self.grouping;
        check(g.tau_s > 0.0 && g.tau_t > 0.0, || {
            "temperatures must be positive".into()
        })?;
        check(!g.sharpening || g.tau_t < g.tau_s, || {
            format!("tau_t {} must be below tau_s {}", g.tau_t, g.tau_s)
        })?;
        check((0.0..1.0).contains(&g.center_momentum), || {
            format!("center_momentum {} outside [0, 1)", g.center_momentum)
        })?;
        let c = &self.contrastive;
        check(c.num_samples > 0, || "num_samples must be positive".into())?;
        check(c.tau > 0.0, || "contrastive tau must be positive".into())?;
        check(c.grid_size > 0.0, || "grid_size must be positive".into())?;
        self.augment.validate()?;
        self.network.validate()
    }
}

/// Linear warmup from 0, then cosine decay reaching 0 at the last step.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return base;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Step counts implied by a dataset size and the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub steps_per_epoch: usize,
    pub total: usize,
    pub warmup: usize,
}

impl Schedule {
    pub fn new(num_scenes: usize, cfg: &TrainConfig) -> Self {
        let steps_per_epoch = num_scenes.div_ceil(cfg.batch_size);
        let total = steps_per_epoch * cfg.epochs;
        let warmup = match cfg.warmup_epochs {
            Some(e) => e * steps_per_epoch,
            None => (total as f64 * 0.01).round() as usize,
        };
        Schedule {
            steps_per_epoch,
            total,
            warmup: warmup.min(total),
        }
    }
}

/// SGD with momentum and decoupled-from-prototypes weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: ParamSet,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        let mut buffers = ParamSet::new();
        for (k, v) in params.iter() {
            buffers.insert(k.clone(), Tensor::zeros(v.shape()));
        }
        Sgd {
            momentum,
            weight_decay,
            buffers,
        }
    }

    /// `d = grad + wd·p`, `buf = μ·buf + d`, `p -= lr·buf`. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamSet, grads: &dyn Fn(&str) -> Option<Vec<f64>>, lr: f64) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let buf = self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("no momentum buffer for '{}'", name)))?;
            let wd = if name == PROTOTYPES { 0.0 } else { self.weight_decay };
            let grad = grads(name);
            for (i, (pv, bv)) in p.data_mut().iter_mut().zip(buf.data_mut()).enumerate() {
                let gv = grad.as_ref().map_or(0.0, |g| g[i]);
                *bv = self.momentum * *bv + gv + wd * *pv;
                *pv -= lr * *bv;
            }
        }
        Ok(())
    }
}

/// One augmented pair with the segmentation of its overlap.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub scene: String,
    pub pair: ViewPair,
    pub segments: SegmentMap,
}

pub fn prepare_pair(scene: &str, cloud: &PointCloud, seed: u64, cfg: &TrainConfig) -> Result<PreparedPair> {
    let pair = make_view_pair(cloud, seed, &cfg.augment, scene)?;
    let segments = segment_overlap(&pair.view_q, &pair.overlap_ids(), &cfg.segment)?;
    Ok(PreparedPair {
        scene: scene.to_string(),
        pair,
        segments,
    })
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_group: f64,
    pub loss_con: f64,
    pub loss_overall: f64,
    /// Mean teacher confidence of grouped positive pairs.
    pub mean_confidence: f64,
    pub positive_pairs: usize,
    /// Scenes whose pair set came out empty.
    pub empty_pair_scenes: usize,
    /// Points per prototype label across the batch overlaps.
    pub usage: Vec<usize>,
}

pub const CSV_HEADER: &str =
    "step,epoch,lr,loss_group,loss_con,loss_overall,mean_confidence,positive_pairs,empty_pair_scenes,usage";

impl StepRecord {
    pub fn to_csv(&self) -> String {
        let usage: Vec<String> = self.usage.iter().map(|u| u.to_string()).collect();
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.loss_group,
            self.loss_con,
            self.loss_overall,
            self.mean_confidence,
            self.positive_pairs,
            self.empty_pair_scenes,
            usage.join(";")
        )
    }
}

struct SceneOutcome {
    loss: Var,
    group: f64,
    con: f64,
    confidence_sum: f64,
    pairs: usize,
    empty: bool,
    teacher_logits: Tensor,
}

struct Direction<'a> {
    pair: &'a ViewPair,
    segments: &'a SegmentMap,
}

fn teacher_pass(state: &ModelState, cloud: &PointCloud, segments: &SegmentMap) -> Result<(Tensor, Tensor)> {
    let input = EncoderInput::from_cloud(cloud, &state.config.encoder)?;
    let mut g = Graph::new();
    let bound = state.teacher.bind(&mut g, false);
    let out = encode(&mut g, &bound, &input, &state.config, false)?;
    let z = pool_segments(&mut g, out.group, &cloud.ids, segments)?;
    Ok((g.value(z).clone(), g.value(out.contrast).clone()))
}

fn normalize_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        let row = t.row(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-12 {
            data.extend(std::iter::repeat_n(0.0, c));
        } else {
            data.extend(row.iter().map(|v| v / n));
        }
    }
    Tensor::matrix(rows.len(), c, data)
}

#[allow(clippy::too_many_arguments)]
fn scene_direction(
    g: &mut Graph,
    student: &BoundParams,
    state: &ModelState,
    dir: &Direction,
    cfg: &TrainConfig,
    sample_seed: u64,
    usage: &mut [usize],
) -> Result<SceneOutcome> {
    let net = &state.config;
    let gc = &cfg.grouping;
    let input_q = EncoderInput::from_cloud(&dir.pair.view_q, &net.encoder)?;
    let enc = encode(g, student, &input_q, net, net.predictor)?;
    let z_q = pool_segments(g, enc.group, &dir.pair.view_q.ids, dir.segments)?;
    let (z_k, contrast_k) = teacher_pass(state, &dir.pair.view_k, dir.segments)?;
    let center: Vec<f64> = if gc.centering {
        state.center.clone()
    } else {
        vec![0.0; net.num_prototypes]
    };
    let scores = compute_assignments(
        g,
        z_q,
        student.var(PROTOTYPES)?,
        &z_k,
        state.teacher.get(PROTOTYPES)?,
        &center,
        gc.tau_s,
        gc.teacher_temperature(),
        gc.sharpening,
    )?;
    let lg = grouping_loss(g, &scores, gc.informative_aware)?;
    let groups = extract_groups(&scores.k, dir.segments)?;
    for &label in groups.point_labels.values() {
        usage[label] += 1;
    }

    let cc = &cfg.contrastive;
    let joint = cc.strategy == PairStrategy::MatchedPoints;
    let samples = sample_points(dir.pair, cc.num_samples, sample_seed, joint)?;
    let inputs = PairInputs {
        segments: Some(dir.segments),
        grouping: Some(&groups),
        teacher_scores: Some(&scores.k),
        grid_size: Some(cc.grid_size),
        confidence_weights: true,
    };
    let mut pairs = build_pairs(cc.strategy, dir.pair, &samples, &inputs)?;
    let confidence_sum = if cc.strategy == PairStrategy::SegmentGrouping {
        pairs.confidence.iter().sum()
    } else {
        0.0
    };
    if !cc.confidence_weights {
        pairs.confidence.iter_mut().for_each(|c| *c = 1.0);
    }
    let picked = g.gather_rows(enc.contrast, &samples.q)?;
    let v_q = g.l2_normalize_rows(picked)?;
    let v_k = normalize_rows(&contrast_k, &samples.k)?;
    let lc = contrastive_loss(g, v_q, &v_k, &pairs, cc.tau)?;

    let weighted_g = g.scalar_mul(lg.loss, cfg.lambda_group)?;
    let (loss, con) = match lc {
        Some(lc) => {
            let weighted_c = g.scalar_mul(lc, cfg.lambda_con)?;
            (g.add(weighted_g, weighted_c)?, g.value(lc).item())
        }
        None => (weighted_g, 0.0),
    };
    Ok(SceneOutcome {
        loss,
        group: g.value(lg.loss).item(),
        con,
        confidence_sum,
        pairs: pairs.len(),
        empty: pairs.is_empty(),
        teacher_logits: scores.teacher_logits,
    })
}

/// Mutable training state: model, optimizer and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelState,
    pub optimizer: Sgd,
    pub step: usize,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let model = ModelState::init(&cfg.network, derive_seed(cfg.seed, &[SEED_INIT]))?;
        let optimizer = Sgd::new(&model.student, cfg.sgd_momentum, cfg.weight_decay);
        Ok(TrainState {
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            config_text: cfg.to_toml(),
            step: self.step as u64,
            state: self.model.clone(),
            momentum: self.optimizer.buffers.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, cfg: &TrainConfig) -> Self {
        TrainState {
            optimizer: Sgd {
                momentum: cfg.sgd_momentum,
                weight_decay: cfg.weight_decay,
                buffers: ck.momentum,
            },
            model: ck.state,
            step: ck.step as usize,
        }
    }
}

const SEED_INIT: u64 = 1;
const SEED_SHUFFLE: u64 = 2;
const SEED_VIEWS: u64 = 3;
const SEED_SAMPLES: u64 = 4;

/// Forward, backward, SGD, EMA, center update, in that order.
pub fn train_step(
    state: &mut TrainState,
    batch: &[PreparedPair],
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let mut g = Graph::new();
    let student = state.model.student.bind(&mut g, true);
    let mut usage = vec![0; state.model.config.num_prototypes];
    let mut losses = Vec::new();
    let (mut group, mut con, mut conf_sum) = (0.0, 0.0, 0.0);
    let (mut pairs, mut empty) = (0, 0);
    let mut logits_rows: Vec<f64> = Vec::new();
    let mut logit_count = 0;
    for (b, item) in batch.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &[SEED_SAMPLES, state.step as u64, b as u64]);
        let swapped;
        let mut dirs = vec![Direction {
            pair: &item.pair,
            segments: &item.segments,
        }];
        if cfg.contrastive.symmetric {
            swapped = item.pair.swapped();
            dirs.push(Direction {
                pair: &swapped,
                segments: &item.segments,
            });
        }
        let mut scene_losses = Vec::new();
        for (d, dir) in dirs.iter().enumerate() {
            let out = scene_direction(
                &mut g,
                &student,
                &state.model,
                dir,
                cfg,
                derive_seed(seed, &[d as u64]),
                &mut usage,
            )
            .map_err(|e| match e {
                Error::Numeric { .. } => Error::NonFiniteLoss {
                    scene: item.scene.clone(),
                    group: f64::NAN,
                    con: f64::NAN,
                },
                other => other,
            })?;
            if !out.group.is_finite() || !out.con.is_finite() {
                return Err(Error::NonFiniteLoss {
                    scene: item.scene.clone(),
                    group: out.group,
                    con: out.con,
                });
            }
            let scale = 1.0 / dirs.len() as f64;
            group += out.group * scale;
            con += out.con * scale;
            conf_sum += out.confidence_sum;
            pairs += out.pairs;
            empty += out.empty as usize;
            logits_rows.extend_from_slice(out.teacher_logits.data());
            logit_count += out.teacher_logits.rows();
            scene_losses.push(out.loss);
        }
        let mut scene = scene_losses[0];
        for &l in &scene_losses[1..] {
            scene = g.add(scene, l)?;
        }
        if scene_losses.len() > 1 {
            scene = g.scalar_mul(scene, 1.0 / scene_losses.len() as f64)?;
        }
        losses.push(scene);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let n = batch.len() as f64;
    let total = g.scalar_mul(total, 1.0 / n)?;
    let overall = g.value(total).item();
    g.backward(total)?;

    let grads = |name: &str| -> Option<Vec<f64>> {
        let v = student.var(name).ok()?;
        g.grad(v).map(|s| s.to_vec())
    };
    state.optimizer.step(&mut state.model.student, &grads, lr)?;
    let momentum = state.model.config.ema_momentum;
    ema_update(&mut state.model, momentum)?;
    if cfg.grouping.centering {
        let logits = Tensor::matrix(logit_count, state.model.config.num_prototypes, logits_rows)?;
        state.model.center = update_center(&state.model.center, &logits, cfg.grouping.center_momentum)?;
    }
    let record = StepRecord {
        step: state.step,
        epoch,
        lr,
        loss_group: group / n,
        loss_con: con / n,
        loss_overall: overall,
        mean_confidence: if pairs > 0 { conf_sum / pairs as f64 } else { 0.0 },
        positive_pairs: pairs,
        empty_pair_scenes: empty,
        usage,
    };
    state.step += 1;
    Ok(record)
}

/// A named scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub cloud: PointCloud,
}

/// Fills in normals from a kNN fit when the cloud has none.
pub fn ensure_normals(cloud: PointCloud, k: usize) -> Result<PointCloud> {
    if cloud.normals.is_some() {
        return Ok(cloud);
    }
    let graph = knn_graph(&cloud, k.max(3))?;
    Ok(estimate_normals(&cloud, &graph)?.cloud)
}

/// Sorted `.ply` files of a directory.
pub fn ply_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every `.ply` in `dir` as a scene named after its file stem,
/// estimating normals where missing.
pub fn load_scene_dir(dir: &Path, normal_k: usize) -> Result<Vec<Scene>> {
    let files = ply_files(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyInput(format!("no .ply files in {}", dir.display())));
    }
    files
        .iter()
        .map(|path| {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(Scene {
                name,
                cloud: ensure_normals(load_ply(path)?, normal_k)?,
            })
        })
        .collect()
}

/// Scenes named by `data`: a PLY directory or generated synthetic scenes.
/// Relative paths resolve against `base`.
pub fn load_scenes(data: &DataConfig, base: Option<&Path>) -> Result<Vec<Scene>> {
    let resolve = |p: &Path| match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    };
    if let Some(dir) = &data.dir {
        return load_scene_dir(&resolve(dir), SegmentConfig::default().k);
    }
    let recipe = match &data.recipe {
        Some(p) => SceneRecipe::load(resolve(p))?,
        None => SceneRecipe::default_room(),
    };
    let clouds = generate_dataset(&recipe, data.synthetic_scenes, data.synthetic_seed)?;
    Ok(clouds
        .into_iter()
        .enumerate()
        .map(|(i, cloud)| Scene {
            name: format!("scene_{:03}", i),
            cloud,
        })
        .collect())
}

/// Final state and per-step records of a run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub state: TrainState,
    pub checkpoint: Option<PathBuf>,
    /// Human-readable warnings, e.g. scenes without positive pairs.
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}", r.to_csv());
        }
        out
    }
}

/// Runs `epochs × ⌈scenes / batch⌉` steps. With `out`, streams `report.csv` and
/// writes `checkpoint_init.bin`, periodic `checkpoint_epoch<E>.bin` and `checkpoint_final.bin`.
pub fn run_pretraining(scenes: &[Scene], cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::EmptyInput("no training scenes".into()));
    }
    let schedule = Schedule::new(scenes.len(), cfg);
    let mut state = TrainState::init(cfg)?;
    let mut csv = None;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        state.checkpoint(cfg).save(dir.join("checkpoint_init.bin"))?;
        let path = dir.join("report.csv");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "{}", CSV_HEADER).map_err(|e| Error::io(&path, e))?;
        csv = Some((w, path));
    }
    let mut records = Vec::with_capacity(schedule.total);
    let mut warnings = Vec::new();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seeded(derive_seed(cfg.seed, &[SEED_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let seed = derive_seed(cfg.seed, &[SEED_VIEWS, state.step as u64, i as u64]);
                    prepare_pair(&scenes[i].name, &scenes[i].cloud, seed, cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = lr_at(state.step, schedule.total, schedule.warmup, cfg.lr);
            let rec = train_step(&mut state, &batch, cfg, lr, epoch)?;
            if rec.empty_pair_scenes > 0 {
                warnings.push(format!(
                    "step {}: {} scene(s) without positive pairs",
                    rec.step, rec.empty_pair_scenes
                ));
            }
            if let Some((w, path)) = csv.as_mut() {
                writeln!(w, "{}", rec.to_csv()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            records.push(rec);
        }
        if let (Some(dir), Some(every)) = (out, cfg.checkpoint_every) {
            if (epoch + 1) % every == 0 {
                state
                    .checkpoint(cfg)
                    .save(dir.join(format!("checkpoint_epoch{}.bin", epoch + 1)))?;
            }
        }
    }
    let mut checkpoint = None;
    if let Some(dir) = out {
        if let Some((mut w, path)) = csv.take() {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("checkpoint_final.bin");
        state.checkpoint(cfg).save(&path)?;
        checkpoint = Some(path);
    }
    Ok(TrainReport {
        records,
        state,
        checkpoint,
        warnings,
    })
}
