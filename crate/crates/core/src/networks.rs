//! Student/teacher point networks.
//!
//! The trunk is a per-point MLP whose blocks mix each point's activation with
//! the mean activation of its k nearest neighbors. Two projector heads sit on
//! the trunk: `g` (grouping features) and `h` (contrastive features). The
//! student additionally owns a predictor `h'` applied after `h`, and both
//! networks own an `n × D` prototype matrix. The teacher is an EMA copy of the
//! student without the predictor.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::pointcloud::{knn::knn_from_coords, PointCloud};
use crate::rng::{derive_seed, seeded};

/// Number of per-point input channels: centered xyz, rgb, normal.
pub const INPUT_DIM: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    /// Colors as stored, in [0, 1].
    Unit,
    /// Colors shifted to [-0.5, 0.5].
    Centered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub k: usize,
    pub color_mode: ColorMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: vec![32, 64],
            feature_dim: 32,
            k: 8,
            color_mode: ColorMode::Unit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub num_prototypes: usize,
    /// Hidden width of projectors and predictor; defaults to the feature dimension.
    pub head_hidden: Option<usize>,
    pub predictor: bool,
    pub ema_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            encoder: EncoderConfig::default(),
            num_prototypes: 32,
            head_hidden: None,
            predictor: true,
            ema_momentum: 0.996,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be at least 2".into()));
        }
        if e.widths.is_empty() || e.widths.contains(&0) {
            return Err(Error::Config("encoder widths must be non-empty and positive".into()));
        }
        if e.k == 0 {
            return Err(Error::Config("encoder k must be at least 1".into()));
        }
        if self.num_prototypes < 2 {
            return Err(Error::Config("num_prototypes must be at least 2".into()));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "ema_momentum {} outside [0, 1]",
                self.ema_momentum
            )));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.encoder.feature_dim)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

pub const PROTOTYPES: &str = "prototypes";
const PREDICTOR_PREFIX: &str = "pred.";

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{}'", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
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

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn has_predictor(&self) -> bool {
        self.params.keys().any(|k| k.starts_with(PREDICTOR_PREFIX))
    }

    /// Copy without predictor parameters.
    pub fn without_predictor(&self) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| !k.starts_with(PREDICTOR_PREFIX))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds every parameter to `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), graph.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter '{}'", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn he_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let normal = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("valid sigma");
    let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches")
}

/// `n × dim` rows drawn i.i.d. standard normal, then unit-normalized.
pub fn init_prototypes(n: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if n < 2 || dim < 2 {
        return Err(Error::Config(format!(
            "prototypes need n >= 2 and D >= 2, got {}x{}",
            n, dim
        )));
    }
    let mut rng = seeded(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let row: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let len = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / len));
    }
    Tensor::matrix(n, dim, data)
}

fn add_mlp_head(params: &mut ParamSet, prefix: &str, d: usize, hidden: usize, seed: u64) {
    params.insert(format!("{}w1", prefix), he_matrix(d, hidden, derive_seed(seed, &[1])));
    params.insert(format!("{}b1", prefix), Tensor::zeros(&[1, hidden]));
    params.insert(format!("{}w2", prefix), he_matrix(hidden, d, derive_seed(seed, &[2])));
    params.insert(format!("{}b2", prefix), Tensor::zeros(&[1, d]));
}

/// Fresh student parameters (including predictor when enabled).
pub fn init_student(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let e = &cfg.encoder;
    let d = e.feature_dim;
    let mut p = ParamSet::new();
    let mut fan_in = INPUT_DIM;
    for (i, &w) in e.widths.iter().enumerate() {
        p.insert(
            format!("enc.{}.w_self", i),
            he_matrix(fan_in, w, derive_seed(seed, &[10, i as u64, 0])),
        );
        if i > 0 {
            p.insert(
                format!("enc.{}.w_nbr", i),
                he_matrix(fan_in, w, derive_seed(seed, &[10, i as u64, 1])),
            );
        }
        p.insert(format!("enc.{}.b", i), Tensor::zeros(&[1, w]));
        fan_in = w;
    }
    p.insert("enc.out.w_self", he_matrix(fan_in, d, derive_seed(seed, &[11, 0])));
    p.insert("enc.out.w_nbr", he_matrix(fan_in, d, derive_seed(seed, &[11, 1])));
    p.insert("enc.out.b", Tensor::zeros(&[1, d]));
    add_mlp_head(&mut p, "proj_g.", d, cfg.hidden(), derive_seed(seed, &[20]));
    add_mlp_head(&mut p, "proj_h.", d, cfg.hidden(), derive_seed(seed, &[21]));
    if cfg.predictor {
        add_mlp_head(&mut p, PREDICTOR_PREFIX, d, cfg.hidden(), derive_seed(seed, &[22]));
    }
    p.insert(
        PROTOTYPES,
        init_prototypes(cfg.num_prototypes, d, derive_seed(seed, &[30]))?,
    );
    Ok(p)
}

/// Per-point network input: features plus flattened neighbor lists.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    pub features: Tensor,
    /// `num_points * per_point` neighbor indices, point-major.
    pub neighbors: Vec<usize>,
    pub per_point: usize,
}

impl EncoderInput {
    pub fn from_cloud(cloud: &PointCloud, cfg: &EncoderConfig) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyInput("cannot encode an empty cloud".into()));
        }
        let m = cloud.len();
        let c = cloud.centroid();
        let shift = match cfg.color_mode {
            ColorMode::Unit => 0.0,
            ColorMode::Centered => 0.5,
        };
        let mut data = Vec::with_capacity(m * INPUT_DIM);
        for i in 0..m {
            let p = cloud.coords[i];
            data.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            data.extend(cloud.colors[i].iter().map(|v| v - shift));
            match &cloud.normals {
                Some(n) => data.extend_from_slice(&n[i]),
                None => data.extend_from_slice(&[0.0; 3]),
            }
        }
        let features = Tensor::matrix(m, INPUT_DIM, data)?;
        let (neighbors, per_point) = if m == 1 {
            (vec![0], 1)
        } else {
            let g = knn_from_coords(&cloud.coords, cfg.k)?;
            let kk = g.neighbors(0).len();
            (g.edges.iter().map(|e| e.1).collect(), kk)
        };
        Ok(EncoderInput {
            features,
            neighbors,
            per_point,
        })
    }

    pub fn num_points(&self) -> usize {
        self.features.rows()
    }
}

/// Graph outputs of one network pass.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Trunk features, M×D.
    pub trunk: Var,
    /// Grouping projector output, M×D.
    pub group: Var,
    /// Contrastive output: `h` for the teacher, `h'(h)` for a student with predictor.
    pub contrast: Var,
}

fn neighbor_mean(g: &mut Graph, x: Var, input: &EncoderInput) -> Result<Var> {
    g.gather_mean(x, &input.neighbors, input.per_point)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn mlp_head(g: &mut Graph, x: Var, p: &BoundParams, prefix: &str) -> Result<Var> {
    let h = linear(g, x, p.var(&format!("{}w1", prefix))?, p.var(&format!("{}b1", prefix))?)?;
    let h = g.relu(h)?;
    linear(g, h, p.var(&format!("{}w2", prefix))?, p.var(&format!("{}b2", prefix))?)
}

/// Trunk only.
pub fn encode_trunk(g: &mut Graph, p: &BoundParams, input: &EncoderInput, layers: usize) -> Result<Var> {
    let x = g.constant(input.features.clone());
    let mut h = linear(g, x, p.var("enc.0.w_self")?, p.var("enc.0.b")?)?;
    h = g.relu(h)?;
    for i in 1..layers {
        let a = neighbor_mean(g, h, input)?;
        let s = g.matmul(h, p.var(&format!("enc.{}.w_self", i))?)?;
        let n = g.matmul(a, p.var(&format!("enc.{}.w_nbr", i))?)?;
        let sum = g.add(s, n)?;
        h = g.add_row(sum, p.var(&format!("enc.{}.b", i))?)?;
        h = g.relu(h)?;
    }
    let a = neighbor_mean(g, h, input)?;
    let s = g.matmul(h, p.var("enc.out.w_self")?)?;
    let n = g.matmul(a, p.var("enc.out.w_nbr")?)?;
    let sum = g.add(s, n)?;
    g.add_row(sum, p.var("enc.out.b")?)
}

/// Full pass: trunk, `g` head, `h` head and (if `use_predictor`) `h'`.
pub fn encode(
    g: &mut Graph,
    p: &BoundParams,
    input: &EncoderInput,
    cfg: &NetworkConfig,
    use_predictor: bool,
) -> Result<Encoded> {
    let trunk = encode_trunk(g, p, input, cfg.encoder.widths.len())?;
    let group = mlp_head(g, trunk, p, "proj_g.")?;
    let mut contrast = mlp_head(g, trunk, p, "proj_h.")?;
    if use_predictor {
        contrast = mlp_head(g, contrast, p, PREDICTOR_PREFIX)?;
    }
    Ok(Encoded { trunk, group, contrast })
}

/// Plain values of one network pass, without gradient bookkeeping.
#[derive(Debug, Clone)]
pub struct Features {
    pub trunk: Tensor,
    pub group: Tensor,
    pub contrast: Tensor,
}

pub fn evaluate(params: &ParamSet, cloud: &PointCloud, cfg: &NetworkConfig) -> Result<Features> {
    let input = EncoderInput::from_cloud(cloud, &cfg.encoder)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let out = encode(&mut g, &bound, &input, cfg, params.has_predictor())?;
    Ok(Features {
        trunk: g.value(out.trunk).clone(),
        group: g.value(out.group).clone(),
        contrast: g.value(out.contrast).clone(),
    })
}

/// Student, teacher and the centering vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: NetworkConfig,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub center: Vec<f64>,
}

impl ModelState {
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        let student = init_student(cfg, seed)?;
        let teacher = student.without_predictor();
        Ok(ModelState {
            config: cfg.clone(),
            center: vec![0.0; cfg.num_prototypes],
            student,
            teacher,
        })
    }
}

/// `teacher ← m · teacher + (1 - m) · student` for every shared parameter.
pub fn ema_update(state: &mut ModelState, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("EMA momentum {} outside [0, 1]", momentum)));
    }
    for (name, t) in state.teacher.iter_mut() {
        let s = state.student.get(name)?;
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
    Ok(())
}
