//! Editing metrics, the one-step and sequential harnesses, ablations and
//! the embedding-overlap statistic.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envgen::{generate_triplets, generate_world, EditTriplet, World, WorldSpec};
use crate::error::{Error, Result};
use crate::irm_tv::{train_edit, LambdaMode, TrainConfig, TrainOutcome};
use crate::model::{init_model, EditDelta, ModelDims, PromptVec, ToyModel};
use crate::risks::{EditBatch, KernelSpec, RiskReport, RiskWeights, DEFAULT_BANDWIDTH_MULTIPLIERS};

/// Exact-match fractions at ω = 0. A metric over an empty split is `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rel: Option<f64>,
    pub gen: Option<f64>,
    /// Share of neighbour prompts answered with the edit target.
    pub gen_target: Option<f64>,
    pub t_loc: Option<f64>,
    pub m_loc: Option<f64>,
    pub n_rel: usize,
    pub n_gen: usize,
    pub n_t_loc: usize,
    pub n_m_loc: usize,
    pub seed: u64,
    pub config_hash: String,
    pub t: usize,
}

/// Raw match counts; adding counts and dividing once keeps every fraction
/// equal to matches / n.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub rel: (usize, usize),
    pub gen: (usize, usize),
    pub gen_target: (usize, usize),
    pub t_loc: (usize, usize),
    pub m_loc: (usize, usize),
}

impl MatchCounts {
    pub fn merge(self, o: MatchCounts) -> MatchCounts {
        let add = |a: (usize, usize), b: (usize, usize)| (a.0 + b.0, a.1 + b.1);
        MatchCounts {
            rel: add(self.rel, o.rel),
            gen: add(self.gen, o.gen),
            gen_target: add(self.gen_target, o.gen_target),
            t_loc: add(self.t_loc, o.t_loc),
            m_loc: add(self.m_loc, o.m_loc),
        }
    }

    pub fn report(&self) -> MetricsReport {
        let frac = |(k, n): (usize, usize)| (n > 0).then(|| k as f64 / n as f64);
        MetricsReport {
            rel: frac(self.rel),
            gen: frac(self.gen),
            gen_target: frac(self.gen_target),
            t_loc: frac(self.t_loc),
            m_loc: frac(self.m_loc),
            n_rel: self.rel.1,
            n_gen: self.gen.1,
            n_t_loc: self.t_loc.1,
            n_m_loc: self.m_loc.1,
            ..MetricsReport::default()
        }
    }
}

fn predictions(model: &ToyModel, delta: &EditDelta, prompts: &[PromptVec]) -> Result<Vec<usize>> {
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&PromptVec> = prompts.iter().collect();
    model.predict_batch(delta, &refs)
}

/// Match counts of `delta` on `triplets`.
pub fn count_matches(model: &ToyModel, delta: &EditDelta, triplets: &[EditTriplet]) -> Result<MatchCounts> {
    let base = EditDelta::zeros(model, &[]);
    let edit: Vec<PromptVec> = triplets.iter().map(|t| t.edit_prompt()).collect();
    let neigh: Vec<PromptVec> = triplets.iter().flat_map(|t| t.neighbour_prompts()).collect();
    let loc: Vec<PromptVec> = triplets.iter().map(|t| t.loc_prompt()).collect();
    let m_loc: Vec<PromptVec> = triplets.iter().map(|t| t.m_loc_prompt()).collect();

    let p_edit = predictions(model, delta, &edit)?;
    let p_neigh = predictions(model, delta, &neigh)?;
    let (p_loc, b_loc) = (predictions(model, delta, &loc)?, predictions(model, &base, &loc)?);
    let (p_mloc, b_mloc) = (predictions(model, delta, &m_loc)?, predictions(model, &base, &m_loc)?);

    let hits = |it: &mut dyn Iterator<Item = bool>| {
        let (mut k, mut n) = (0, 0);
        for b in it {
            k += b as usize;
            n += 1;
        }
        (k, n)
    };
    let per = neigh.len() / triplets.len().max(1);
    Ok(MatchCounts {
        rel: hits(&mut edit.iter().zip(&p_edit).map(|(p, y)| p.y == *y)),
        gen: hits(&mut p_neigh.iter().enumerate().map(|(i, y)| *y == p_edit[i / per])),
        gen_target: hits(&mut neigh.iter().zip(&p_neigh).map(|(p, y)| p.y == *y)),
        t_loc: hits(&mut p_loc.iter().zip(&b_loc).map(|(a, b)| a == b)),
        m_loc: hits(&mut p_mloc.iter().zip(&b_mloc).map(|(a, b)| a == b)),
    })
}

/// Rel, Gen, T-Loc and M-Loc of `delta` on `triplets`.
pub fn compute_metrics(model: &ToyModel, delta: &EditDelta, triplets: &[EditTriplet]) -> Result<MetricsReport> {
    Ok(count_matches(model, delta, triplets)?.report())
}

/// The training batch for a set of triplets: edit prompts, both neighbour
/// prompts of each, and both out-of-scope prompts of each.
pub fn edit_batch(model: &ToyModel, triplets: &[EditTriplet]) -> Result<EditBatch> {
    let edit: Vec<PromptVec> = triplets.iter().map(|t| t.edit_prompt()).collect();
    let neigh: Vec<PromptVec> = triplets.iter().flat_map(|t| t.neighbour_prompts()).collect();
    let out: Vec<PromptVec> = triplets
        .iter()
        .flat_map(|t| [t.loc_prompt(), t.m_loc_prompt()])
        .collect();
    EditBatch::new(
        model,
        &edit.iter().collect::<Vec<_>>(),
        &neigh.iter().collect::<Vec<_>>(),
        &out.iter().collect::<Vec<_>>(),
    )
}

/// Median-heuristic kernel over the base model's hidden states of every
/// edit and neighbour prompt in `triplets`.
pub fn dataset_kernel(model: &ToyModel, triplets: &[EditTriplet]) -> Result<KernelSpec> {
    let zero = EditDelta::zeros(model, &[]);
    let prompts: Vec<PromptVec> = triplets
        .iter()
        .flat_map(|t| {
            let [a, b] = t.neighbour_prompts();
            [t.edit_prompt(), a, b]
        })
        .collect();
    let h = model.last_hidden_batch(&zero, &prompts.iter().collect::<Vec<_>>())?;
    let rows: Vec<&[f64]> = (0..prompts.len()).map(|i| h.row(i)).collect();
    KernelSpec::median_heuristic(&rows, &DEFAULT_BANDWIDTH_MULTIPLIERS)
}

/// A training recipe applied on top of a base [`TrainConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Variant {
    Full,
    NoRel,
    NoLoc,
    NoGen,
    NoTv,
    FixedLambda(f64),
    /// Reliability risk only, no penalty.
    NaiveFt,
}

impl Variant {
    /// The risk-ablation rows, in table order.
    pub const ABLATIONS: [Variant; 5] = [
        Variant::Full,
        Variant::NoRel,
        Variant::NoLoc,
        Variant::NoGen,
        Variant::NoTv,
    ];

    /// Fixed-λ sweep values.
    pub const LAMBDA_SWEEP: [f64; 4] = [0.0001, 0.001, 0.005, 0.01];

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let w = base.weights;
        match self {
            Variant::Full => {}
            Variant::NoRel => cfg.weights = RiskWeights { rel: 0.0, ..w },
            Variant::NoLoc => cfg.weights = RiskWeights { loc: 0.0, ..w },
            Variant::NoGen => cfg.weights = RiskWeights { gen: 0.0, ..w },
            Variant::NoTv => cfg.lambda = LambdaMode::Off,
            Variant::FixedLambda(value) => cfg.lambda = LambdaMode::Fixed { value },
            Variant::NaiveFt => {
                cfg.weights = RiskWeights {
                    rel: 1.0,
                    loc: 0.0,
                    gen: 0.0,
                };
                cfg.lambda = LambdaMode::Off;
            }
        }
        cfg
    }

    pub fn is_adaptive(self, base: &TrainConfig) -> bool {
        matches!(self.apply(base).lambda, LambdaMode::Adaptive)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::NoRel => f.write_str("no_rel"),
            Variant::NoLoc => f.write_str("no_loc"),
            Variant::NoGen => f.write_str("no_gen"),
            Variant::NoTv => f.write_str("no_tv"),
            Variant::FixedLambda(v) => write!(f, "fixed_lambda:{v}"),
            Variant::NaiveFt => f.write_str("naive_ft"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: String| Error::Config {
            field: "variant".into(),
            reason,
        };
        Ok(match s {
            "full" => Variant::Full,
            "no_rel" => Variant::NoRel,
            "no_loc" => Variant::NoLoc,
            "no_gen" => Variant::NoGen,
            "no_tv" => Variant::NoTv,
            "naive_ft" => Variant::NaiveFt,
            _ => match s.strip_prefix("fixed_lambda:") {
                Some(v) => {
                    let value: f64 = v.parse().map_err(|_| bad(format!("bad λ value `{v}`")))?;
                    if !(value.is_finite() && value >= 0.0) {
                        return Err(bad(format!("λ must be non-negative, got {value}")));
                    }
                    Variant::FixedLambda(value)
                }
                None => return Err(bad(format!("unknown variant `{s}`"))),
            },
        })
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Per-edit training seed derived from the run seed.
fn edit_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(index as u64 + 1)
}

/// Result of one harness run.
#[derive(Clone, Debug)]
pub struct HarnessRun {
    pub metrics: MetricsReport,
    /// One history per edit, in edit order.
    pub histories: Vec<Vec<RiskReport>>,
    /// The final delta for sequential runs; per-edit deltas are not kept
    /// for one-step runs.
    pub deltas: Vec<EditDelta>,
}

/// Edits every triplet independently from a zero delta and pools the
/// match counts.
pub fn one_step_harness(model: &ToyModel, triplets: &[EditTriplet], cfg: &TrainConfig) -> Result<HarnessRun> {
    if triplets.is_empty() {
        return Err(Error::Empty("triplet stream"));
    }
    let init = EditDelta::zeros(model, &cfg.edit_layers);
    let runs: Vec<(MatchCounts, TrainOutcome)> = triplets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let one = std::slice::from_ref(t);
            let batch = edit_batch(model, one)?;
            let c = TrainConfig {
                seed: edit_seed(cfg.seed, i),
                ..cfg.clone()
            };
            let out = train_edit(model, &batch, &c, &init)?;
            Ok((count_matches(model, &out.delta, one)?, out))
        })
        .collect::<Result<_>>()?;
    let mut counts = MatchCounts::default();
    let mut histories = Vec::with_capacity(runs.len());
    let mut deltas = Vec::with_capacity(runs.len());
    for (c, out) in runs {
        counts = counts.merge(c);
        histories.push(out.history);
        deltas.push(out.delta);
    }
    let mut metrics = counts.report();
    metrics.seed = cfg.seed;
    metrics.t = 1;
    Ok(HarnessRun {
        metrics,
        histories,
        deltas,
    })
}

/// Applies `t` edits in order to one accumulated delta, then evaluates on
/// all `t` edited records.
pub fn sequential_harness(
    model: &ToyModel,
    triplets: &[EditTriplet],
    t: usize,
    cfg: &TrainConfig,
) -> Result<HarnessRun> {
    if t == 0 || triplets.len() < t {
        return Err(Error::Config {
            field: "T".into(),
            reason: format!("need 1 <= T <= {} records, got {t}", triplets.len()),
        });
    }
    let mut delta = EditDelta::zeros(model, &cfg.edit_layers);
    let mut histories = Vec::with_capacity(t);
    for (i, tr) in triplets[..t].iter().enumerate() {
        let batch = edit_batch(model, std::slice::from_ref(tr))?;
        let c = TrainConfig {
            seed: edit_seed(cfg.seed, i),
            ..cfg.clone()
        };
        let out = train_edit(model, &batch, &c, &delta)?;
        delta = out.delta;
        histories.push(out.history);
    }
    let mut metrics = compute_metrics(model, &delta, &triplets[..t])?;
    metrics.seed = cfg.seed;
    metrics.t = t;
    Ok(HarnessRun {
        metrics,
        histories,
        deltas: vec![delta],
    })
}

/// Everything one seed of an experiment needs: the world, the base model,
/// the records and the MMD kernel.
#[derive(Clone, Debug)]
pub struct Setup {
    pub world: World,
    pub model: ToyModel,
    pub triplets: Vec<EditTriplet>,
    pub kernel: KernelSpec,
    pub seed: u64,
}

/// Named sub-seeds of a run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubSeeds {
    pub world: u64,
    pub init: u64,
    pub train: u64,
}

impl SubSeeds {
    pub fn from_seed(seed: u64) -> SubSeeds {
        let mix = |tag: u64| {
            let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        SubSeeds {
            world: mix(1),
            init: mix(2),
            train: mix(3),
        }
    }
}

impl Setup {
    /// World and model from sub-seeds of `seed`, `n_edits` records.
    pub fn new(world: &WorldSpec, dims: ModelDims, n_edits: usize, seed: u64) -> Result<Setup> {
        let s = SubSeeds::from_seed(seed);
        let spec = WorldSpec {
            seed: s.world,
            ..world.clone()
        };
        Setup::from_world(generate_world(&spec)?, dims, n_edits, seed)
    }

    pub fn from_world(world: World, dims: ModelDims, n_edits: usize, seed: u64) -> Result<Setup> {
        let triplets = generate_triplets(&world, 0, n_edits)?;
        Setup::with_triplets(world, dims, triplets, seed)
    }

    /// Setup over existing records, e.g. an imported dataset.
    pub fn with_triplets(world: World, dims: ModelDims, triplets: Vec<EditTriplet>, seed: u64) -> Result<Setup> {
        if world.spec.d_img != dims.d_img || world.spec.d_txt != dims.d_txt || world.spec.n_values != dims.n_classes {
            return Err(Error::Config {
                field: "model".into(),
                reason: "model dims must match the world's feature sizes and vocabulary".into(),
            });
        }
        if triplets.is_empty() {
            return Err(Error::Empty("triplet stream"));
        }
        let model = init_model(dims, SubSeeds::from_seed(seed).init)?;
        let kernel = dataset_kernel(&model, &triplets)?;
        Ok(Setup {
            world,
            model,
            triplets,
            kernel,
            seed,
        })
    }

    /// `base` with this setup's kernel and training seed.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: SubSeeds::from_seed(self.seed).train,
            kernel: Some(base.kernel.clone().unwrap_or_else(|| self.kernel.clone())),
            ..base.clone()
        }
    }

    pub fn one_step(&self, base: &TrainConfig, variant: Variant) -> Result<HarnessRun> {
        let cfg = variant.apply(&self.train_config(base));
        let mut run = one_step_harness(&self.model, &self.triplets, &cfg)?;
        run.metrics.seed = self.seed;
        Ok(run)
    }

    pub fn sequential(&self, base: &TrainConfig, variant: Variant, t: usize) -> Result<HarnessRun> {
        let cfg = variant.apply(&self.train_config(base));
        let mut run = sequential_harness(&self.model, &self.triplets, t, &cfg)?;
        run.metrics.seed = self.seed;
        Ok(run)
    }

    /// Hidden states of the edit prompts and of their neighbours under
    /// `delta`.
    pub fn embeddings(&self, delta: &EditDelta, triplets: &[EditTriplet]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let edit: Vec<PromptVec> = triplets.iter().map(|t| t.edit_prompt()).collect();
        let neigh: Vec<PromptVec> = triplets.iter().flat_map(|t| t.neighbour_prompts()).collect();
        let rows = |ps: &[PromptVec]| -> Result<Vec<Vec<f64>>> {
            let h = self.model.last_hidden_batch(delta, &ps.iter().collect::<Vec<_>>())?;
            Ok((0..ps.len()).map(|i| h.row(i).to_vec()).collect())
        };
        Ok((rows(&edit)?, rows(&neigh)?))
    }
}

impl Setup {
    /// Edit-prompt and neighbour embeddings of `run`, each record under the
    /// delta that edited it (the shared delta for sequential runs).
    pub fn run_embeddings(&self, run: &HarnessRun) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let n = run.metrics.n_rel;
        let records = &self.triplets[..n];
        if run.deltas.len() == 1 {
            return self.embeddings(&run.deltas[0], records);
        }
        let (mut src, mut gen) = (Vec::new(), Vec::new());
        for (delta, t) in run.deltas.iter().zip(records) {
            let (a, b) = self.embeddings(delta, std::slice::from_ref(t))?;
            src.extend(a);
            gen.extend(b);
        }
        Ok((src, gen))
    }

    pub fn run_overlap(&self, run: &HarnessRun) -> Result<OverlapReport> {
        let (src, gen) = self.run_embeddings(run)?;
        overlap_beta(&src, &gen, None)
    }
}

/// One report per variant; every variant sees the same data and seeds.
pub fn ablation_runner(setup: &Setup, base: &TrainConfig, variants: &[Variant]) -> Result<Vec<(Variant, MetricsReport)>> {
    variants
        .par_iter()
        .map(|v| Ok((*v, setup.one_step(base, *v)?.metrics)))
        .collect()
}

/// Mean and sample standard deviation of each metric over seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_seeds: usize,
    pub rel: MeanStd,
    pub gen: MeanStd,
    pub gen_target: MeanStd,
    pub t_loc: MeanStd,
    pub m_loc: MeanStd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

fn mean_std(values: impl Iterator<Item = Option<f64>>) -> MeanStd {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return MeanStd::default();
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd {
        mean: Some(mean),
        std: Some(std),
    }
}

pub fn aggregate(reports: &[MetricsReport]) -> Aggregate {
    Aggregate {
        n_seeds: reports.len(),
        rel: mean_std(reports.iter().map(|r| r.rel)),
        gen: mean_std(reports.iter().map(|r| r.gen)),
        gen_target: mean_std(reports.iter().map(|r| r.gen_target)),
        t_loc: mean_std(reports.iter().map(|r| r.t_loc)),
        m_loc: mean_std(reports.iter().map(|r| r.m_loc)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub beta_x: f64,
    pub beta_y: f64,
    /// The two projection directions.
    pub axes: [Vec<f64>; 2],
    pub bins: usize,
}

pub const OVERLAP_BINS: usize = 32;

/// `Σ_b min(p_b, q_b)` of two 1-D samples over `bins` equal-width bins
/// spanning their pooled range. A zero-width range gives 1.
pub fn overlap_coefficient(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("overlap sample"));
    }
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    if !(width > 1e-12 * hi.abs().max(lo.abs()).max(1.0)) {
        return Ok(1.0);
    }
    let hist = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let k = (((x - lo) / width) * bins as f64) as usize;
            h[k.min(bins - 1)] += 1.0 / xs.len() as f64;
        }
        h
    };
    let (p, q) = (hist(a), hist(b));
    Ok(p.iter().zip(&q).map(|(x, y)| x.min(*y)).sum::<f64>().min(1.0))
}

/// Top-2 principal directions of the pooled rows.
pub fn principal_axes(rows: &[Vec<f64>]) -> Result<[Vec<f64>; 2]> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d < 2 {
        return Err(Error::Dimension(format!("need rows of length >= 2, got {n} rows of {d}")));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| {
        let v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().cloned().collect();
        // Deterministic sign: largest-magnitude component positive.
        let pivot = v.iter().cloned().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        let s = if pivot < 0.0 { -1.0 } else { 1.0 };
        v.into_iter().map(|c| c * s).collect()
    };
    Ok([axis(0), axis(1)])
}

/// Overlap of the marginal distributions of two embedding sets along two
/// axes; by default the top-2 principal directions of the pooled set.
pub fn overlap_beta(z_src: &[Vec<f64>], z_gen: &[Vec<f64>], axes: Option<[Vec<f64>; 2]>) -> Result<OverlapReport> {
    if z_src.is_empty() || z_gen.is_empty() {
        return Err(Error::Empty("embedding set"));
    }
    let axes = match axes {
        Some(a) => a,
        None => {
            let pooled: Vec<Vec<f64>> = z_src.iter().chain(z_gen).cloned().collect();
            principal_axes(&pooled)?
        }
    };
    let proj = |rows: &[Vec<f64>], ax: &[f64]| -> Vec<f64> {
        rows.iter().map(|r| r.iter().zip(ax).map(|(a, b)| a * b).sum()).collect()
    };
    let beta_x = overlap_coefficient(&proj(z_src, &axes[0]), &proj(z_gen, &axes[0]), OVERLAP_BINS)?;
    let beta_y = overlap_coefficient(&proj(z_src, &axes[1]), &proj(z_gen, &axes[1]), OVERLAP_BINS)?;
    Ok(OverlapReport {
        beta_x,
        beta_y,
        axes,
        bins: OVERLAP_BINS,
    })
}

/// Embedding rows as CSV: `set,index,z0,z1,…`.
pub fn write_embeddings_csv(path: &Path, z_src: &[Vec<f64>], z_gen: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = z_src.first().or(z_gen.first()).map_or(0, Vec::len);
    let mut header = vec!["set".to_string(), "index".to_string()];
    header.extend((0..d).map(|j| format!("z{j}")));
    w.write_record(&header)?;
    for (set, rows) in [("src", z_src), ("gen", z_gen)] {
        for (i, r) in rows.iter().enumerate() {
            let mut rec = vec![set.to_string(), i.to_string()];
            rec.extend(r.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_setup() -> Setup {
        Setup::new(&WorldSpec::default(), ModelDims::default(), 6, 1).unwrap()
    }

    #[test]
    fn zero_delta_keeps_locality() {
        let s = small_setup();
        let zero = EditDelta::zeros(&s.model, &crate::model::DEFAULT_EDIT_LAYERS);
        let m = compute_metrics(&s.model, &zero, &s.triplets).unwrap();
        assert_eq!(m.t_loc, Some(1.0));
        assert_eq!(m.m_loc, Some(1.0));
        assert_eq!(m.n_gen, 2 * s.triplets.len());
        assert_eq!(compute_metrics(&s.model, &zero, &s.triplets).unwrap(), m);
    }

    #[test]
    fn counting_example() {
        let r = MatchCounts {
            rel: (4, 4),
            gen: (3, 4),
            ..MatchCounts::default()
        }
        .report();
        assert_eq!(r.rel, Some(1.0));
        assert_eq!(r.gen, Some(0.75));
        assert_eq!(r.t_loc, None);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [
            Variant::Full,
            Variant::NoRel,
            Variant::NoLoc,
            Variant::NoGen,
            Variant::NoTv,
            Variant::FixedLambda(0.005),
            Variant::NaiveFt,
        ] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
        assert!("fixed_lambda:-1".parse::<Variant>().is_err());
    }

    #[test]
    fn overlap_examples() {
        let a: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        assert_eq!(overlap_coefficient(&a, &a, 32).unwrap(), 1.0);
        let far: Vec<f64> = a.iter().map(|x| x + 10.0).collect();
        assert_eq!(overlap_coefficient(&a, &far, 32).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u: Vec<f64> = (0..4000).map(|_| rng.random_range(0.0..1.0)).collect();
        let v: Vec<f64> = (0..4000).map(|_| rng.random_range(0.5..1.5)).collect();
        let b = overlap_coefficient(&u, &v, 32).unwrap();
        assert!((b - 0.5).abs() < 0.1, "{b}");
        assert_eq!(overlap_coefficient(&[2.0, 2.0], &[2.0], 32).unwrap(), 1.0);
    }

    #[test]
    fn beta_on_identical_sets_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<Vec<f64>> = (0..50).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let r = overlap_beta(&z, &z, None).unwrap();
        assert_eq!((r.beta_x, r.beta_y), (1.0, 1.0));
    }

    #[test]
    fn sequential_with_one_edit_matches_one_step() {
        let s = small_setup();
        let base = TrainConfig {
            max_steps: 30,
            ..TrainConfig::default()
        };
        let one = Setup {
            triplets: s.triplets[..1].to_vec(),
            ..s.clone()
        };
        let a = one.one_step(&base, Variant::Full).unwrap();
        let b = one.sequential(&base, Variant::Full, 1).unwrap();
        let strip = |m: &MetricsReport| MetricsReport { t: 0, ..m.clone() };
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
    }

    mod props {
        use super::*;
        use crate::model::{Layer, DEFAULT_EDIT_LAYERS};
        use crate::tensor::Tensor;
        use proptest::prelude::*;
        use rand::seq::SliceRandom;
        use rand::Rng;

        fn random_delta(model: &ToyModel, seed: u64, scale: f64) -> EditDelta {
            let mut delta = EditDelta::zeros(model, &DEFAULT_EDIT_LAYERS);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for name in delta.tensor_names() {
                for v in delta.params.get_mut(&name).unwrap().data_mut() {
                    *v = rng.random_range(-scale..scale);
                }
            }
            delta
        }

        fn permute_head(t: &mut Tensor, perm: &[usize]) {
            let v = perm.len();
            let old = t.clone();
            let rows = old.numel() / v;
            for r in 0..rows {
                for (c, &to) in perm.iter().enumerate() {
                    t.data_mut()[r * v + to] = old.data()[r * v + c];
                }
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn metrics_are_deterministic(seed in 0u64..50, dseed in 0u64..1000, scale in 0.0f64..1.0) {
                let s = Setup::new(&WorldSpec::default(), ModelDims::default(), 6, seed).unwrap();
                let delta = random_delta(&s.model, dseed, scale);
                prop_assert_eq!(
                    compute_metrics(&s.model, &delta, &s.triplets).unwrap(),
                    compute_metrics(&s.model, &delta, &s.triplets).unwrap()
                );
                let zero = EditDelta::zeros(&s.model, &DEFAULT_EDIT_LAYERS);
                let m = compute_metrics(&s.model, &zero, &s.triplets).unwrap();
                prop_assert_eq!((m.t_loc, m.m_loc), (Some(1.0), Some(1.0)));
            }

            #[test]
            fn relabeling_answers_leaves_metrics_unchanged(seed in 0u64..50, dseed in 0u64..1000, pseed in 0u64..1000) {
                let s = Setup::new(&WorldSpec::default(), ModelDims::default(), 6, seed).unwrap();
                let delta = random_delta(&s.model, dseed, 0.5);
                let v = s.model.dims.n_classes;
                let mut perm: Vec<usize> = (0..v).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(pseed));

                let (mut model, mut pdelta) = (s.model.clone(), delta.clone());
                for name in [Layer::Head.weight(), Layer::Head.bias()] {
                    permute_head(model.params.get_mut(&name).unwrap(), &perm);
                    permute_head(pdelta.params.get_mut(&name).unwrap(), &perm);
                }
                let triplets: Vec<EditTriplet> = s
                    .triplets
                    .iter()
                    .map(|t| EditTriplet {
                        pred: perm[t.pred],
                        alt: perm[t.alt],
                        loc_ans: perm[t.loc_ans],
                        m_loc_a: perm[t.m_loc_a],
                        ..t.clone()
                    })
                    .collect();
                prop_assert_eq!(
                    compute_metrics(&model, &pdelta, &triplets).unwrap(),
                    compute_metrics(&s.model, &delta, &s.triplets).unwrap()
                );
            }
        }
    }
}
