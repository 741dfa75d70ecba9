//! Synthetic multimodal editing benchmark.
//!
//! A world holds entities and attributes; every (entity, attribute) pair
//! has one answer value. A prompt about fact `(e, a)` carries
//!
//! ```text
//! image m = [ img_ent[e]                  | spurious_img ] + noise
//! text  x = [ txt_ent[e]/2 + txt_attr[a]  | spurious_txt ] + noise
//! ```
//!
//! where the spurious blocks are `ρ·S[y] + sqrt(1−ρ²)·S[u]` for the answer
//! `y` and a random environment `u`. Semantic distance is measured on the
//! invariant blocks only.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::PromptVec;
use crate::tensor::Tensor;

const MAX_WORLD_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub n_entities: usize,
    pub n_attributes: usize,
    /// Size of the answer vocabulary.
    pub n_values: usize,
    pub d_img: usize,
    pub d_txt: usize,
    /// Trailing spurious dimensions in the image and text features.
    pub d_spur_img: usize,
    pub d_spur_txt: usize,
    /// Semantic radius; `None` means `epsilon_factor` times the minimum
    /// distance between fact prototypes.
    pub epsilon: Option<f64>,
    pub epsilon_factor: f64,
    /// Smallest allowed distance between distinct fact prototypes.
    pub min_separation: f64,
    pub spurious_strength: f64,
    pub noise: f64,
    /// Share of records whose out-of-scope prompts share one concept with
    /// the edit.
    pub hard_fraction: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_entities: 24,
            n_attributes: 4,
            n_values: 16,
            d_img: 16,
            d_txt: 16,
            d_spur_img: 4,
            d_spur_txt: 4,
            epsilon: None,
            epsilon_factor: 0.3,
            min_separation: 1.0,
            spurious_strength: 0.8,
            noise: 0.05,
            hard_fraction: 0.5,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: format!("world.{field}"),
                reason,
            })
        };
        if self.n_entities < 2 || self.n_attributes < 2 {
            return bad("n_entities", "need at least two entities and two attributes".into());
        }
        if self.n_values < 2 {
            return bad("n_values", "need at least two answer values".into());
        }
        if self.d_spur_img >= self.d_img {
            return bad("d_spur_img", "must leave invariant image dimensions".into());
        }
        if self.d_spur_txt >= self.d_txt {
            return bad("d_spur_txt", "must leave invariant text dimensions".into());
        }
        if let Some(e) = self.epsilon {
            if !(e.is_finite() && e >= 0.0) {
                return bad("epsilon", format!("must be non-negative, got {e}"));
            }
        }
        if !(self.epsilon_factor.is_finite() && (0.0..0.5).contains(&self.epsilon_factor)) {
            return bad("epsilon_factor", format!("must lie in [0, 0.5), got {}", self.epsilon_factor));
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return bad(
                "spurious_strength",
                format!("must lie in [0, 1], got {}", self.spurious_strength),
            );
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise", format!("must be non-negative, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad("hard_fraction", format!("must lie in [0, 1], got {}", self.hard_fraction));
        }
        if !(self.min_separation.is_finite() && self.min_separation >= 0.0) {
            return bad("min_separation", format!("must be non-negative, got {}", self.min_separation));
        }
        Ok(())
    }

    pub fn d_inv_img(&self) -> usize {
        self.d_img - self.d_spur_img
    }

    pub fn d_inv_txt(&self) -> usize {
        self.d_txt - self.d_spur_txt
    }

    pub fn n_facts(&self) -> usize {
        self.n_entities * self.n_attributes
    }
}

/// The atomic factual content of a prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactTuple {
    pub entity: usize,
    pub attribute: usize,
    pub value: usize,
}

/// Concept ids: entities are `0..n_entities`, attributes follow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSet(pub BTreeSet<usize>);

impl ConceptSet {
    pub fn overlap(&self, other: &ConceptSet) -> usize {
        self.0.intersection(&other.0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Out-of-scope prompts share no concept with the edit.
    Easy,
    /// Out-of-scope prompts share exactly one concept with the edit.
    Hard,
}

#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    pub epsilon: f64,
    /// `[n_entities][d_inv_img]`
    pub img_entity: Vec<Vec<f64>>,
    /// `[n_entities][d_inv_txt]`
    pub txt_entity: Vec<Vec<f64>>,
    /// `[n_attributes][d_inv_txt]`
    pub txt_attribute: Vec<Vec<f64>>,
    /// `[n_values][d_spur_img]`
    pub spur_img: Vec<Vec<f64>>,
    /// `[n_values][d_spur_txt]`
    pub spur_txt: Vec<Vec<f64>>,
    /// `values[entity][attribute]`
    pub values: Vec<Vec<usize>>,
    pub min_prototype_distance: f64,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A deterministic world. Prototype sets are redrawn until every pair of
/// distinct facts is at least `min_separation` apart.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_WORLD_ATTEMPTS {
        let img_entity: Vec<_> = (0..spec.n_entities).map(|_| gaussian(&mut rng, spec.d_inv_img())).collect();
        let txt_entity: Vec<_> = (0..spec.n_entities).map(|_| gaussian(&mut rng, spec.d_inv_txt())).collect();
        let txt_attribute: Vec<_> = (0..spec.n_attributes).map(|_| gaussian(&mut rng, spec.d_inv_txt())).collect();
        let spur_img: Vec<_> = (0..spec.n_values).map(|_| gaussian(&mut rng, spec.d_spur_img)).collect();
        let spur_txt: Vec<_> = (0..spec.n_values).map(|_| gaussian(&mut rng, spec.d_spur_txt)).collect();

        let mut order: Vec<(usize, usize)> = (0..spec.n_entities)
            .flat_map(|e| (0..spec.n_attributes).map(move |a| (e, a)))
            .collect();
        order.shuffle(&mut rng);
        let mut values = vec![vec![0; spec.n_attributes]; spec.n_entities];
        for (i, (e, a)) in order.into_iter().enumerate() {
            values[e][a] = i % spec.n_values;
        }

        let mut world = World {
            spec: spec.clone(),
            epsilon: 0.0,
            img_entity,
            txt_entity,
            txt_attribute,
            spur_img,
            spur_txt,
            values,
            min_prototype_distance: f64::INFINITY,
        };
        let protos: Vec<Vec<f64>> = world.facts().iter().map(|f| world.prototype(f.entity, f.attribute)).collect();
        let mut min_d = f64::INFINITY;
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                min_d = min_d.min(distance(&protos[i], &protos[j]));
            }
        }
        if min_d >= spec.min_separation && min_d > 0.0 {
            world.min_prototype_distance = min_d;
            world.epsilon = spec.epsilon.unwrap_or(spec.epsilon_factor * min_d);
            return Ok(world);
        }
    }
    Err(Error::Config {
        field: "world.min_separation".into(),
        reason: format!(
            "no prototype set with separation {} found in {MAX_WORLD_ATTEMPTS} draws",
            spec.min_separation
        ),
    })
}

impl World {
    pub fn fact(&self, entity: usize, attribute: usize) -> FactTuple {
        FactTuple {
            entity,
            attribute,
            value: self.values[entity][attribute],
        }
    }

    pub fn facts(&self) -> Vec<FactTuple> {
        (0..self.spec.n_entities)
            .flat_map(|e| (0..self.spec.n_attributes).map(move |a| (e, a)))
            .map(|(e, a)| self.fact(e, a))
            .collect()
    }

    pub fn concepts(&self, fact: &FactTuple) -> ConceptSet {
        ConceptSet([fact.entity, self.spec.n_entities + fact.attribute].into_iter().collect())
    }

    /// Invariant image block followed by invariant text block.
    pub fn prototype(&self, entity: usize, attribute: usize) -> Vec<f64> {
        let mut p = self.img_entity[entity].clone();
        p.extend(self.text_prototype(entity, attribute));
        p
    }

    fn text_prototype(&self, entity: usize, attribute: usize) -> Vec<f64> {
        self.txt_entity[entity]
            .iter()
            .zip(&self.txt_attribute[attribute])
            .map(|(e, a)| 0.5 * e + a)
            .collect()
    }

    /// Invariant coordinates of a prompt (image block, then text block).
    pub fn invariant(&self, m: &[f64], x: &[f64]) -> Vec<f64> {
        let mut v = m[..self.spec.d_inv_img()].to_vec();
        v.extend_from_slice(&x[..self.spec.d_inv_txt()]);
        v
    }

    pub fn semantic_distance(&self, a: &PromptVec, b: &PromptVec) -> f64 {
        distance(&self.invariant(&a.m, &a.x), &self.invariant(&b.m, &b.x))
    }

    fn spurious(&self, table: &[Vec<f64>], y: usize, u: usize) -> Vec<f64> {
        let rho = self.spec.spurious_strength;
        let c = (1.0 - rho * rho).max(0.0).sqrt();
        table[y].iter().zip(&table[u]).map(|(s, t)| rho * s + c * t).collect()
    }

    /// `(m, x)` for a prompt about `fact` in environment `u`.
    fn features(&self, fact: &FactTuple, u: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let sigma = self.spec.noise;
        let mut m = self.img_entity[fact.entity].clone();
        m.extend(self.spurious(&self.spur_img, fact.value, u));
        let mut x = self.text_prototype(fact.entity, fact.attribute);
        x.extend(self.spurious(&self.spur_txt, fact.value, u));
        for v in m.iter_mut().chain(x.iter_mut()) {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        (m, x)
    }
}

/// Which member of a triplet a fact tuple belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletFacts {
    pub src: FactTuple,
    pub rephrase: FactTuple,
    pub image_rephrase: FactTuple,
    pub loc: FactTuple,
    pub m_loc: FactTuple,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletConcepts {
    pub src: ConceptSet,
    pub rephrase: ConceptSet,
    pub image_rephrase: ConceptSet,
    pub loc: ConceptSet,
    pub m_loc: ConceptSet,
}

/// One benchmark record. Field names follow the usual multimodal editing
/// layout: `src`/`image` form the edit prompt, `rephrase` pairs with
/// `image` and `image_rephrase` with `src`, `loc` is a text-only
/// out-of-scope question and `m_loc`/`m_loc_q` a multimodal one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditTriplet {
    pub id: usize,
    pub shift: ShiftKind,
    pub src: Vec<f64>,
    /// Answer before the edit.
    pub pred: usize,
    pub rephrase: Vec<f64>,
    /// Edit target.
    pub alt: usize,
    pub image: Vec<f64>,
    pub image_rephrase: Vec<f64>,
    pub loc: Vec<f64>,
    pub loc_ans: usize,
    pub m_loc: Vec<f64>,
    pub m_loc_q: Vec<f64>,
    pub m_loc_a: usize,
    pub facts: TripletFacts,
    pub concepts: TripletConcepts,
}

/// Field names shared with the multimodal editing record layout.
pub const RECORD_KEYS: [&str; 11] = [
    "src",
    "pred",
    "rephrase",
    "alt",
    "image",
    "image_rephrase",
    "loc",
    "loc_ans",
    "m_loc",
    "m_loc_q",
    "m_loc_a",
];

impl EditTriplet {
    pub fn edit_prompt(&self) -> PromptVec {
        PromptVec {
            m: self.image.clone(),
            x: self.src.clone(),
            y: self.alt,
        }
    }

    /// The edit prompt with its pre-edit answer.
    pub fn original_prompt(&self) -> PromptVec {
        PromptVec {
            y: self.pred,
            ..self.edit_prompt()
        }
    }

    pub fn rephrase_prompt(&self) -> PromptVec {
        PromptVec {
            m: self.image.clone(),
            x: self.rephrase.clone(),
            y: self.alt,
        }
    }

    pub fn image_rephrase_prompt(&self) -> PromptVec {
        PromptVec {
            m: self.image_rephrase.clone(),
            x: self.src.clone(),
            y: self.alt,
        }
    }

    /// Both semantic neighbours of the edit prompt.
    pub fn neighbour_prompts(&self) -> [PromptVec; 2] {
        [self.rephrase_prompt(), self.image_rephrase_prompt()]
    }

    /// Text-only out-of-scope prompt: the image features are zero.
    pub fn loc_prompt(&self) -> PromptVec {
        PromptVec {
            m: vec![0.0; self.image.len()],
            x: self.loc.clone(),
            y: self.loc_ans,
        }
    }

    pub fn m_loc_prompt(&self) -> PromptVec {
        PromptVec {
            m: self.m_loc.clone(),
            x: self.m_loc_q.clone(),
            y: self.m_loc_a,
        }
    }
}

fn record_rng(world: &World, index: usize, stream: u64) -> ChaCha8Rng {
    let key = world
        .spec
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}

/// A vector in the first `n_inv` coordinates of a `len`-vector, with norm
/// in `[radius/2, radius]`.
fn neighbourhood_step(rng: &mut ChaCha8Rng, len: usize, n_inv: usize, radius: f64) -> Vec<f64> {
    let dir = gaussian(rng, n_inv);
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random_range(0.5..=1.0);
    let mut step = vec![0.0; len];
    for (s, d) in step.iter_mut().zip(dir) {
        *s = r * d / norm;
    }
    step
}

fn pick_out_of_scope(
    world: &World,
    src: &FactTuple,
    shift: ShiftKind,
    exclude: &[FactTuple],
    rng: &mut ChaCha8Rng,
) -> Result<FactTuple> {
    let src_c = world.concepts(src);
    let candidates: Vec<FactTuple> = world
        .facts()
        .into_iter()
        .filter(|f| f != src && !exclude.contains(f))
        .filter(|f| {
            let o = world.concepts(f).overlap(&src_c);
            match shift {
                ShiftKind::Easy => o == 0,
                ShiftKind::Hard => o == 1,
            }
        })
        .collect();
    candidates
        .choose(rng)
        .copied()
        .ok_or_else(|| Error::WorldExhausted(format!("no {shift:?} out-of-scope fact for {src:?}")))
}

/// Builds record `index` editing `fact` to `new_value`. Everything random
/// is drawn from a generator keyed by the world seed and `index`.
pub fn make_edit_triplet(
    world: &World,
    fact: FactTuple,
    new_value: usize,
    shift: ShiftKind,
    index: usize,
) -> Result<EditTriplet> {
    if new_value == fact.value {
        return Err(Error::Config {
            field: "new_value".into(),
            reason: format!("edit target {new_value} equals the current value"),
        });
    }
    if new_value >= world.spec.n_values {
        return Err(Error::Dimension(format!("value {new_value} outside vocabulary")));
    }
    let mut rng = record_rng(world, index, 1);
    let n_values = world.spec.n_values;
    let (image, src) = world.features(&fact, rng.random_range(0..n_values), &mut rng);

    let s_txt = neighbourhood_step(&mut rng, src.len(), world.spec.d_inv_txt(), world.epsilon);
    let rephrase: Vec<f64> = src.iter().zip(&s_txt).map(|(a, b)| a + b).collect();
    let s_img = neighbourhood_step(&mut rng, image.len(), world.spec.d_inv_img(), world.epsilon);
    let image_rephrase: Vec<f64> = image.iter().zip(&s_img).map(|(a, b)| a + b).collect();

    let loc_fact = pick_out_of_scope(world, &fact, shift, &[], &mut rng)?;
    let (_, loc) = world.features(&loc_fact, rng.random_range(0..n_values), &mut rng);
    let m_loc_fact = pick_out_of_scope(world, &fact, shift, &[loc_fact], &mut rng)?;
    let (m_loc, m_loc_q) = world.features(&m_loc_fact, rng.random_range(0..n_values), &mut rng);

    let facts = TripletFacts {
        src: fact,
        rephrase: fact,
        image_rephrase: fact,
        loc: loc_fact,
        m_loc: m_loc_fact,
    };
    let concepts = TripletConcepts {
        src: world.concepts(&facts.src),
        rephrase: world.concepts(&facts.rephrase),
        image_rephrase: world.concepts(&facts.image_rephrase),
        loc: world.concepts(&facts.loc),
        m_loc: world.concepts(&facts.m_loc),
    };
    Ok(EditTriplet {
        id: index,
        shift,
        src,
        pred: fact.value,
        rephrase,
        alt: new_value,
        image,
        image_rephrase,
        loc,
        loc_ans: loc_fact.value,
        m_loc,
        m_loc_q,
        m_loc_a: m_loc_fact.value,
        facts,
        concepts,
    })
}

/// Record `index` of the default stream: a uniformly chosen fact, a
/// uniformly chosen new value, and a hard shift with probability
/// `hard_fraction`.
pub fn sample_triplet(world: &World, index: usize) -> Result<EditTriplet> {
    let mut rng = record_rng(world, index, 0);
    let e = rng.random_range(0..world.spec.n_entities);
    let a = rng.random_range(0..world.spec.n_attributes);
    let fact = world.fact(e, a);
    let mut new_value = rng.random_range(0..world.spec.n_values - 1);
    if new_value >= fact.value {
        new_value += 1;
    }
    let shift = if rng.random_bool(world.spec.hard_fraction) {
        ShiftKind::Hard
    } else {
        ShiftKind::Easy
    };
    make_edit_triplet(world, fact, new_value, shift, index)
}

/// Records `start..start + n`, generated in parallel.
pub fn generate_triplets(world: &World, start: usize, n: usize) -> Result<Vec<EditTriplet>> {
    (start..start + n).into_par_iter().map(|i| sample_triplet(world, i)).collect()
}

/// Every violated triplet invariant, as a human-readable line.
pub fn validate_triplet(t: &EditTriplet, world: &World) -> Vec<String> {
    let spec = &world.spec;
    let mut out = Vec::new();
    let members = [
        ("src", &t.facts.src, &t.concepts.src),
        ("rephrase", &t.facts.rephrase, &t.concepts.rephrase),
        ("image_rephrase", &t.facts.image_rephrase, &t.concepts.image_rephrase),
        ("loc", &t.facts.loc, &t.concepts.loc),
        ("m_loc", &t.facts.m_loc, &t.concepts.m_loc),
    ];
    for (name, f, c) in members {
        if f.entity >= spec.n_entities || f.attribute >= spec.n_attributes || f.value >= spec.n_values {
            out.push(format!("{name}: fact {f:?} outside world ranges"));
            continue;
        }
        if world.values[f.entity][f.attribute] != f.value {
            out.push(format!("{name}: fact {f:?} contradicts the fact table"));
        }
        if c.0.is_empty() {
            out.push(format!("{name}: empty concept set"));
        } else if *c != world.concepts(f) {
            out.push(format!("{name}: concept set does not match its fact"));
        }
    }
    for (name, v, d) in [
        ("src", &t.src, spec.d_txt),
        ("rephrase", &t.rephrase, spec.d_txt),
        ("loc", &t.loc, spec.d_txt),
        ("m_loc_q", &t.m_loc_q, spec.d_txt),
        ("image", &t.image, spec.d_img),
        ("image_rephrase", &t.image_rephrase, spec.d_img),
        ("m_loc", &t.m_loc, spec.d_img),
    ] {
        if v.len() != d {
            out.push(format!("{name}: length {} != {d}", v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            out.push(format!("{name}: non-finite feature"));
        }
    }
    if !out.is_empty() {
        return out;
    }
    if t.pred != t.facts.src.value {
        out.push("pred: does not match the source fact value".into());
    }
    if t.loc_ans != t.facts.loc.value || t.m_loc_a != t.facts.m_loc.value {
        out.push("loc answer: does not match its fact value".into());
    }
    if t.alt == t.pred {
        out.push("alt: edit target equals the current answer".into());
    }
    if t.alt >= spec.n_values {
        out.push("alt: outside answer vocabulary".into());
    }
    for (name, f) in [("rephrase", &t.facts.rephrase), ("image_rephrase", &t.facts.image_rephrase)] {
        if *f != t.facts.src {
            out.push(format!("{name}: k mismatch with src"));
        }
    }
    let src = t.edit_prompt();
    let tol = world.epsilon * (1.0 + 1e-9) + 1e-12;
    for (name, p) in [("rephrase", t.rephrase_prompt()), ("image_rephrase", t.image_rephrase_prompt())] {
        let d = world.semantic_distance(&src, &p);
        if d > tol {
            out.push(format!("{name}: outside semantic neighborhood ({d:.6} > ε = {:.6})", world.epsilon));
        }
    }
    for (name, f, c, p) in [
        ("loc", &t.facts.loc, &t.concepts.loc, t.loc_prompt()),
        ("m_loc", &t.facts.m_loc, &t.concepts.m_loc, t.m_loc_prompt()),
    ] {
        if *f == t.facts.src {
            out.push(format!("{name}: k equals src (not a factual shift)"));
        }
        let o = c.overlap(&t.concepts.src);
        match t.shift {
            ShiftKind::Easy if o != 0 => out.push(format!("{name}: easy shift shares {o} concepts with src")),
            ShiftKind::Hard if o != 1 => out.push(format!("{name}: hard shift shares {o} concepts with src, expected 1")),
            _ => {}
        }
        if world.semantic_distance(&src, &p) <= world.epsilon {
            out.push(format!("{name}: inside the semantic neighborhood of src"));
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct WorldHeader {
    #[serde(rename = "_world")]
    world: WorldSpec,
}

/// Writes the world header and one record per line.
pub fn export_jsonl(spec: &WorldSpec, records: &[EditTriplet], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &WorldHeader { world: spec.clone() })?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`export_jsonl`]. Errors carry 1-based line
/// numbers.
pub fn import_jsonl(path: &Path) -> Result<(WorldSpec, Vec<EditTriplet>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut spec = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |e: serde_json::Error| Error::Parse {
            line: lineno,
            message: e.to_string(),
        };
        if spec.is_none() {
            let h: WorldHeader = serde_json::from_str(&line).map_err(parse)?;
            spec = Some(h.world);
        } else {
            records.push(serde_json::from_str(&line).map_err(parse)?);
        }
    }
    let spec = spec.ok_or(Error::Parse {
        line: 1,
        message: "missing `_world` header".into(),
    })?;
    Ok((spec, records))
}

/// Held-out accuracy of a softmax-regression probe that reads only the
/// spurious dimensions of edit prompts and predicts their pre-edit answer.
/// The first half of `records` trains, the second half tests.
pub fn spurious_probe_accuracy(world: &World, records: &[EditTriplet], steps: usize, lr: f64) -> Result<f64> {
    if records.len() < 4 {
        return Err(Error::Empty("probe records"));
    }
    let spec = &world.spec;
    let feats = |t: &EditTriplet| {
        let mut f = t.image[spec.d_inv_img()..].to_vec();
        f.extend_from_slice(&t.src[spec.d_inv_txt()..]);
        f.push(1.0);
        f
    };
    let (train, test) = records.split_at(records.len() / 2);
    let d = spec.d_spur_img + spec.d_spur_txt + 1;
    let v = spec.n_values;
    let x_train = Tensor::from_rows(&train.iter().map(feats).collect::<Vec<_>>())?;
    let y_train: Vec<usize> = train.iter().map(|t| t.pred).collect();
    let mut w = Tensor::zeros(&[d, v]);
    for _ in 0..steps {
        let g = Graph::new();
        let wv = g.param("w", w.clone())?;
        let logits = g.constant(x_train.clone()).matmul(wv)?;
        let loss = crate::risks::nll_from_logits(logits, &y_train)?;
        let grads = g.backward(loss)?;
        w.axpy(-lr, grads.get("w").expect("probe weight"));
    }
    let correct = test
        .iter()
        .filter(|t| {
            let f = feats(t);
            let scores: Vec<f64> = (0..v)
                .map(|k| (0..d).map(|j| f[j] * w.data()[j * v + k]).sum())
                .collect();
            crate::model::predict_class(&scores) == t.pred
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        generate_world(&WorldSpec::default()).unwrap()
    }

    #[test]
    fn world_is_deterministic_and_total() {
        let a = world();
        let b = world();
        assert_eq!(a.img_entity, b.img_entity);
        assert_eq!(a.values, b.values);
        assert_eq!(a.facts().len(), a.spec.n_facts());
        let mut counts = vec![0; a.spec.n_values];
        for f in a.facts() {
            counts[f.value] += 1;
        }
        assert!(counts.iter().all(|&c| c == a.spec.n_facts() / a.spec.n_values));
        assert!(a.min_prototype_distance > a.epsilon);
        assert!((a.epsilon - 0.3 * a.min_prototype_distance).abs() < 1e-15);
    }

    #[test]
    fn prototypes_are_separated() {
        let w = world();
        let facts = w.facts();
        for (i, f) in facts.iter().enumerate() {
            for g in &facts[i + 1..] {
                let d = distance(&w.prototype(f.entity, f.attribute), &w.prototype(g.entity, g.attribute));
                assert!(d > w.epsilon);
            }
        }
    }

    #[test]
    fn generated_records_validate() {
        let w = world();
        for t in generate_triplets(&w, 0, 500).unwrap() {
            let v = validate_triplet(&t, &w);
            assert!(v.is_empty(), "record {}: {v:?}", t.id);
            if t.shift == ShiftKind::Easy {
                assert_eq!(t.concepts.loc.overlap(&t.concepts.src), 0);
            }
        }
    }

    #[test]
    fn zero_radius_rephrase_is_identical() {
        let spec = WorldSpec {
            epsilon: Some(0.0),
            ..WorldSpec::default()
        };
        let w = generate_world(&spec).unwrap();
        let t = sample_triplet(&w, 3).unwrap();
        assert_eq!(t.rephrase, t.src);
        assert_eq!(t.image_rephrase, t.image);
    }

    #[test]
    fn tampering_is_reported() {
        let w = world();
        let t = sample_triplet(&w, 7).unwrap();
        let mut k = t.clone();
        k.facts.rephrase = k.facts.loc;
        k.concepts.rephrase = k.concepts.loc.clone();
        assert!(validate_triplet(&k, &w).iter().any(|m| m.contains("k mismatch")));

        let mut far = t.clone();
        for v in far.rephrase.iter_mut().take(w.spec.d_inv_txt()) {
            *v += w.epsilon;
        }
        assert!(validate_triplet(&far, &w)
            .iter()
            .any(|m| m.contains("outside semantic neighborhood")));
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = WorldSpec {
            epsilon: Some(-0.1),
            ..WorldSpec::default()
        };
        match generate_world(&spec) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "world.epsilon"),
            other => panic!("{other:?}"),
        }
        let w = world();
        let f = w.fact(0, 0);
        assert!(make_edit_triplet(&w, f, f.value, ShiftKind::Easy, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let w = world();
        let recs = generate_triplets(&w, 0, 50).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        export_jsonl(&w.spec, &recs, &p).unwrap();
        let (spec, back) = import_jsonl(&p).unwrap();
        assert_eq!(spec, w.spec);
        assert_eq!(back, recs);
        let p2 = dir.path().join("e.jsonl");
        export_jsonl(&spec, &back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());

        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        v.as_object_mut().unwrap().remove("alt");
        lines[2] = v.to_string();
        std::fs::write(&p, lines.join("\n")).unwrap();
        match import_jsonl(&p) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("alt"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn record_keys_match_layout() {
        let w = world();
        let t = sample_triplet(&w, 0).unwrap();
        let v = serde_json::to_value(&t).unwrap();
        for k in RECORD_KEYS {
            assert!(v.get(k).is_some(), "missing {k}");
        }
    }

    #[test]
    fn spurious_dimensions_carry_the_answer_only_when_correlated() {
        let chance = 1.0 / WorldSpec::default().n_values as f64;
        let mean_probe = |strength: f64| {
            let accs: Vec<f64> = (0..10)
                .map(|seed| {
                    let w = generate_world(&WorldSpec {
                        spurious_strength: strength,
                        seed,
                        ..WorldSpec::default()
                    })
                    .unwrap();
                    let records = generate_triplets(&w, 0, 400).unwrap();
                    spurious_probe_accuracy(&w, &records, 200, 0.5).unwrap()
                })
                .collect();
            accs.iter().sum::<f64>() / accs.len() as f64
        };
        let (off, on) = (mean_probe(0.0), mean_probe(1.0));
        assert!((off - chance).abs() <= 0.05, "ρ = 0 probe {off}");
        assert!(on > chance + 0.05, "ρ = 1 probe {on}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn spec() -> impl Strategy<Value = WorldSpec> {
            (0u64..10_000, 0.0f64..1.0, 0.0f64..=1.0, 0.05f64..0.45).prop_map(|(seed, rho, hard, eps)| WorldSpec {
                seed,
                spurious_strength: rho,
                hard_fraction: hard,
                epsilon_factor: eps,
                ..WorldSpec::default()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn every_record_validates(spec in spec(), start in 0usize..100_000) {
                let w = generate_world(&spec).unwrap();
                for t in generate_triplets(&w, start, 50).unwrap() {
                    let errs = validate_triplet(&t, &w);
                    prop_assert!(errs.is_empty(), "{errs:?}");
                }
            }

            #[test]
            fn same_spec_gives_same_bytes(spec in spec()) {
                let dir = tempfile::tempdir().unwrap();
                let write = |name: &str| {
                    let w = generate_world(&spec).unwrap();
                    let path = dir.path().join(name);
                    export_jsonl(&spec, &generate_triplets(&w, 0, 20).unwrap(), &path).unwrap();
                    std::fs::read(path).unwrap()
                };
                prop_assert_eq!(write("a.jsonl"), write("b.jsonl"));
            }
        }
    }
}
