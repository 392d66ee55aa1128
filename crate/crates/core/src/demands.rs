//! Synthetic semantic universe.
//!
//! Demands and object categories are tied together by latent prototypes: a
//! demand carries one prototype, a category owns one to four, and the
//! category satisfies the demand exactly when it owns the demand's
//! prototype. Text embeddings are fixed random linear images of the latent
//! vectors plus per-entity noise drawn once at creation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DdnError, Result};
use crate::ids::{CategoryId, DemandId, PrototypeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UniverseConfig {
    pub latent_dim: usize,
    pub n_prototypes: usize,
    /// Categories that may be placed in scenes.
    pub n_scene_categories: usize,
    pub n_demands: usize,
    /// Target mean number of scene categories satisfying a demand.
    pub target_satisfiers: f64,
    pub max_prototypes_per_category: usize,
    /// Every prototype gets at least this many owners overall, adding
    /// categories that never appear in scenes when the scene pool is short.
    pub min_total_satisfiers: usize,
    pub demand_dim: usize,
    pub object_dim: usize,
    pub demand_noise: f64,
    pub signature_noise: f64,
    pub demand_map_std: f64,
    pub object_map_std: f64,
    pub max_prototype_cosine: f64,
    pub max_attempts: usize,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            n_prototypes: 24,
            n_scene_categories: 60,
            n_demands: 200,
            target_satisfiers: 2.3,
            max_prototypes_per_category: 4,
            min_total_satisfiers: 10,
            demand_dim: 32,
            object_dim: 16,
            demand_noise: 0.05,
            signature_noise: 0.3,
            demand_map_std: 0.35,
            object_map_std: 0.15,
            max_prototype_cosine: 0.8,
            max_attempts: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
    /// Sorted, non-empty.
    pub prototypes: Vec<PrototypeId>,
    pub in_scene_pool: bool,
    pub signature: Vec<f64>,
    pub text_embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demand {
    pub id: DemandId,
    pub prototype: PrototypeId,
    pub tokens: Vec<String>,
    pub noise: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl Demand {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Universe {
    pub config: UniverseConfig,
    pub seed: u64,
    pub prototypes: Vec<Vec<f64>>,
    /// `demand_dim × latent_dim`, row-major rows.
    pub demand_map: Vec<Vec<f64>>,
    /// `object_dim × latent_dim`.
    pub object_map: Vec<Vec<f64>>,
    pub categories: Vec<Category>,
    pub demands: Vec<Demand>,
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "te", "vo", "sa", "ne", "pi", "do", "fu", "ga", "zi", "be", "mo", "ta",
];

fn pseudo_word(rng: &mut impl Rng) -> String {
    let n = rng.random_range(2..=3);
    (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
}

const TEMPLATES: [&[&str]; 4] = [
    &["i", "need", "something", "to"],
    &["i", "want", "to"],
    &["please", "find", "something", "that", "helps", "me"],
    &["i", "would", "like", "to"],
];

impl Universe {
    pub fn generate(config: &UniverseConfig, seed: u64) -> Result<Self> {
        let c = config;
        if c.n_prototypes < 2 || c.n_scene_categories < 2 || c.n_demands < 1 {
            return Err(DdnError::Invalid(
                "need at least 2 prototypes, 2 categories and 1 demand".into(),
            ));
        }
        if c.max_prototypes_per_category == 0 {
            return Err(DdnError::Invalid("categories must own a prototype".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // prototypes: unit vectors with bounded pairwise cosine
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(c.n_prototypes);
        let mut attempts = 0;
        while prototypes.len() < c.n_prototypes {
            attempts += 1;
            if attempts > c.max_attempts {
                return Err(DdnError::GenerationFailed(format!(
                    "could only place {} prototypes with cosine <= {}",
                    prototypes.len(),
                    c.max_prototype_cosine
                )));
            }
            let mut v = gaussian_vec(&mut rng, c.latent_dim, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            let ok = prototypes.iter().all(|p| {
                p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= c.max_prototype_cosine
            });
            if ok {
                prototypes.push(v);
            }
        }

        let demand_map: Vec<Vec<f64>> = (0..c.demand_dim)
            .map(|_| gaussian_vec(&mut rng, c.latent_dim, c.demand_map_std))
            .collect();
        let object_map: Vec<Vec<f64>> = (0..c.object_dim)
            .map(|_| gaussian_vec(&mut rng, c.latent_dim, c.object_map_std))
            .collect();

        // scene categories: ownership budget calibrated to the satisfier target
        let budget = ((c.target_satisfiers * c.n_prototypes as f64).round() as usize)
            .max(c.n_scene_categories)
            .min(c.n_scene_categories * c.max_prototypes_per_category);
        let mut owned: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); c.n_scene_categories];
        let mut protos: Vec<u32> = (0..c.n_prototypes as u32).collect();
        protos.shuffle(&mut rng);
        for (k, set) in owned.iter_mut().enumerate() {
            let p = if k < protos.len() {
                protos[k]
            } else {
                rng.random_range(0..c.n_prototypes as u32)
            };
            set.insert(p);
        }
        let mut assigned = c.n_scene_categories;
        let mut guard = 0;
        while assigned < budget && guard < c.max_attempts {
            guard += 1;
            let k = rng.random_range(0..c.n_scene_categories);
            if owned[k].len() >= c.max_prototypes_per_category {
                continue;
            }
            if owned[k].insert(rng.random_range(0..c.n_prototypes as u32)) {
                assigned += 1;
            }
        }

        // language-only categories until every prototype has enough owners
        let mut owner_count = vec![0usize; c.n_prototypes];
        for set in &owned {
            for &p in set {
                owner_count[p as usize] += 1;
            }
        }
        let mut extra: Vec<BTreeSet<u32>> = Vec::new();
        while owner_count.iter().any(|&n| n < c.min_total_satisfiers) {
            let size = rng.random_range(1..=c.max_prototypes_per_category.min(c.n_prototypes));
            let min = *owner_count.iter().min().expect("non-empty");
            let neediest: Vec<u32> = (0..c.n_prototypes as u32)
                .filter(|&p| owner_count[p as usize] == min)
                .collect();
            let mut set = BTreeSet::new();
            set.insert(neediest[rng.random_range(0..neediest.len())]);
            let mut short: Vec<u32> = (0..c.n_prototypes as u32)
                .filter(|&p| owner_count[p as usize] < c.min_total_satisfiers && !set.contains(&p))
                .collect();
            short.shuffle(&mut rng);
            for p in short.into_iter().take(size - 1) {
                set.insert(p);
            }
            for &p in &set {
                owner_count[p as usize] += 1;
            }
            extra.push(set);
        }

        let mut categories = Vec::with_capacity(owned.len() + extra.len());
        for (k, set) in owned.into_iter().chain(extra).enumerate() {
            let in_pool = k < c.n_scene_categories;
            let prototypes_owned: Vec<PrototypeId> = set.into_iter().map(PrototypeId).collect();
            let mut mean = vec![0.0; c.latent_dim];
            for p in &prototypes_owned {
                for (m, v) in mean.iter_mut().zip(&prototypes[p.0 as usize]) {
                    *m += v / prototypes_owned.len() as f64;
                }
            }
            let signature = gaussian_vec(&mut rng, c.object_dim, c.signature_noise);
            let text_embedding = mat_vec(&object_map, &mean)
                .into_iter()
                .zip(&signature)
                .map(|(a, b)| a + b)
                .collect();
            let name = format!("{}-{k:03}", pseudo_word(&mut rng));
            categories.push(Category {
                id: CategoryId(k as u32),
                name,
                prototypes: prototypes_owned,
                in_scene_pool: in_pool,
                signature,
                text_embedding,
            });
        }

        // demands: prototype drawn among those some scene category satisfies
        let pool_protos: Vec<u32> = (0..c.n_prototypes as u32)
            .filter(|p| {
                categories[..c.n_scene_categories]
                    .iter()
                    .any(|cat| cat.prototypes.contains(&PrototypeId(*p)))
            })
            .collect();
        if pool_protos.is_empty() {
            return Err(DdnError::GenerationFailed(
                "no prototype is satisfiable by a scene category".into(),
            ));
        }
        let vocab: Vec<Vec<String>> = (0..c.n_prototypes)
            .map(|_| (0..3).map(|_| pseudo_word(&mut rng)).collect())
            .collect();
        let mut demands = Vec::with_capacity(c.n_demands);
        for d in 0..c.n_demands {
            let p = pool_protos[rng.random_range(0..pool_protos.len())];
            let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
            let mut tokens: Vec<String> = template.iter().map(|s| s.to_string()).collect();
            let words = &vocab[p as usize];
            tokens.push(words[rng.random_range(0..words.len())].clone());
            tokens.push(words[rng.random_range(0..words.len())].clone());
            let noise = gaussian_vec(&mut rng, c.latent_dim, c.demand_noise);
            let latent: Vec<f64> = prototypes[p as usize]
                .iter()
                .zip(&noise)
                .map(|(a, b)| a + b)
                .collect();
            demands.push(Demand {
                id: DemandId(d as u32),
                prototype: PrototypeId(p),
                tokens,
                embedding: mat_vec(&demand_map, &latent),
                noise,
            });
        }

        Ok(Self {
            config: c.clone(),
            seed,
            prototypes,
            demand_map,
            object_map,
            categories,
            demands,
        })
    }

    pub fn demand(&self, id: DemandId) -> Result<&Demand> {
        self.demands.get(id.0 as usize).ok_or(DdnError::UnknownId {
            kind: "demand",
            id: u64::from(id.0),
        })
    }

    pub fn category(&self, id: CategoryId) -> Result<&Category> {
        self.categories.get(id.0 as usize).ok_or(DdnError::UnknownId {
            kind: "category",
            id: u64::from(id.0),
        })
    }

    /// The discriminator: does `category` satisfy `demand`?
    pub fn satisfies(&self, demand: DemandId, category: CategoryId) -> Result<bool> {
        let d = self.demand(demand)?;
        let c = self.category(category)?;
        Ok(c.prototypes.binary_search(&d.prototype).is_ok())
    }

    pub fn embed_demand(&self, id: DemandId) -> Result<&[f64]> {
        Ok(&self.demand(id)?.embedding)
    }

    pub fn embed_category_text(&self, id: CategoryId) -> Result<&[f64]> {
        Ok(&self.category(id)?.text_embedding)
    }

    /// Visual embedding of one observed instance: the text embedding plus fresh
    /// isotropic alignment noise.
    pub fn embed_instance_visual(
        &self,
        id: CategoryId,
        sigma_align: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let text = self.embed_category_text(id)?;
        if sigma_align == 0.0 {
            return Ok(text.to_vec());
        }
        let normal = Normal::new(0.0, sigma_align)
            .map_err(|e| DdnError::Invalid(format!("sigma_align: {e}")))?;
        Ok(text.iter().map(|t| t + normal.sample(rng)).collect())
    }

    pub fn scene_pool(&self) -> Vec<CategoryId> {
        self.categories
            .iter()
            .filter(|c| c.in_scene_pool)
            .map(|c| c.id)
            .collect()
    }

    pub fn demand_ids(&self) -> Vec<DemandId> {
        self.demands.iter().map(|d| d.id).collect()
    }

    /// All categories (scene or not) satisfying a demand.
    pub fn satisfiers(&self, demand: DemandId) -> Result<Vec<CategoryId>> {
        let p = self.demand(demand)?.prototype;
        Ok(self
            .categories
            .iter()
            .filter(|c| c.prototypes.binary_search(&p).is_ok())
            .map(|c| c.id)
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("universe serialization")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Demand → satisfying categories present in a category pool.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WgMappings(pub BTreeMap<DemandId, BTreeSet<CategoryId>>);

impl WgMappings {
    pub fn get(&self, d: DemandId) -> Option<&BTreeSet<CategoryId>> {
        self.0.get(&d)
    }

    pub fn demands(&self) -> impl Iterator<Item = DemandId> + '_ {
        self.0.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Demands satisfiable by at least one of the given categories.
    pub fn satisfiable_in(&self, present: &BTreeSet<CategoryId>) -> Vec<DemandId> {
        self.0
            .iter()
            .filter(|(_, cats)| !cats.is_disjoint(present))
            .map(|(d, _)| *d)
            .collect()
    }

    pub fn restrict(&self, demands: &[DemandId]) -> WgMappings {
        WgMappings(
            demands
                .iter()
                .filter_map(|d| self.0.get(d).map(|s| (*d, s.clone())))
                .collect(),
        )
    }
}

/// Demand → a fixed-size sample of satisfying categories from the whole universe.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LgMappings(pub BTreeMap<DemandId, Vec<CategoryId>>);

impl LgMappings {
    pub fn get(&self, d: DemandId) -> Option<&[CategoryId]> {
        self.0.get(&d).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn restrict(&self, demands: &[DemandId]) -> LgMappings {
        LgMappings(
            demands
                .iter()
                .filter_map(|d| self.0.get(d).map(|s| (*d, s.clone())))
                .collect(),
        )
    }
}

pub fn build_wg_mappings(u: &Universe, pool: &BTreeSet<CategoryId>) -> WgMappings {
    let mut out = BTreeMap::new();
    for d in &u.demands {
        let cats: BTreeSet<CategoryId> = pool
            .iter()
            .copied()
            .filter(|&c| u.satisfies(d.id, c).unwrap_or(false))
            .collect();
        if !cats.is_empty() {
            out.insert(d.id, cats);
        }
    }
    WgMappings(out)
}

pub fn build_lg_mappings(u: &Universe, n_lg: usize, seed: u64) -> LgMappings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for d in &u.demands {
        let mut sat = u.satisfiers(d.id).expect("demand from universe");
        if sat.len() < n_lg {
            log::warn!(
                "demand {} has {} satisfiers, fewer than the {} requested",
                d.id,
                sat.len(),
                n_lg
            );
        }
        sat.shuffle(&mut rng);
        sat.truncate(n_lg);
        sat.sort();
        out.insert(d.id, sat);
    }
    LgMappings(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemandSplit {
    pub train: Vec<DemandId>,
    pub test: Vec<DemandId>,
}

/// Disjoint train/test demand split, deterministic per seed.
pub fn split_demands(u: &Universe, n_train: usize, n_test: usize, seed: u64) -> Result<DemandSplit> {
    if n_train + n_test > u.demands.len() {
        return Err(DdnError::InsufficientDemands {
            requested: n_train + n_test,
            available: u.demands.len(),
        });
    }
    let mut ids = u.demand_ids();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..n_train + n_test].to_vec();
    train.sort();
    test.sort();
    Ok(DemandSplit { train, test })
}

/// Everything `gen-mappings` produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingsFile {
    pub wg: WgMappings,
    pub lg: LgMappings,
    pub split: DemandSplit,
}

/// Mean number of pool categories satisfying each demand.
pub fn mean_satisfiers_per_demand(u: &Universe, pool: &[CategoryId]) -> f64 {
    let total: usize = u
        .demands
        .iter()
        .map(|d| {
            pool.iter()
                .filter(|&&c| u.satisfies(d.id, c).unwrap_or(false))
                .count()
        })
        .sum();
    total as f64 / u.demands.len() as f64
}

/// Mean number of demands each pool category satisfies.
pub fn mean_demands_per_category(u: &Universe, pool: &[CategoryId]) -> f64 {
    let total: usize = pool
        .iter()
        .map(|&c| {
            u.demands
                .iter()
                .filter(|d| u.satisfies(d.id, c).unwrap_or(false))
                .count()
        })
        .sum();
    total as f64 / pool.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UniverseConfig {
        UniverseConfig {
            n_prototypes: 2,
            n_scene_categories: 2,
            n_demands: 2,
            target_satisfiers: 1.0,
            min_total_satisfiers: 1,
            ..UniverseConfig::default()
        }
    }

    #[test]
    fn two_by_two_universe_has_one_satisfier_each() {
        let u = Universe::generate(&tiny(), 5).unwrap();
        assert_eq!(u.categories.len(), 2);
        for c in &u.categories {
            assert_eq!(c.prototypes.len(), 1);
        }
        assert_ne!(u.categories[0].prototypes, u.categories[1].prototypes);
        for d in &u.demands {
            assert_eq!(u.satisfiers(d.id).unwrap().len(), 1);
        }
    }

    #[test]
    fn satisfies_is_prototype_membership() {
        let u = Universe::generate(&UniverseConfig::default(), 1).unwrap();
        let d = &u.demands[0];
        for c in &u.categories {
            assert_eq!(
                u.satisfies(d.id, c.id).unwrap(),
                c.prototypes.contains(&d.prototype)
            );
        }
        assert!(matches!(
            u.satisfies(DemandId(10_000), CategoryId(0)),
            Err(DdnError::UnknownId { kind: "demand", .. })
        ));
        assert!(u.satisfies(d.id, CategoryId(10_000)).is_err());
    }

    #[test]
    fn invariants_of_default_universe() {
        let u = Universe::generate(&UniverseConfig::default(), 3).unwrap();
        for (i, p) in u.prototypes.iter().enumerate() {
            let n: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            for q in &u.prototypes[..i] {
                assert!(p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() <= 0.8);
            }
        }
        for d in &u.demands {
            assert!(!d.tokens.is_empty());
            assert_eq!(d.embedding.len(), 32);
            assert!(u.satisfiers(d.id).unwrap().len() >= 10);
        }
        for c in &u.categories {
            assert!((1..=4).contains(&c.prototypes.len()));
            assert_eq!(c.text_embedding.len(), 16);
        }
    }

    #[test]
    fn wg_mapping_edge_cases() {
        let u = Universe::generate(&UniverseConfig::default(), 2).unwrap();
        assert!(build_wg_mappings(&u, &BTreeSet::new()).is_empty());
        let pool: BTreeSet<CategoryId> = u.scene_pool().into_iter().collect();
        let wg = build_wg_mappings(&u, &pool);
        for (d, cats) in &wg.0 {
            assert!(cats.is_subset(&pool));
            assert!(cats.iter().all(|&c| u.satisfies(*d, c).unwrap()));
        }
    }

    #[test]
    fn lg_mapping_is_deterministic_and_sound() {
        let u = Universe::generate(&UniverseConfig::default(), 2).unwrap();
        let a = build_lg_mappings(&u, 10, 9);
        assert_eq!(a, build_lg_mappings(&u, 10, 9));
        for (d, cats) in &a.0 {
            assert_eq!(cats.len(), 10);
            assert!(cats.iter().all(|&c| u.satisfies(*d, c).unwrap()));
        }
    }

    #[test]
    fn lg_returns_all_when_exactly_n() {
        let cfg = UniverseConfig {
            n_scene_categories: 24,
            target_satisfiers: 1.0,
            min_total_satisfiers: 10,
            max_prototypes_per_category: 1,
            ..UniverseConfig::default()
        };
        let u = Universe::generate(&cfg, 4).unwrap();
        let lg = build_lg_mappings(&u, 10, 1);
        for d in &u.demands {
            let sat = u.satisfiers(d.id).unwrap();
            assert_eq!(sat.len(), 10);
            assert_eq!(lg.get(d.id).unwrap(), sat.as_slice());
        }
    }

    #[test]
    fn split_sizes_and_errors() {
        let u = Universe::generate(&UniverseConfig::default(), 2).unwrap();
        let s = split_demands(&u, 80, 120, 5).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 120));
        assert_eq!(s, split_demands(&u, 80, 120, 5).unwrap());
        assert!(s.train.iter().all(|d| !s.test.contains(d)));
        assert!(matches!(
            split_demands(&u, 150, 60, 5),
            Err(DdnError::InsufficientDemands { .. })
        ));
    }

    #[test]
    fn visual_embedding_without_noise_is_text() {
        let u = Universe::generate(&UniverseConfig::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = u.embed_instance_visual(CategoryId(3), 0.0, &mut rng).unwrap();
        assert_eq!(v, u.categories[3].text_embedding);
        let v = u.embed_instance_visual(CategoryId(3), 0.1, &mut rng).unwrap();
        assert_eq!(v.len(), 16);
        assert_ne!(v, u.categories[3].text_embedding);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let u = Universe::generate(&UniverseConfig::default(), 11).unwrap();
        let back = Universe::from_json(&u.to_json()).unwrap();
        assert_eq!(back, u);
    }
}
