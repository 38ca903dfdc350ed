//! Customized retrieval pool construction: collaborative groups from
//! embedding clustering, attribute groups from hierarchical partition, and the
//! binary router choosing between them per entity.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::trie::TriePool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    User,
    Item,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityProfile {
    pub entity_id: String,
    pub kind: EntityKind,
    pub embedding: Option<Vec<f64>>,
    /// (name, value) pairs ordered from general to specific.
    pub attributes: Vec<(String, String)>,
    pub interaction_count: u64,
    pub old_knowledge: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Collaborative,
    Attribute,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Collaborative => "collaborative",
            Scheme::Attribute => "attribute",
        })
    }
}

/// Pool identity, e.g. `collaborative:0`, `attribute:A/A1` or `global`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupKey(pub String);

impl GroupKey {
    pub fn new(scheme: Scheme, group: impl fmt::Display) -> Self {
        Self(format!("{scheme}:{group}"))
    }

    pub fn global() -> Self {
        Self("global".to_string())
    }

    pub fn random(index: usize) -> Self {
        Self(format!("random:{index}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Entity id → pool group.
pub type GroupAssignment = BTreeMap<String, GroupKey>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterStrategy {
    /// Collaborative when interactions reach the threshold and an embedding exists.
    DefaultThreshold,
    /// Users to collaborative pools, items to attribute pools.
    ByKind,
    FixedCollaborative,
    FixedAttribute,
}

impl FromStr for RouterStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default-threshold" => Ok(Self::DefaultThreshold),
            "by-kind" => Ok(Self::ByKind),
            "fixed-collaborative" => Ok(Self::FixedCollaborative),
            "fixed-attribute" => Ok(Self::FixedAttribute),
            other => Err(Error::config("router", format!("unknown router strategy `{other}`"))),
        }
    }
}

pub const DEFAULT_INTERACTION_THRESHOLD: u64 = 10;

/// The binary router.
pub fn route(entity: &EntityProfile, strategy: RouterStrategy, interaction_threshold: u64) -> Scheme {
    match strategy {
        RouterStrategy::FixedCollaborative => Scheme::Collaborative,
        RouterStrategy::FixedAttribute => Scheme::Attribute,
        RouterStrategy::ByKind => match entity.kind {
            EntityKind::User => Scheme::Collaborative,
            EntityKind::Item => Scheme::Attribute,
        },
        RouterStrategy::DefaultThreshold => {
            if entity.interaction_count < interaction_threshold {
                Scheme::Attribute
            } else if entity.embedding.is_none() {
                warn!(
                    "entity {} has {} interactions but no embedding; routing to attribute pool",
                    entity.entity_id, entity.interaction_count
                );
                Scheme::Attribute
            } else {
                Scheme::Collaborative
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Objective after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, sq_dist(point, &centroids[0]));
    for (j, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's k-means from `num_groups` distinct seeded input points.
pub fn kmeans(
    points: &[Vec<f64>],
    num_groups: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::input("k-means on an empty point set"));
    }
    if num_groups == 0 || num_groups > points.len() {
        return Err(Error::input(format!(
            "cannot form {num_groups} groups from {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    if let Some(i) = points.iter().position(|p| p.len() != dim) {
        return Err(Error::input(format!(
            "point {i} has dimension {}, expected {dim}",
            points[i].len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init: Vec<usize> = sample(&mut rng, points.len(), num_groups).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<Vec<f64>> = init.iter().map(|&i| points[i].clone()).collect();

    let mut assignments = vec![0usize; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut objective = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (j, d) = nearest(p, &centroids);
            *a = j;
            objective += d;
        }
        history.push(objective);
        if iterations >= max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; num_groups];
        let mut counts = vec![0usize; num_groups];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut moved: f64 = 0.0;
        let mut new_centroids = Vec::with_capacity(num_groups);
        for (j, (sum, &count)) in sums.into_iter().zip(&counts).enumerate() {
            let c = if count == 0 {
                centroids[j].clone()
            } else {
                sum.into_iter().map(|s| s / count as f64).collect()
            };
            new_centroids.push(c);
        }
        // empty clusters take the point farthest from its own centroid
        for j in (0..num_groups).filter(|&j| counts[j] == 0) {
            let far = (0..points.len())
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &new_centroids[assignments[a]]);
                    let db = sq_dist(&points[b], &new_centroids[assignments[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("non-empty points");
            new_centroids[j] = points[far].clone();
        }
        for (old, new) in centroids.iter().zip(&new_centroids) {
            moved = moved.max(sq_dist(old, new).sqrt());
        }
        centroids = new_centroids;
        if moved <= tol {
            // final assignment against the converged centroids
            let mut objective = 0.0;
            for (a, p) in assignments.iter_mut().zip(points) {
                let (j, d) = nearest(p, &centroids);
                *a = j;
                objective += d;
            }
            history.push(objective);
            break;
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        objective_history: history,
        iterations,
    })
}

/// Per-point group index from k-means.
pub fn kmeans_cluster(
    points: &[Vec<f64>],
    num_groups: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<Vec<usize>> {
    Ok(kmeans(points, num_groups, seed, max_iters, tol)?.assignments)
}

/// Groups entities by their most general attribute, re-splitting any group
/// larger than `size_threshold` by the next attribute level. Group ids are the
/// attribute-value path joined with `/`.
pub fn attribute_partition(
    entities: &[&EntityProfile],
    size_threshold: usize,
) -> Result<BTreeMap<String, Vec<String>>> {
    if let Some(e) = entities.iter().find(|e| e.attributes.is_empty()) {
        return Err(Error::input(format!("entity {} has no attributes", e.entity_id)));
    }
    let mut out = BTreeMap::new();
    split_level(entities, 0, String::new(), size_threshold, &mut out);
    Ok(out)
}

fn split_level(
    members: &[&EntityProfile],
    level: usize,
    path: String,
    threshold: usize,
    out: &mut BTreeMap<String, Vec<String>>,
) {
    let mut by_value: BTreeMap<&str, Vec<&EntityProfile>> = BTreeMap::new();
    let mut exhausted = Vec::new();
    for &e in members {
        match e.attributes.get(level) {
            Some((_, value)) => by_value.entry(value.as_str()).or_default().push(e),
            None => exhausted.push(e.entity_id.clone()),
        }
    }
    if !exhausted.is_empty() {
        out.entry(path.clone()).or_default().extend(exhausted);
    }
    for (value, group) in by_value {
        let child = if path.is_empty() {
            value.to_string()
        } else {
            format!("{path}/{value}")
        };
        let deeper = group.iter().any(|e| e.attributes.len() > level + 1);
        if group.len() > threshold && deeper {
            split_level(&group, level + 1, child, threshold, out);
        } else {
            out.entry(child)
                .or_default()
                .extend(group.iter().map(|e| e.entity_id.clone()));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingParams {
    pub router: RouterStrategy,
    pub interaction_threshold: u64,
    pub collaborative_groups: usize,
    pub attribute_size_threshold: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self {
            router: RouterStrategy::DefaultThreshold,
            interaction_threshold: DEFAULT_INTERACTION_THRESHOLD,
            collaborative_groups: 3,
            attribute_size_threshold: 50,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
        }
    }
}

/// Routes every entity and forms collaborative and attribute groups.
pub fn assign_customized(
    entities: &[EntityProfile],
    params: &GroupingParams,
    seed: u64,
) -> Result<GroupAssignment> {
    let mut collab = Vec::new();
    let mut attr = Vec::new();
    for e in entities {
        let scheme = route(e, params.router, params.interaction_threshold);
        // collaborative routing without an embedding cannot be clustered
        match (scheme, &e.embedding) {
            (Scheme::Collaborative, Some(_)) => collab.push(e),
            (Scheme::Collaborative, None) => {
                warn!("entity {} has no embedding; using its attribute group", e.entity_id);
                attr.push(e)
            }
            (Scheme::Attribute, _) => attr.push(e),
        }
    }
    let mut out = GroupAssignment::new();
    if !collab.is_empty() {
        let points: Vec<Vec<f64>> = collab
            .iter()
            .map(|e| e.embedding.clone().expect("filtered above"))
            .collect();
        let g = params.collaborative_groups.min(points.len()).max(1);
        let groups = kmeans_cluster(&points, g, seed, params.kmeans_max_iters, params.kmeans_tol)?;
        for (e, g) in collab.iter().zip(groups) {
            out.insert(e.entity_id.clone(), GroupKey::new(Scheme::Collaborative, g));
        }
    }
    for (group, members) in attribute_partition(&attr, params.attribute_size_threshold)? {
        for id in members {
            out.insert(id, GroupKey::new(Scheme::Attribute, &group));
        }
    }
    Ok(out)
}

/// Every entity in one pool.
pub fn assign_global(entities: &[EntityProfile]) -> GroupAssignment {
    entities
        .iter()
        .map(|e| (e.entity_id.clone(), GroupKey::global()))
        .collect()
}

/// Seeded uniform assignment into `num_groups` groups.
pub fn assign_random(entities: &[EntityProfile], num_groups: usize, seed: u64) -> GroupAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = num_groups.max(1);
    entities
        .iter()
        .map(|e| {
            let k = rng.random_range(0..g);
            (e.entity_id.clone(), GroupKey::random(k))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolBuildParams {
    pub vocab_size: usize,
    pub max_branch_depth: usize,
    /// Uniform subsample cap on knowledge entries per pool.
    pub max_pool_entries: Option<usize>,
}

/// One trie pool per group, holding the old knowledge of its members.
pub fn build_pools(
    entities: &[EntityProfile],
    assignments: &GroupAssignment,
    params: &PoolBuildParams,
    seed: u64,
) -> Result<BTreeMap<GroupKey, TriePool>> {
    let mut entries: BTreeMap<&GroupKey, Vec<&[TokenId]>> = BTreeMap::new();
    for e in entities {
        let key = assignments
            .get(&e.entity_id)
            .ok_or_else(|| Error::input(format!("entity {} has no group assignment", e.entity_id)))?;
        let list = entries.entry(key).or_default();
        list.extend(e.old_knowledge.iter().map(Vec::as_slice));
    }
    let mut pools = BTreeMap::new();
    for (key, mut texts) in entries {
        if let Some(cap) = params.max_pool_entries {
            if texts.len() > cap {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(&key.to_string()));
                let mut keep = sample(&mut rng, texts.len(), cap).into_vec();
                keep.sort_unstable();
                texts = keep.into_iter().map(|i| texts[i]).collect();
            }
        }
        let mut pool = TriePool::new(key.to_string(), params.vocab_size, params.max_branch_depth);
        for text in texts.into_iter().filter(|t| !t.is_empty()) {
            pool.insert_text(text)?;
        }
        pools.insert(key.clone(), pool);
    }
    Ok(pools)
}

// Stable per-group seed perturbation.
fn fxhash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entity(id: &str, kind: EntityKind, attrs: &[(&str, &str)], interactions: u64) -> EntityProfile {
        EntityProfile {
            entity_id: id.to_string(),
            kind,
            embedding: Some(vec![0.0, 0.0]),
            attributes: attrs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            interaction_count: interactions,
            old_knowledge: vec![],
        }
    }

    #[test]
    fn kmeans_separates_two_clusters() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]];
        for seed in 0..20 {
            let g = kmeans_cluster(&pts, 2, seed, 50, 1e-9).unwrap();
            assert_eq!(g[0], g[1]);
            assert_eq!(g[2], g[3]);
            assert_ne!(g[0], g[2]);
        }
    }

    #[test]
    fn kmeans_one_group_per_point() {
        let pts = vec![vec![1.0], vec![5.0], vec![9.0]];
        let r = kmeans(&pts, 3, 7, 10, 1e-9).unwrap();
        let mut g = r.assignments.clone();
        g.sort_unstable();
        g.dedup();
        assert_eq!(g.len(), 3);
        assert_eq!(*r.objective_history.last().unwrap(), 0.0);
    }

    #[test]
    fn kmeans_single_group_is_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 6.0]];
        let r = kmeans(&pts, 1, 0, 10, 1e-12).unwrap();
        assert_eq!(r.assignments, vec![0, 0]);
        assert_eq!(r.centroids[0], vec![2.0, 4.0]);
    }

    #[test]
    fn kmeans_input_errors() {
        assert!(kmeans(&[], 1, 0, 10, 1e-6).is_err());
        assert!(kmeans(&[vec![1.0]], 2, 0, 10, 1e-6).is_err());
        assert!(kmeans(&[vec![1.0], vec![1.0, 2.0]], 1, 0, 10, 1e-6).is_err());
    }

    #[test]
    fn partition_under_threshold() {
        let mut es = Vec::new();
        for i in 0..5 {
            es.push(entity(&format!("a{i}"), EntityKind::Item, &[("category", "A")], 0));
        }
        for i in 0..3 {
            es.push(entity(&format!("b{i}"), EntityKind::Item, &[("category", "B")], 0));
        }
        let refs: Vec<&EntityProfile> = es.iter().collect();
        let p = attribute_partition(&refs, 10).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p["A"].len(), 5);
        assert_eq!(p["B"].len(), 3);
    }

    #[test]
    fn partition_recurses_once() {
        let mut es = Vec::new();
        for i in 0..12 {
            let sub = if i < 7 { "A1" } else { "A2" };
            es.push(entity(&format!("e{i}"), EntityKind::Item, &[("category", "A"), ("subcategory", sub)], 0));
        }
        let refs: Vec<&EntityProfile> = es.iter().collect();
        let p = attribute_partition(&refs, 10).unwrap();
        assert_eq!(p.keys().collect::<Vec<_>>(), vec!["A/A1", "A/A2"]);
        assert_eq!(p["A/A1"].len(), 7);
        assert_eq!(p["A/A2"].len(), 5);
    }

    #[test]
    fn partition_levels_exhausted() {
        let es: Vec<_> = (0..12)
            .map(|i| entity(&format!("e{i}"), EntityKind::Item, &[("category", "A"), ("subcategory", "A1")], 0))
            .collect();
        let refs: Vec<&EntityProfile> = es.iter().collect();
        let p = attribute_partition(&refs, 10).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p["A/A1"].len(), 12);
    }

    #[test]
    fn partition_requires_attributes() {
        let e = entity("x", EntityKind::Item, &[], 0);
        assert!(attribute_partition(&[&e], 10).is_err());
    }

    #[test]
    fn router_strategies() {
        let cold = entity("u", EntityKind::User, &[("c", "A")], 0);
        assert_eq!(route(&cold, RouterStrategy::DefaultThreshold, 10), Scheme::Attribute);
        let warm = entity("u", EntityKind::User, &[("c", "A")], 500);
        assert_eq!(route(&warm, RouterStrategy::DefaultThreshold, 10), Scheme::Collaborative);
        let mut no_emb = warm.clone();
        no_emb.embedding = None;
        assert_eq!(route(&no_emb, RouterStrategy::DefaultThreshold, 10), Scheme::Attribute);
        assert_eq!(route(&cold, RouterStrategy::ByKind, 10), Scheme::Collaborative);
        let item = entity("i", EntityKind::Item, &[("c", "A")], 500);
        assert_eq!(route(&item, RouterStrategy::ByKind, 10), Scheme::Attribute);
        assert_eq!(route(&item, RouterStrategy::FixedCollaborative, 10), Scheme::Collaborative);
        assert_eq!(route(&warm, RouterStrategy::FixedAttribute, 10), Scheme::Attribute);
    }

    fn with_knowledge(id: &str, texts: Vec<Vec<TokenId>>) -> EntityProfile {
        let mut e = entity(id, EntityKind::User, &[("c", "A")], 0);
        e.old_knowledge = texts;
        e
    }

    #[test]
    fn build_pools_counts_entries() {
        let es = vec![
            with_knowledge("a", vec![vec![1, 2], vec![3, 4], vec![5]]),
            with_knowledge("b", vec![vec![6], vec![7, 8]]),
        ];
        let mut asg = GroupAssignment::new();
        asg.insert("a".into(), GroupKey::new(Scheme::Attribute, "x"));
        asg.insert("b".into(), GroupKey::new(Scheme::Attribute, "y"));
        let params = PoolBuildParams {
            vocab_size: 10,
            max_branch_depth: 8,
            max_pool_entries: None,
        };
        let pools = build_pools(&es, &asg, &params, 1).unwrap();
        let sizes: Vec<u64> = pools.values().map(TriePool::size_entries).collect();
        assert_eq!(sizes, vec![3, 2]);

        let capped = PoolBuildParams {
            max_pool_entries: Some(1),
            ..params
        };
        let p1 = build_pools(&es[..1], &asg, &capped, 9).unwrap();
        let p2 = build_pools(&es[..1], &asg, &capped, 9).unwrap();
        let pool = p1.values().next().unwrap();
        assert_eq!(pool.size_entries(), 1);
        assert_eq!(pool.to_bytes(), p2.values().next().unwrap().to_bytes());
    }

    #[test]
    fn build_pools_requires_assignment() {
        let es = vec![with_knowledge("a", vec![vec![1]])];
        let params = PoolBuildParams {
            vocab_size: 10,
            max_branch_depth: 8,
            max_pool_entries: None,
        };
        assert!(build_pools(&es, &GroupAssignment::new(), &params, 0).is_err());
    }
}
