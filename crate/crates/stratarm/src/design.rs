//! Randomization designs: matched tuples, coarse strata, complete
//! randomization, varying propensities, and the group pairing that variance
//! estimation needs.
//!
//! A design partitions units into groups of k and treats exactly a units per
//! group, uniformly over the C(k, a) subsets, independently across groups.
//! Group membership depends only on the matching covariates psi and the seed,
//! never on outcomes. The homogeneity score
//!
//!   (1/n) sum_g sum_{i,j in g} ||psi_i - psi_j||^2
//!
//! (ordered pairs, n = covered units) summarizes how tight the groups are;
//! smaller is better and it drives the asymptotics of the within-group
//! estimators downstream.

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ExperimentData, Propensity};
use crate::error::{Error, Result};

/// One randomization group: member unit indices and the assignment
/// probability its treated count is drawn with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Group {
    pub units: Vec<usize>,
    pub prop: Propensity,
}

/// A realized design: groups, the drawn treatment vector over all n units
/// (excluded units are left at 0), the homogeneity score of the grouping, the
/// seed it was drawn with, and any units left outside the estimation sample
/// by the divisibility padding policy.
#[derive(Debug, Clone)]
pub struct Design {
    pub groups: Vec<Group>,
    pub treatment: Vec<u8>,
    pub homogeneity_score: f64,
    pub seed: u64,
    pub excluded: Vec<usize>,
}

impl Design {
    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    /// The single propensity shared by every group, when there is one.
    pub fn constant_propensity(&self) -> Option<Propensity> {
        let first = self.groups.first()?.prop;
        self.groups.iter().all(|g| g.prop == first).then_some(first)
    }

    /// Units covered by some group, ascending.
    pub fn covered_units(&self) -> Vec<usize> {
        let mut units: Vec<usize> = self.groups.iter().flat_map(|g| g.units.iter().copied()).collect();
        units.sort_unstable();
        units
    }

    /// Per-unit group index; None for excluded units.
    pub fn unit_groups(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.n()];
        for (g, group) in self.groups.iter().enumerate() {
            for &u in &group.units {
                map[u] = Some(g);
            }
        }
        map
    }

    /// Checks that the design indexes exactly the rows of `data`, that every
    /// unit sits in at most one group, and that each group's realized treated
    /// count in `data.d` matches its propensity numerator.
    pub fn validate_for(&self, data: &ExperimentData) -> Result<()> {
        if self.n() != data.n {
            return Err(Error::GroupStructure(format!(
                "design built for {} units, data has {}",
                self.n(),
                data.n
            )));
        }
        let mut seen = vec![false; data.n];
        for group in &self.groups {
            if group.units.len() != group.prop.k as usize {
                return Err(Error::GroupStructure(format!(
                    "group of size {} under propensity {}",
                    group.units.len(),
                    group.prop
                )));
            }
            for &u in &group.units {
                if u >= data.n {
                    return Err(Error::GroupStructure(format!("unit {u} out of range")));
                }
                if seen[u] {
                    return Err(Error::GroupStructure(format!("unit {u} appears in two groups")));
                }
                seen[u] = true;
            }
            if data.d.len() == data.n {
                let treated: u32 = group.units.iter().map(|&u| u32::from(data.d[u])).sum();
                if treated != group.prop.a {
                    return Err(Error::GroupStructure(format!(
                        "group has {treated} treated units, propensity {} demands {}",
                        group.prop, group.prop.a
                    )));
                }
            }
        }
        Ok(())
    }

    /// Restricts data and design to the covered units, renumbering them
    /// 0..m. Returns data and design unchanged when nothing is excluded.
    pub fn restricted(&self, data: &ExperimentData) -> Result<(ExperimentData, Design)> {
        if self.excluded.is_empty() && self.covered_units().len() == data.n {
            return Ok((data.clone(), self.clone()));
        }
        let covered = self.covered_units();
        let mut new_index = vec![usize::MAX; data.n.max(self.n())];
        for (new, &old) in covered.iter().enumerate() {
            new_index[old] = new;
        }
        let sub = data.subset(&covered)?;
        let groups = self
            .groups
            .iter()
            .map(|g| Group {
                units: g.units.iter().map(|&u| new_index[u]).collect(),
                prop: g.prop,
            })
            .collect();
        let treatment = covered.iter().map(|&u| self.treatment[u]).collect();
        Ok((
            sub,
            Design {
                groups,
                treatment,
                homogeneity_score: self.homogeneity_score,
                seed: self.seed,
                excluded: vec![],
            },
        ))
    }
}

/// Serialized form: `a`/`k` are present when all groups share one propensity;
/// otherwise `group_propensities` carries one a/k pair per group.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DesignRepr {
    groups: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    group_propensities: Vec<(u32, u32)>,
    treatment: Vec<u8>,
    homogeneity_score: f64,
    seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    excluded: Vec<usize>,
}

impl Serialize for Design {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let constant = self.constant_propensity();
        let repr = DesignRepr {
            groups: self.groups.iter().map(|g| g.units.clone()).collect(),
            a: constant.map(|p| p.a),
            k: constant.map(|p| p.k),
            group_propensities: if constant.is_some() {
                vec![]
            } else {
                self.groups.iter().map(|g| (g.prop.a, g.prop.k)).collect()
            },
            treatment: self.treatment.clone(),
            homogeneity_score: self.homogeneity_score,
            seed: self.seed,
            excluded: self.excluded.clone(),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Design {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        let repr = DesignRepr::deserialize(deserializer)?;
        let props: Vec<Propensity> = if repr.group_propensities.is_empty() {
            let (a, k) = match (repr.a, repr.k) {
                (Some(a), Some(k)) => (a, k),
                _ => return Err(D::Error::custom("design lacks both a/k and group_propensities")),
            };
            let p = Propensity::new(a, k).map_err(D::Error::custom)?;
            vec![p; repr.groups.len()]
        } else {
            if repr.group_propensities.len() != repr.groups.len() {
                return Err(D::Error::custom("group_propensities length mismatch"));
            }
            repr.group_propensities
                .iter()
                .map(|&(a, k)| Propensity::new(a, k).map_err(D::Error::custom))
                .collect::<std::result::Result<_, _>>()?
        };
        Ok(Design {
            groups: repr
                .groups
                .into_iter()
                .zip(props)
                .map(|(units, prop)| Group { units, prop })
                .collect(),
            treatment: repr.treatment,
            homogeneity_score: repr.homogeneity_score,
            seed: repr.seed,
            excluded: repr.excluded,
        })
    }
}

// === grouping kernels ===

/// Row-major copy of selected psi rows for cache-friendly distance loops.
struct Points {
    flat: Vec<f64>,
    dim: usize,
}

impl Points {
    fn from_rows(psi: &DMatrix<f64>, rows: &[usize]) -> Self {
        let dim = psi.ncols();
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            for j in 0..dim {
                flat.push(psi[(r, j)]);
            }
        }
        Points { flat, dim }
    }

    fn len(&self) -> usize {
        if self.dim == 0 { 0 } else { self.flat.len() / self.dim }
    }

    fn sq_dist(&self, i: usize, j: usize) -> f64 {
        let a = &self.flat[i * self.dim..(i + 1) * self.dim];
        let b = &self.flat[j * self.dim..(j + 1) * self.dim];
        let mut acc = 0.0;
        for t in 0..self.dim {
            let diff = a[t] - b[t];
            acc += diff * diff;
        }
        acc
    }
}

/// Groups `local_ids` (indices into `pts`) into blocks of k by covariate
/// proximity. Returns (groups of local ids, leftover local ids).
///
/// One matching dimension: sort by value and cut consecutive blocks, which is
/// optimal for k = 2. Higher dimensions: repeatedly take the still-unmatched
/// unit whose nearest unmatched neighbor is farthest away (the hardest unit
/// to place) and bind it with its k - 1 nearest unmatched neighbors. All
/// distance ties break toward the lowest unit index.
fn match_into_groups(pts: &Points, k: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = pts.len();
    let n_groups = n / k;
    if n_groups == 0 {
        return (vec![], (0..n).collect());
    }
    if pts.dim == 1 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            pts.flat[i]
                .partial_cmp(&pts.flat[j])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        let groups = order.chunks_exact(k).map(|c| c.to_vec()).collect();
        let leftover = order[n_groups * k..].to_vec();
        return (groups, leftover);
    }

    let mut alive = vec![true; n];
    let mut alive_count = n;
    // Cached nearest alive neighbor per unit; entries go stale when the
    // neighbor is grouped and are recomputed lazily during the scan.
    let mut nn: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); n];
    let recompute = |i: usize, alive: &[bool]| -> (f64, usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..n {
            if j != i && alive[j] {
                let d = pts.sq_dist(i, j);
                if d < best.0 || (d == best.0 && j < best.1) {
                    best = (d, j);
                }
            }
        }
        best
    };
    for i in 0..n {
        nn[i] = recompute(i, &alive);
    }

    let mut groups = Vec::with_capacity(n_groups);
    while alive_count >= k {
        // Hardest unit: maximal distance to its nearest alive neighbor.
        let mut anchor = usize::MAX;
        let mut anchor_dist = f64::NEG_INFINITY;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            if nn[i].1 == usize::MAX || !alive[nn[i].1] {
                nn[i] = recompute(i, &alive);
            }
            if nn[i].0 > anchor_dist {
                anchor_dist = nn[i].0;
                anchor = i;
            }
        }
        // k - 1 nearest alive neighbors of the anchor.
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| alive[j] && j != anchor)
            .map(|j| (pts.sq_dist(anchor, j), j))
            .collect();
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        let mut members = vec![anchor];
        members.extend(cand.iter().take(k - 1).map(|&(_, j)| j));
        members.sort_unstable();
        for &m in &members {
            alive[m] = false;
        }
        alive_count -= k;
        groups.push(members);
    }
    let leftover: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    (groups, leftover)
}

/// Ordered-pair homogeneity score over the given groups, normalized by the
/// number of covered units.
fn homogeneity_score(pts: &Points, groups: &[Vec<usize>]) -> f64 {
    let covered: usize = groups.iter().map(|g| g.len()).sum();
    if covered == 0 || pts.dim == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for g in groups {
        for (i, &u) in g.iter().enumerate() {
            for &v in &g[i + 1..] {
                total += 2.0 * pts.sq_dist(u, v);
            }
        }
    }
    total / covered as f64
}

/// Draws exactly a treated slots per group, uniformly and independently.
fn draw_treatment(groups: &[Group], n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut d = vec![0u8; n];
    for group in groups {
        let picks = sample_indices(rng, group.units.len(), group.prop.a as usize);
        for idx in picks.iter() {
            d[group.units[idx]] = 1;
        }
    }
    d
}

/// Matched-tuples design: groups of k built from psi by the proximity rules
/// of [`match_into_groups`], then a-of-k treatment drawn per group.
///
/// When k does not divide n, the n mod k leftover units are excluded from the
/// estimation sample and reported in `Design::excluded`. The grouping is a
/// deterministic function of psi; only the treatment draw consumes the seed.
pub fn assign_matched_tuples(psi: &DMatrix<f64>, prop: Propensity, seed: u64) -> Result<Design> {
    let n = psi.nrows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if psi.ncols() == 0 {
        return Err(Error::Invalid("matched tuples need at least one matching covariate".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let pts = Points::from_rows(psi, &all);
    let k = prop.k as usize;
    let (local_groups, leftover) = match_into_groups(&pts, k);
    let score = homogeneity_score(&pts, &local_groups);
    let groups: Vec<Group> = local_groups
        .into_iter()
        .map(|units| Group { units, prop })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let treatment = draw_treatment(&groups, n, &mut rng);
    Ok(Design { groups, treatment, homogeneity_score: score, seed, excluded: leftover })
}

/// Complete randomization expressed in group form: units are shuffled and cut
/// into arbitrary groups of k, so exactly a * floor(n/k) units end up
/// treated. No covariates are involved; the homogeneity score is 0 by the
/// convention that an empty psi has zero distances.
pub fn assign_complete(n: usize, prop: Propensity, seed: u64) -> Result<Design> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = prop.k as usize;
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates via the rand shuffle trait.
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let n_groups = n / k;
    let groups: Vec<Group> = order[..n_groups * k]
        .chunks_exact(k)
        .map(|c| {
            let mut units = c.to_vec();
            units.sort_unstable();
            Group { units, prop }
        })
        .collect();
    let mut leftover = order[n_groups * k..].to_vec();
    leftover.sort_unstable();
    let treatment = draw_treatment(&groups, n, &mut rng);
    Ok(Design { groups, treatment, homogeneity_score: 0.0, seed, excluded: leftover })
}

/// Coarse stratification: units sharing a label are grouped together at
/// random (labels are the only covariate, so groups never cross strata and
/// the label-based homogeneity score is exactly 0). Per-stratum leftovers are
/// pooled into the excluded set. Errors with [`Error::StratumTooSmall`] when
/// any stratum holds fewer than k units.
pub fn assign_coarse(labels: &[String], prop: Propensity, seed: u64) -> Result<Design> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let k = prop.k as usize;
    let mut strata: Vec<(String, Vec<usize>)> = Vec::new();
    let mut sorted_labels: Vec<&String> = labels.iter().collect();
    sorted_labels.sort();
    sorted_labels.dedup();
    for label in sorted_labels {
        let units: Vec<usize> = (0..n).filter(|&i| &labels[i] == label).collect();
        strata.push((label.clone(), units));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    let mut excluded = Vec::new();
    use rand::seq::SliceRandom;
    for (label, mut units) in strata {
        if units.len() < k {
            return Err(Error::StratumTooSmall(label));
        }
        units.shuffle(&mut rng);
        let full = units.len() / k;
        for chunk in units[..full * k].chunks_exact(k) {
            let mut members = chunk.to_vec();
            members.sort_unstable();
            groups.push(Group { units: members, prop });
        }
        excluded.extend_from_slice(&units[full * k..]);
    }
    excluded.sort_unstable();
    let treatment = draw_treatment(&groups, n, &mut rng);
    Ok(Design { groups, treatment, homogeneity_score: 0.0, seed, excluded })
}

/// Double stratification with unit-level propensities: units are first
/// stratified by their assignment probability (props[i] for unit i), then
/// matched into tuples of k_l within each propensity stratum, and treated at
/// a_l of k_l per group. Strata are processed in ascending (k, a) order so
/// the draw is deterministic. Per-stratum leftovers are pooled into the
/// excluded set; a stratum smaller than its own k_l is an error.
pub fn assign_varying_propensity(
    psi: &DMatrix<f64>,
    props: &[Propensity],
    seed: u64,
) -> Result<Design> {
    let n = psi.nrows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if props.len() != n {
        return Err(Error::Invalid(format!(
            "{} propensities for {n} units",
            props.len()
        )));
    }
    if psi.ncols() == 0 {
        return Err(Error::Invalid("matched tuples need at least one matching covariate".into()));
    }
    let mut kinds: Vec<Propensity> = props.to_vec();
    kinds.sort_by_key(|p| (p.k, p.a));
    kinds.dedup();
    let mut groups = Vec::new();
    let mut excluded = Vec::new();
    let mut score_num = 0.0;
    let mut covered = 0usize;
    for prop in kinds {
        let members: Vec<usize> = (0..n).filter(|&i| props[i] == prop).collect();
        let k = prop.k as usize;
        if members.len() < k {
            return Err(Error::StratumTooSmall(prop.to_string()));
        }
        let pts = Points::from_rows(psi, &members);
        let (local_groups, local_leftover) = match_into_groups(&pts, k);
        score_num += homogeneity_score(&pts, &local_groups)
            * local_groups.iter().map(|g| g.len()).sum::<usize>() as f64;
        covered += local_groups.iter().map(|g| g.len()).sum::<usize>();
        for local in local_groups {
            let mut units: Vec<usize> = local.iter().map(|&l| members[l]).collect();
            units.sort_unstable();
            groups.push(Group { units, prop });
        }
        excluded.extend(local_leftover.iter().map(|&l| members[l]));
    }
    excluded.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let treatment = draw_treatment(&groups, n, &mut rng);
    let score = if covered == 0 { 0.0 } else { score_num / covered as f64 };
    Ok(Design { groups, treatment, homogeneity_score: score, seed, excluded })
}

// === group pairing ===

/// A fixed-point-free matching of groups to groups, used to form the unions
/// over which the variance estimator takes within-union cross products. With
/// an odd group count one mutually nearest triple absorbs the parity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupPairing {
    /// Paired group indices, each pair sorted, pairs sorted by first member.
    pub pairs: Vec<(usize, usize)>,
    /// Present only when the group count is odd.
    pub triple: Option<(usize, usize, usize)>,
    /// Mean squared centroid distance between matched groups, normalized by
    /// covered units; triple members contribute their average distance to the
    /// other two.
    pub centroid_score: f64,
}

impl GroupPairing {
    /// Group-index unions: every pair, plus the triple when present.
    pub fn unions(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.pairs.iter().map(|&(x, y)| vec![x, y]).collect();
        if let Some((x, y, z)) = self.triple {
            out.push(vec![x, y, z]);
        }
        out
    }

    /// Number of groups this pairing covers.
    pub fn group_count(&self) -> usize {
        2 * self.pairs.len() + if self.triple.is_some() { 3 } else { 0 }
    }
}

/// Exact minimum-weight perfect matching by subset dynamic programming.
/// Feasible up to about 20 nodes; weights are squared centroid distances.
fn exact_matching(w: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let g = w.len();
    let full: usize = (1 << g) - 1;
    let mut cost = vec![f64::INFINITY; 1 << g];
    let mut choice = vec![(0usize, 0usize); 1 << g];
    cost[0] = 0.0;
    for mask in 1..=full {
        let i = mask.trailing_zeros() as usize;
        if mask & (1 << i) == 0 {
            continue;
        }
        let rest = mask & !(1 << i);
        let mut m = rest;
        while m != 0 {
            let j = m.trailing_zeros() as usize;
            m &= m - 1;
            let prev = rest & !(1 << j);
            let c = cost[prev] + w[i][j];
            if c < cost[mask] {
                cost[mask] = c;
                choice[mask] = (i, j);
            }
        }
    }
    let mut pairs = Vec::with_capacity(g / 2);
    let mut mask = full;
    while mask != 0 {
        let (i, j) = choice[mask];
        pairs.push((i.min(j), i.max(j)));
        mask &= !(1 << i);
        mask &= !(1 << j);
    }
    pairs
}

/// Greedy nearest-centroid matching with deterministic 2-opt refinement.
/// Scans nodes in ascending index, binds each to its nearest unmatched
/// neighbor, then swaps pair assignments while any swap lowers total weight.
fn greedy_matching(w: &[Vec<f64>], nodes: &[usize]) -> Vec<(usize, usize)> {
    let mut taken = vec![false; w.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(nodes.len() / 2);
    for &i in nodes {
        if taken[i] {
            continue;
        }
        let mut best: Option<usize> = None;
        for &j in nodes {
            if j != i && !taken[j] {
                let better = match best {
                    None => true,
                    Some(b) => w[i][j] < w[i][b],
                };
                if better {
                    best = Some(j);
                }
            }
        }
        if let Some(j) = best {
            taken[i] = true;
            taken[j] = true;
            pairs.push((i.min(j), i.max(j)));
        }
    }
    // 2-opt: exchanging partners between two pairs must not lower the cost.
    let mut improved = true;
    let mut sweeps = 0;
    while improved && sweeps < 60 {
        improved = false;
        sweeps += 1;
        for x in 0..pairs.len() {
            for y in x + 1..pairs.len() {
                let (a, b) = pairs[x];
                let (c, d) = pairs[y];
                let current = w[a][b] + w[c][d];
                let swap_ac = w[a][c] + w[b][d];
                let swap_ad = w[a][d] + w[b][c];
                if swap_ac < current - 1e-15 && swap_ac <= swap_ad {
                    pairs[x] = (a.min(c), a.max(c));
                    pairs[y] = (b.min(d), b.max(d));
                    improved = true;
                } else if swap_ad < current - 1e-15 {
                    pairs[x] = (a.min(d), a.max(d));
                    pairs[y] = (b.min(c), b.max(c));
                    improved = true;
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Threshold below which pairing is solved exactly by subset DP.
const EXACT_PAIRING_LIMIT: usize = 20;
/// Threshold below which an odd group count picks its triple by brute force.
const EXACT_TRIPLE_LIMIT: usize = 400;

/// Pairs groups of a design by centroid proximity in psi space.
///
/// Even group counts of at most 20 are matched exactly (minimum total squared
/// centroid distance); larger instances use greedy matching plus 2-opt.
/// An odd group count first extracts the mutually nearest triple (minimum sum
/// of pairwise centroid distances, brute force over triples up to 400 groups,
/// greedy leftovers beyond) and pairs the rest. Needs at least two groups.
pub fn pair_groups(design: &Design, psi: &DMatrix<f64>) -> Result<GroupPairing> {
    let g = design.groups.len();
    if g < 2 {
        return Err(Error::SingleGroup);
    }
    if psi.nrows() != design.n() {
        return Err(Error::GroupStructure(format!(
            "psi has {} rows, design covers {} units",
            psi.nrows(),
            design.n()
        )));
    }
    let dim = psi.ncols();
    let centroids: Vec<Vec<f64>> = design
        .groups
        .iter()
        .map(|grp| {
            let mut c = vec![0.0; dim];
            for &u in &grp.units {
                for t in 0..dim {
                    c[t] += psi[(u, t)];
                }
            }
            for v in &mut c {
                *v /= grp.units.len() as f64;
            }
            c
        })
        .collect();
    let sq = |x: &[f64], y: &[f64]| -> f64 {
        x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let w: Vec<Vec<f64>> = (0..g)
        .map(|i| (0..g).map(|j| sq(&centroids[i], &centroids[j])).collect())
        .collect();

    let mut triple = None;
    let mut remaining: Vec<usize> = (0..g).collect();
    if g % 2 == 1 {
        if g == 3 {
            triple = Some((0, 1, 2));
            remaining.clear();
        } else if g <= EXACT_TRIPLE_LIMIT {
            let mut best = (f64::INFINITY, (0, 1, 2));
            for x in 0..g {
                for y in x + 1..g {
                    for z in y + 1..g {
                        let c = w[x][y] + w[x][z] + w[y][z];
                        if c < best.0 {
                            best = (c, (x, y, z));
                        }
                    }
                }
            }
            triple = Some(best.1);
            let (x, y, z) = best.1;
            remaining.retain(|&i| i != x && i != y && i != z);
        }
        // Large odd counts: pair greedily and let the three leftovers form
        // the triple below.
    }

    let pairs = if triple.is_none() && g % 2 == 1 {
        // Beyond the brute-force limit the triple choice stops mattering for
        // the asymptotics; take the three highest-index groups.
        let t = (g - 3, g - 2, g - 1);
        triple = Some(t);
        remaining.retain(|&i| i != t.0 && i != t.1 && i != t.2);
        greedy_matching(&w, &remaining)
    } else if remaining.len() <= EXACT_PAIRING_LIMIT {
        let map: Vec<usize> = remaining.clone();
        let sub: Vec<Vec<f64>> = map.iter().map(|&i| map.iter().map(|&j| w[i][j]).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = exact_matching(&sub)
            .into_iter()
            .map(|(x, y)| {
                let (a, b) = (map[x], map[y]);
                (a.min(b), a.max(b))
            })
            .collect();
        pairs.sort_unstable();
        pairs
    } else {
        greedy_matching(&w, &remaining)
    };

    let covered: usize = design.groups.iter().map(|grp| grp.units.len()).sum();
    let mut score = 0.0;
    for &(x, y) in &pairs {
        // Both directions of the pair, matching the ordered-group sum.
        score += 2.0 * w[x][y];
    }
    if let Some((x, y, z)) = triple {
        score += w[x][y] + w[x][z] + w[y][z];
    }
    let centroid_score = if covered == 0 { 0.0 } else { score / covered as f64 };
    Ok(GroupPairing { pairs, triple, centroid_score })
}

/// Convenience: per-unit propensity lookup. Errors if any unit is uncovered.
pub fn unit_propensities(design: &Design) -> Result<Vec<Propensity>> {
    let map = design.unit_groups();
    map.iter()
        .enumerate()
        .map(|(u, g)| match g {
            Some(gi) => Ok(design.groups[*gi].prop),
            None => Err(Error::DegeneratePropensity(format!(
                "unit {u} is not covered by any group"
            ))),
        })
        .collect()
}

/// Builds a design directly from user-provided group labels and realized
/// treatments, for data that arrives already randomized. All groups must
/// share one size k and one treated count a with gcd(a, k) = 1.
pub fn design_from_labels(labels: &[String], d: &[u8], psi: &DMatrix<f64>) -> Result<Design> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if d.len() != n {
        return Err(Error::GroupStructure("treatment length mismatch".into()));
    }
    let mut order: Vec<&String> = labels.iter().collect();
    order.sort();
    order.dedup();
    let mut sizes = std::collections::BTreeSet::new();
    let mut treated_counts = std::collections::BTreeSet::new();
    let mut groups = Vec::new();
    for label in order {
        let units: Vec<usize> = (0..n).filter(|&i| &labels[i] == label).collect();
        sizes.insert(units.len());
        treated_counts.insert(units.iter().map(|&u| usize::from(d[u])).sum::<usize>());
        groups.push(units);
    }
    if sizes.len() != 1 || treated_counts.len() != 1 {
        return Err(Error::GroupStructure(
            "labeled groups must share one size and one treated count".into(),
        ));
    }
    let k = *sizes.iter().next().unwrap();
    let a = *treated_counts.iter().next().unwrap();
    let prop = Propensity::from_counts(a, k).map_err(|_| {
        Error::GroupStructure(format!("treated count {a} of {k} is not a valid group propensity"))
    })?;
    if prop.a as usize != a || prop.k as usize != k {
        return Err(Error::GroupStructure(format!(
            "{a} treated of {k} units per group is not in lowest terms"
        )));
    }
    let groups: Vec<Group> = groups.into_iter().map(|units| Group { units, prop }).collect();
    let all: Vec<usize> = (0..n).collect();
    let pts = Points::from_rows(psi, &all);
    let local: Vec<Vec<usize>> = groups.iter().map(|grp| grp.units.clone()).collect();
    let score = homogeneity_score(&pts, &local);
    Ok(Design {
        groups,
        treatment: d.to_vec(),
        homogeneity_score: score,
        seed: 0,
        excluded: vec![],
    })
}
