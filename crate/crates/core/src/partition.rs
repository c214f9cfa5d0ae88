//! Client shards: IID round-robin splits and Dirichlet label-skew splits.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    #[serde(default = "default_clients")]
    pub n_clients: usize,
    #[serde(default = "default_mode")]
    pub mode: PartitionMode,
    /// Dirichlet concentration; ignored for IID.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_clients() -> usize {
    10
}
fn default_mode() -> PartitionMode {
    PartitionMode::Iid
}
fn default_alpha() -> f64 {
    0.5
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            n_clients: default_clients(),
            mode: default_mode(),
            alpha: default_alpha(),
            seed: 0,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 2 {
            return Err(Error::Config(format!(
                "n_clients must be at least 2, got {}",
                self.n_clients
            )));
        }
        if self.mode == PartitionMode::Dirichlet && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "dirichlet alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// One client's private data, as indices into the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    /// Ascending indices into the training dataset.
    pub members: Vec<usize>,
    pub sample_ids: Vec<String>,
    pub label_histogram: BTreeMap<String, usize>,
}

impl ClientShard {
    fn build(client_id: usize, mut members: Vec<usize>, train: &Dataset) -> Self {
        members.sort_unstable();
        let sample_ids = members
            .iter()
            .map(|&i| train.samples[i].sample_id.clone())
            .collect();
        let label_histogram =
            crate::corpus::category_histogram(members.iter().map(|&i| train.samples[i].category()));
        ClientShard {
            client_id,
            members,
            sample_ids,
            label_histogram,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn partition(train: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    match spec.mode {
        PartitionMode::Iid => partition_iid(train, spec),
        PartitionMode::Dirichlet => partition_dirichlet(train, spec),
    }
}

fn members_by_category(train: &Dataset) -> BTreeMap<&str, Vec<usize>> {
    let mut by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.samples.iter().enumerate() {
        by_cat.entry(s.category()).or_default().push(i);
    }
    by_cat
}

fn check_size(train: &Dataset, spec: &PartitionSpec) -> Result<()> {
    spec.validate()?;
    if train.len() < spec.n_clients {
        return Err(Error::Partition(format!(
            "{} samples cannot fill {} client shards",
            train.len(),
            spec.n_clients
        )));
    }
    Ok(())
}

/// Round-robin within every category after a seeded shuffle. The dealing
/// position carries over between categories so total sizes differ by at most
/// one.
pub fn partition_iid(train: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    check_size(train, spec)?;
    let n = spec.n_clients;
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut offset = 0;
    for (cat_idx, (_, mut members)) in members_by_category(train).into_iter().enumerate() {
        let mut rng = rng::stream(spec.seed, &[rng::TAG_PARTITION, cat_idx as u64]);
        members.shuffle(&mut rng);
        for (j, idx) in members.iter().enumerate() {
            assigned[(offset + j) % n].push(*idx);
        }
        offset = (offset + members.len()) % n;
    }
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(c, m)| ClientShard::build(c, m, train))
        .collect())
}

/// Draw from a symmetric Dirichlet(alpha) over `n` outcomes by normalising
/// independent Gamma(alpha, 1) draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every draw underflowed: put the mass on the largest one
        let best = draws
            .iter()
            .enumerate()
            .fold(0, |b, (i, g)| if *g > draws[b] { i } else { b });
        (0..n).map(|i| if i == best { 1.0 } else { 0.0 }).collect()
    }
}

/// Integer counts summing to `total` that follow `proportions`
/// (largest-remainder rounding, ties to the lower index).
pub fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-category Dirichlet label skew.
///
/// For every category (in sorted order) proportions are drawn from
/// Dirichlet(alpha) and the category's shuffled samples are dealt out in
/// contiguous runs of the largest-remainder counts. Empty shards are then
/// filled by moving the lowest sample id from the largest shard.
pub fn partition_dirichlet(train: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    check_size(train, spec)?;
    let n = spec.n_clients;
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut draw_rng = rng::stream(spec.seed, &[rng::TAG_PARTITION, u64::MAX]);
    for (cat_idx, (_, mut members)) in members_by_category(train).into_iter().enumerate() {
        let proportions = sample_dirichlet(spec.alpha, n, &mut draw_rng);
        let counts = largest_remainder(members.len(), &proportions);
        let mut rng = rng::stream(spec.seed, &[rng::TAG_PARTITION, cat_idx as u64]);
        members.shuffle(&mut rng);
        let mut start = 0;
        for (client, &k) in counts.iter().enumerate() {
            assigned[client].extend_from_slice(&members[start..start + k]);
            start += k;
        }
    }
    repair_empty(&mut assigned, train);
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(c, m)| ClientShard::build(c, m, train))
        .collect())
}

fn repair_empty(assigned: &mut [Vec<usize>], train: &Dataset) {
    while let Some(empty) = assigned.iter().position(Vec::is_empty) {
        let donor = (0..assigned.len())
            .max_by(|&a, &b| assigned[a].len().cmp(&assigned[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let (pos, _) = assigned[donor]
            .iter()
            .enumerate()
            .min_by(|a, b| {
                train.samples[*a.1]
                    .sample_id
                    .cmp(&train.samples[*b.1].sample_id)
            })
            .expect("donor has samples");
        let moved = assigned[donor].remove(pos);
        assigned[empty].push(moved);
    }
}

/// Category shares of one histogram over a fixed category list.
pub fn shares(hist: &BTreeMap<String, usize>, categories: &[String]) -> Vec<f64> {
    let total: usize = hist.values().sum();
    categories
        .iter()
        .map(|c| {
            if total == 0 {
                0.0
            } else {
                hist.get(c).copied().unwrap_or(0) as f64 / total as f64
            }
        })
        .collect()
}

/// Mean over clients of the chi-square distance between the client's label
/// distribution and the global one.
pub fn chi_square_heterogeneity(shards: &[ClientShard], global: &BTreeMap<String, usize>) -> f64 {
    let cats: Vec<String> = global.keys().cloned().collect();
    let g = shares(global, &cats);
    let total: f64 = shards
        .iter()
        .map(|s| {
            shares(&s.label_histogram, &cats)
                .iter()
                .zip(&g)
                .filter(|(_, gc)| **gc > 0.0)
                .map(|(p, gc)| (p - gc).powi(2) / gc)
                .sum::<f64>()
        })
        .sum();
    total / shards.len() as f64
}

/// Mean over clients of (largest category share - smallest category share).
pub fn mean_label_skew(shards: &[ClientShard], categories: &[String]) -> f64 {
    let total: f64 = shards
        .iter()
        .map(|s| {
            let sh = shares(&s.label_histogram, categories);
            let max = sh.iter().cloned().fold(f64::MIN, f64::max);
            let min = sh.iter().cloned().fold(f64::MAX, f64::min);
            max - min
        })
        .sum();
    total / shards.len() as f64
}

#[derive(Serialize)]
struct ShardRecord<'a> {
    client_id: usize,
    sample_id: &'a str,
}

/// One `{"client_id", "sample_id"}` line per assigned sample.
pub fn write_shard_manifest<W: Write>(shards: &[ClientShard], out: &mut W) -> std::io::Result<()> {
    for shard in shards {
        for id in &shard.sample_ids {
            let rec = ShardRecord {
                client_id: shard.client_id,
                sample_id: id,
            };
            serde_json::to_writer(&mut *out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::sample;
    use crate::corpus::{Label, SECURE};
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashSet;

    fn dataset(counts: &[(&str, usize)]) -> Dataset {
        let mut samples = Vec::new();
        for (cat, n) in counts {
            for _ in 0..*n {
                let id = samples.len();
                samples.push(if *cat == SECURE {
                    sample(id, Label::Secure, None, &["x"])
                } else {
                    sample(id, Label::Vulnerable, Some(cat), &["x"])
                });
            }
        }
        Dataset::new(samples)
    }

    fn spec(n: usize, mode: PartitionMode, alpha: f64, seed: u64) -> PartitionSpec {
        PartitionSpec {
            n_clients: n,
            mode,
            alpha,
            seed,
        }
    }

    fn assert_cover(shards: &[ClientShard], n: usize) {
        let mut seen = HashSet::new();
        for s in shards {
            assert!(!s.is_empty());
            for &m in &s.members {
                assert!(seen.insert(m), "duplicate {m}");
            }
        }
        assert_eq!(seen.len(), n);
    }

    #[test]
    fn iid_even_split() {
        let ds = dataset(&[(SECURE, 60), ("CWE-20", 40)]);
        let shards = partition_iid(&ds, &spec(10, PartitionMode::Iid, 0.0, 3)).unwrap();
        assert!(shards.iter().all(|s| s.len() == 10));
        assert_cover(&shards, 100);
        assert_eq!(
            shards,
            partition_iid(&ds, &spec(10, PartitionMode::Iid, 0.0, 3)).unwrap()
        );
    }

    #[test]
    fn iid_category_counts_by_round_robin() {
        let ds = dataset(&[("CWE-20", 25), (SECURE, 33)]);
        let shards = partition_iid(&ds, &spec(10, PartitionMode::Iid, 0.0, 11)).unwrap();
        // oracle: 25 dealt over 10 seats -> 5 seats get 3, 5 seats get 2
        let mut per_client: Vec<usize> = shards
            .iter()
            .map(|s| s.label_histogram.get("CWE-20").copied().unwrap_or(0))
            .collect();
        per_client.sort();
        assert_eq!(per_client, [2, 2, 2, 2, 2, 3, 3, 3, 3, 3]);
        let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn too_few_samples() {
        let ds = dataset(&[(SECURE, 3)]);
        assert!(matches!(
            partition_iid(&ds, &spec(5, PartitionMode::Iid, 0.0, 0)),
            Err(Error::Partition(_))
        ));
        assert!(spec(1, PartitionMode::Iid, 0.0, 0).validate().is_err());
        assert!(spec(3, PartitionMode::Dirichlet, 0.0, 0)
            .validate()
            .is_err());
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(10, &[0.25, 0.25, 0.5]), [3, 2, 5]);
        assert_eq!(largest_remainder(7, &[1.0 / 3.0; 3]), [3, 2, 2]);
        assert_eq!(largest_remainder(0, &[0.5, 0.5]), [0, 0]);
    }

    #[test]
    fn dirichlet_huge_alpha_matches_global_shares() {
        let ds = dataset(&[(SECURE, 1000), ("CWE-20", 1000)]);
        for seed in 0..5 {
            let shards =
                partition_dirichlet(&ds, &spec(10, PartitionMode::Dirichlet, 1e6, seed)).unwrap();
            assert_cover(&shards, 2000);
            for s in &shards {
                let share = s.label_histogram[SECURE] as f64 / s.len() as f64;
                assert!((share - 0.5).abs() < 0.02, "seed {seed}: {share}");
            }
        }
    }

    #[test]
    fn dirichlet_repairs_empty_shards() {
        // tiny alpha on one category concentrates everything on one client
        let ds = dataset(&[("CWE-20", 30)]);
        let shards =
            partition_dirichlet(&ds, &spec(10, PartitionMode::Dirichlet, 0.01, 5)).unwrap();
        assert_cover(&shards, 30);
    }

    #[test]
    fn dirichlet_skew_exceeds_iid_and_matches_multinomial_simulation() {
        let ds = dataset(&[(SECURE, 1000), ("CWE-20", 1000)]);
        let cats = vec![SECURE.to_string(), "CWE-20".to_string()];
        let seeds = 0..40u64;
        let mut dir_skew = 0.0;
        let mut iid_skew = 0.0;
        for seed in seeds.clone() {
            let d =
                partition_dirichlet(&ds, &spec(10, PartitionMode::Dirichlet, 0.5, seed)).unwrap();
            let i = partition_iid(&ds, &spec(10, PartitionMode::Iid, 0.0, seed)).unwrap();
            dir_skew += mean_label_skew(&d, &cats);
            iid_skew += mean_label_skew(&i, &cats);
        }
        let n = seeds.end as f64;
        dir_skew /= n;
        iid_skew /= n;

        // oracle: every sample independently picks a client from its
        // category's Dirichlet(0.5) proportions, 2000 simulated populations
        let mut rng = rng::stream(12345, &[]);
        let gamma = Gamma::new(0.5, 1.0).unwrap();
        let mut sim = 0.0;
        let trials = 2000;
        for _ in 0..trials {
            let mut counts = vec![[0usize; 2]; 10];
            for (c, _) in cats.iter().enumerate() {
                let g: Vec<f64> = (0..10).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = g.iter().sum();
                for _ in 0..1000 {
                    let mut u: f64 = rng.random::<f64>() * total;
                    let mut k = 0;
                    while k < 9 && u >= g[k] {
                        u -= g[k];
                        k += 1;
                    }
                    counts[k][c] += 1;
                }
            }
            let mut skew = 0.0;
            let mut clients = 0.0;
            for cc in &counts {
                let t = cc[0] + cc[1];
                if t > 0 {
                    skew += (cc[0] as f64 - cc[1] as f64).abs() / t as f64;
                    clients += 1.0;
                }
            }
            sim += skew / clients;
        }
        sim /= trials as f64;

        assert!(iid_skew < 1e-12, "iid skew {iid_skew}");
        assert!(dir_skew > iid_skew + 0.2, "dirichlet skew {dir_skew}");
        assert!(
            (dir_skew - sim).abs() < 0.08,
            "dirichlet skew {dir_skew} vs simulation {sim}"
        );
    }

    #[test]
    fn heterogeneity_decreases_with_alpha() {
        let ds = dataset(&[
            (SECURE, 600),
            ("CWE-20", 200),
            ("CWE-125", 150),
            ("CWE-None", 50),
        ]);
        let global = ds.label_histogram();
        let mean_chi = |alpha: f64| {
            (0..20u64)
                .map(|seed| {
                    let s =
                        partition_dirichlet(&ds, &spec(10, PartitionMode::Dirichlet, alpha, seed))
                            .unwrap();
                    chi_square_heterogeneity(&s, &global)
                })
                .sum::<f64>()
                / 20.0
        };
        let (a, b, c) = (mean_chi(0.1), mean_chi(0.5), mean_chi(100.0));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn manifest_lines() {
        let ds = dataset(&[(SECURE, 4)]);
        let shards = partition_iid(&ds, &spec(2, PartitionMode::Iid, 0.0, 0)).unwrap();
        let mut buf = Vec::new();
        write_shard_manifest(&shards, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("{\"client_id\":0,\"sample_id\":\"s0000"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn partitions_are_disjoint_covers(a in 1usize..60, b in 0usize..60, c in 0usize..30,
                                          n in 2usize..12, alpha in 0.05..50.0f64,
                                          seed in any::<u64>(), dirichlet in any::<bool>()) {
            let ds = dataset(&[(SECURE, a), ("CWE-1", b), ("CWE-2", c)]);
            prop_assume!(ds.len() >= n);
            let mode = if dirichlet { PartitionMode::Dirichlet } else { PartitionMode::Iid };
            let sp = spec(n, mode, alpha, seed);
            let shards = partition(&ds, &sp).unwrap();
            prop_assert_eq!(shards.len(), n);
            assert_cover(&shards, ds.len());
            prop_assert_eq!(&shards, &partition(&ds, &sp).unwrap());
        }
    }
}
