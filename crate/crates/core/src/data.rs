//! Synthetic global data, non-IID client partitions and the server's
//! auxiliary dataset.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Gamma;

use crate::diffusion::{ancestral_sample_seeded, Denoiser, GaussianSampler, GaussianSpec, NoiseSchedule, Sample};
use crate::error::{Error, Result};
use crate::net::{DenoiserConfig, MlpDenoiser, ParamVector};
use crate::rng;

pub type Label = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub gaussian: GaussianSpec,
    pub label: Label,
}

/// Labelled Gaussian mixture standing in for a class-structured dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    components: Vec<MixtureComponent>,
}

impl MixtureSpec {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("mixture has no components".into()));
        }
        let dim = components[0].gaussian.dim();
        let mut total = 0.0;
        let mut labels = std::collections::BTreeSet::new();
        for c in &components {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "component weight {} must be positive",
                    c.weight
                )));
            }
            if c.gaussian.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.gaussian.dim(),
                });
            }
            if !labels.insert(c.label) {
                return Err(Error::InvalidArgument(format!("duplicate label {}", c.label)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        Ok(MixtureSpec { components })
    }

    /// Equal-weight isotropic components with labels `0..means.len()`.
    pub fn isotropic(means: &[Vec<f64>], sigma: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        let comps = means
            .iter()
            .enumerate()
            .map(|(i, m)| {
                Ok(MixtureComponent {
                    weight: w,
                    gaussian: GaussianSpec::isotropic(m.clone(), sigma)?,
                    label: i as Label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps)
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].gaussian.dim()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.components.iter().map(|c| c.label).collect()
    }

    /// Exact mean and covariance of the mixture.
    pub fn moments(&self) -> (Vec<f64>, crate::linalg::Matrix) {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for c in &self.components {
            for (m, v) in mean.iter_mut().zip(&c.gaussian.mean) {
                *m += c.weight * v;
            }
        }
        let mut cov = crate::linalg::Matrix::zeros(d);
        for c in &self.components {
            for i in 0..d {
                for j in 0..d {
                    let di = c.gaussian.mean[i] - mean[i];
                    let dj = c.gaussian.mean[j] - mean[j];
                    let v = cov.get(i, j) + c.weight * (c.gaussian.covariance.get(i, j) + di * dj);
                    cov.set(i, j, v);
                }
            }
        }
        (mean, cov)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub point: Sample,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub samples: Vec<LabeledSample>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn points(&self) -> Vec<Sample> {
        self.samples.iter().map(|s| s.point.clone()).collect()
    }

    pub fn label_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.label).or_insert(0) += 1;
        }
        counts
    }
}

/// Unlabelled synthetic samples held by the server.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuxiliaryDataset {
    pub samples: Vec<Sample>,
    pub per_client_counts: Vec<usize>,
}

impl AuxiliaryDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `m` i.i.d. draws: a component by weight, then a point from that Gaussian.
pub fn generate_global_dataset<R: Rng + ?Sized>(
    spec: &MixtureSpec,
    m: usize,
    rng: &mut R,
) -> Result<Vec<LabeledSample>> {
    if m == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    let weights: Vec<f64> = spec.components.iter().map(|c| c.weight).collect();
    let chooser = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(format!("mixture weights: {e}")))?;
    let samplers: Vec<GaussianSampler> = spec
        .components
        .iter()
        .map(|c| c.gaussian.sampler())
        .collect::<Result<_>>()?;
    Ok((0..m)
        .map(|_| {
            let k = chooser.sample(rng);
            LabeledSample {
                point: samplers[k].sample(rng),
                label: spec.components[k].label,
            }
        })
        .collect())
}

fn sorted_by_label(data: &[LabeledSample]) -> Vec<LabeledSample> {
    let mut sorted = data.to_vec();
    sorted.sort_by_key(|s| s.label);
    sorted
}

/// Label-sorted data cut into `2N` contiguous groups; each client receives two
/// groups chosen by a random permutation.
///
/// When `m` is not a multiple of `2N` the first `m mod 2N` groups carry one
/// extra sample.
pub fn partition_shard<R: Rng + ?Sized>(
    data: &[LabeledSample],
    n_clients: usize,
    rng: &mut R,
) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    let groups = 2 * n_clients;
    if data.len() < groups {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot form {groups} shards",
            data.len()
        )));
    }
    let sorted = sorted_by_label(data);
    let base = sorted.len() / groups;
    let extra = sorted.len() % groups;
    let mut bounds = Vec::with_capacity(groups + 1);
    bounds.push(0);
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        bounds.push(bounds[g] + size);
    }

    let mut order: Vec<usize> = (0..groups).collect();
    order.shuffle(rng);
    Ok((0..n_clients)
        .map(|i| {
            let mut samples = Vec::new();
            for &g in &order[2 * i..2 * i + 2] {
                samples.extend_from_slice(&sorted[bounds[g]..bounds[g + 1]]);
            }
            ClientDataset {
                client_id: i,
                samples,
            }
        })
        .collect())
}

/// Splits `total` into integer counts proportional to `weights` by the
/// largest-remainder method; ties go to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut rest = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Per-class Dirichlet(α, …, α) proportions over clients, rounded by largest
/// remainder. Class samples are shuffled before allocation.
///
/// Clients may end up empty for small α.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    data: &[LabeledSample],
    n_clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<ClientDataset>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must be > 0")));
    }
    if n_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    let mut by_label: BTreeMap<Label, Vec<LabeledSample>> = BTreeMap::new();
    for s in data {
        by_label.entry(s.label).or_default().push(s.clone());
    }
    let mut clients: Vec<ClientDataset> = (0..n_clients)
        .map(|i| ClientDataset {
            client_id: i,
            samples: Vec::new(),
        })
        .collect();

    for (_, mut samples) in by_label {
        samples.shuffle(rng);
        let proportions: Vec<f64> = if n_clients == 1 {
            vec![1.0]
        } else {
            // Dirichlet(α·1) as normalised Gamma(α, 1) draws
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|e| Error::InvalidArgument(format!("dirichlet: {e}")))?;
            let mut p: Vec<f64> = (0..n_clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= total);
            // very small α can underflow every gamma draw
            if p.iter().any(|v| !v.is_finite()) || p.iter().sum::<f64>() <= 0.0 {
                p = vec![0.0; n_clients];
                p[rng.random_range(0..n_clients)] = 1.0;
            }
            p
        };
        let counts = largest_remainder(samples.len(), &proportions);
        let mut start = 0;
        for (client, &c) in clients.iter_mut().zip(&counts) {
            client.samples.extend_from_slice(&samples[start..start + c]);
            start += c;
        }
    }
    Ok(clients)
}

/// Mean total-variation distance between each nonempty client's label
/// distribution and the pooled one.
pub fn label_heterogeneity(clients: &[ClientDataset]) -> f64 {
    let mut global: BTreeMap<Label, usize> = BTreeMap::new();
    let mut total = 0usize;
    for c in clients {
        for (l, n) in c.label_counts() {
            *global.entry(l).or_insert(0) += n;
            total += n;
        }
    }
    let nonempty: Vec<&ClientDataset> = clients.iter().filter(|c| !c.is_empty()).collect();
    if nonempty.is_empty() || total == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for c in &nonempty {
        let counts = c.label_counts();
        let m = c.len() as f64;
        let tv: f64 = global
            .iter()
            .map(|(l, &g)| {
                let local = *counts.get(l).unwrap_or(&0) as f64 / m;
                (local - g as f64 / total as f64).abs()
            })
            .sum::<f64>()
            * 0.5;
        acc += tv;
    }
    acc / nonempty.len() as f64
}

/// `round(ρ · m_i)`, half away from zero.
pub fn auxiliary_count(rho: f64, m_i: usize) -> usize {
    (rho * m_i as f64).round() as usize
}

/// Samples `round(ρ·m_i)` points from each client's denoiser and concatenates
/// them in client order. Client `i` samples on a stream derived from `(seed, i)`.
pub fn build_auxiliary_dataset_with<D: Denoiser + Sync>(
    models: &[(D, usize)],
    rho: f64,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<AuxiliaryDataset> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!("aux ratio {rho} must be in (0, 1]")));
    }
    let mut aux = AuxiliaryDataset::default();
    for (i, (model, m_i)) in models.iter().enumerate() {
        let count = auxiliary_count(rho, *m_i);
        if count == 0 && *m_i > 0 {
            log::warn!("client {i} with {m_i} samples contributes no auxiliary samples");
        }
        let client_seed = rng::derive_seed(seed, &[rng::tag::AUX, i as u64]);
        aux.samples
            .extend(ancestral_sample_seeded(model, schedule, count, client_seed));
        aux.per_client_counts.push(count);
    }
    Ok(aux)
}

/// Auxiliary dataset from warmed-up client parameter vectors.
pub fn build_auxiliary_dataset(
    warmup_models: &[(ParamVector, &ClientDataset)],
    rho: f64,
    schedule: &NoiseSchedule,
    config: &DenoiserConfig,
    seed: u64,
) -> Result<AuxiliaryDataset> {
    let models = warmup_models
        .iter()
        .map(|(p, c)| Ok((MlpDenoiser::new(p, config, schedule.steps())?, c.len())))
        .collect::<Result<Vec<_>>>()?;
    build_auxiliary_dataset_with(&models, rho, schedule, seed)
}

/// One line per sample: `label, v_1, …, v_d`, shortest round-trip decimals.
pub fn write_dataset<W: Write>(mut w: W, data: &[LabeledSample]) -> Result<()> {
    for s in data {
        write!(w, "{}", s.label)?;
        for v in &s.point {
            write!(w, ", {v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label = fields
            .next()
            .unwrap_or("")
            .parse::<Label>()
            .map_err(|e| Error::Parse(format!("line {}: label: {e}", lineno + 1)))?;
        let point = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: value {f:?}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(point.len()),
            Some(d) if d != point.len() => {
                return Err(Error::Parse(format!(
                    "line {}: expected {d} values, found {}",
                    lineno + 1,
                    point.len()
                )))
            }
            _ => {}
        }
        if point.is_empty() {
            return Err(Error::Parse(format!("line {}: no values", lineno + 1)));
        }
        out.push(LabeledSample { point, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn four_blobs() -> MixtureSpec {
        MixtureSpec::isotropic(
            &[
                vec![2.0, 2.0],
                vec![-2.0, 2.0],
                vec![-2.0, -2.0],
                vec![2.0, -2.0],
            ],
            0.5,
        )
        .unwrap()
    }

    fn multiset(data: &[LabeledSample]) -> Vec<(Label, Vec<u64>)> {
        let mut v: Vec<_> = data
            .iter()
            .map(|s| (s.label, s.point.iter().map(|x| x.to_bits()).collect()))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn mixture_validation() {
        assert!(MixtureSpec::new(vec![]).is_err());
        let g = GaussianSpec::isotropic(vec![0.0], 1.0).unwrap();
        let dup = vec![
            MixtureComponent { weight: 0.5, gaussian: g.clone(), label: 1 },
            MixtureComponent { weight: 0.5, gaussian: g.clone(), label: 1 },
        ];
        assert!(MixtureSpec::new(dup).is_err());
        let bad_sum = vec![MixtureComponent { weight: 0.7, gaussian: g, label: 0 }];
        assert!(MixtureSpec::new(bad_sum).is_err());
    }

    #[test]
    fn single_component_labels() {
        let spec = MixtureSpec::isotropic(&[vec![1.0, 1.0]], 0.3).unwrap();
        let d = generate_global_dataset(&spec, 50, &mut stream(1, &[])).unwrap();
        assert!(d.iter().all(|s| s.label == 0));
        assert!(generate_global_dataset(&spec, 0, &mut stream(1, &[])).is_err());
    }

    #[test]
    fn label_counts_are_binomial() {
        let m = 10_000;
        let d = generate_global_dataset(&four_blobs(), m, &mut stream(5, &[])).unwrap();
        let sd = (m as f64 * 0.25 * 0.75).sqrt();
        for l in 0..4 {
            let c = d.iter().filter(|s| s.label == l).count() as f64;
            assert!((c - 2500.0).abs() < 3.0 * sd, "label {l}: {c}");
        }
        let again = generate_global_dataset(&four_blobs(), m, &mut stream(5, &[])).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn shard_single_client_holds_everything() {
        let d = generate_global_dataset(&four_blobs(), 40, &mut stream(2, &[])).unwrap();
        let parts = partition_shard(&d, 1, &mut stream(3, &[])).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(multiset(&parts[0].samples), multiset(&d));
    }

    #[test]
    fn shard_two_labels_two_clients() {
        let mut d = Vec::new();
        for i in 0..40 {
            d.push(LabeledSample { point: vec![i as f64], label: (i % 2) as Label });
        }
        for seed in 0..10 {
            let parts = partition_shard(&d, 2, &mut stream(seed, &[])).unwrap();
            for p in &parts {
                assert!(p.label_counts().len() <= 2);
                assert_eq!(p.len(), 20);
            }
        }
    }

    #[test]
    fn shard_uneven_sizes_and_errors() {
        let d = generate_global_dataset(&four_blobs(), 43, &mut stream(2, &[])).unwrap();
        let parts = partition_shard(&d, 4, &mut stream(3, &[])).unwrap();
        let total: usize = parts.iter().map(|p| p.len()).sum();
        assert_eq!(total, 43);
        let all: Vec<LabeledSample> = parts.iter().flat_map(|p| p.samples.clone()).collect();
        assert_eq!(multiset(&all), multiset(&d));
        assert!(partition_shard(&d[..7], 4, &mut stream(3, &[])).is_err());
    }

    #[test]
    fn largest_remainder_sums_exactly() {
        assert_eq!(largest_remainder(10, &[0.5, 0.5]), vec![5, 5]);
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(7, &[0.1, 0.6, 0.3]), vec![1, 4, 2]);
        assert_eq!(largest_remainder(0, &[0.3, 0.7]), vec![0, 0]);
    }

    #[test]
    fn dirichlet_rejects_nonpositive_alpha() {
        let d = generate_global_dataset(&four_blobs(), 40, &mut stream(2, &[])).unwrap();
        assert!(partition_dirichlet(&d, 3, 0.0, &mut stream(1, &[])).is_err());
        assert!(partition_dirichlet(&d, 3, -1.0, &mut stream(1, &[])).is_err());
    }

    #[test]
    fn dirichlet_large_alpha_is_near_uniform() {
        // 4 classes × 10⁴ samples, 5 clients: each client should get ≈ 2000 of
        // every class; the 5% bound is far outside Dirichlet(10⁶) spread
        // (sd of a proportion ≈ √(0.2·0.8/(5·10⁶)) ≈ 2e-4).
        let mut d = Vec::new();
        for l in 0..4u32 {
            for i in 0..10_000 {
                d.push(LabeledSample { point: vec![i as f64], label: l });
            }
        }
        let parts = partition_dirichlet(&d, 5, 1e6, &mut stream(11, &[])).unwrap();
        for p in &parts {
            for l in 0..4u32 {
                let share = *p.label_counts().get(&l).unwrap() as f64 / 10_000.0;
                assert!((share - 0.2).abs() < 0.05 * 0.2, "{share}");
            }
        }
    }

    #[test]
    fn dirichlet_smaller_alpha_is_more_heterogeneous() {
        let d = generate_global_dataset(&four_blobs(), 4000, &mut stream(2, &[])).unwrap();
        for seed in 0..5 {
            let a = partition_dirichlet(&d, 20, 0.1, &mut stream(seed, &[])).unwrap();
            let b = partition_dirichlet(&d, 20, 0.3, &mut stream(seed, &[])).unwrap();
            assert!(label_heterogeneity(&a) > label_heterogeneity(&b), "seed {seed}");
        }
    }

    #[test]
    fn auxiliary_counts() {
        assert_eq!(auxiliary_count(0.1, 500), 50);
        assert_eq!(auxiliary_count(0.1, 100), 10);
        assert_eq!(auxiliary_count(0.1, 300), 30);
        assert_eq!(auxiliary_count(0.1, 4), 0);
        assert_eq!(auxiliary_count(0.1, 5), 1);
    }

    #[test]
    fn dataset_text_roundtrip() {
        let d = vec![
            LabeledSample { point: vec![0.1, -2.5e-17], label: 3 },
            LabeledSample { point: vec![1.0 / 3.0, 1e300], label: 0 },
        ];
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("3, 0.1, -2.5e-17\n"));
        assert_eq!(read_dataset(&buf[..]).unwrap(), d);
        assert!(read_dataset("1, 2.0\n2, 1.0, 3.0\n".as_bytes()).is_err());
        assert!(read_dataset("x, 2.0\n".as_bytes()).is_err());
    }
}
