use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment;
use crate::data::Dataset;
use crate::error::{FusionError, Result};
use crate::rng::{self, streams, FusionRng};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FUSTASKD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    Off,
    Threshold,
    Augment,
}

/// Applied when a member is materialized; lets padded clusters reuse source images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemberTransform {
    Identity,
    HorizontalFlip,
    VerticalFlip,
    Shift { dy: i32, dx: i32 },
}

impl MemberTransform {
    pub fn apply(self, img: &[f64], shape: [usize; 3]) -> Vec<f64> {
        match self {
            MemberTransform::Identity => img.to_vec(),
            MemberTransform::HorizontalFlip => augment::horizontal_flip(img, shape),
            MemberTransform::VerticalFlip => augment::vertical_flip(img, shape),
            MemberTransform::Shift { dy, dx } => augment::shift(img, shape, dy, dx),
        }
    }

    fn tag(self) -> (u8, i32, i32) {
        match self {
            MemberTransform::Identity => (0, 0, 0),
            MemberTransform::HorizontalFlip => (1, 0, 0),
            MemberTransform::VerticalFlip => (2, 0, 0),
            MemberTransform::Shift { dy, dx } => (3, dy, dx),
        }
    }

    fn from_tag(tag: u8, dy: i32, dx: i32) -> Option<Self> {
        match tag {
            0 => Some(MemberTransform::Identity),
            1 => Some(MemberTransform::HorizontalFlip),
            2 => Some(MemberTransform::VerticalFlip),
            3 => Some(MemberTransform::Shift { dy, dx }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Member {
    pub index: usize,
    pub transform: MemberTransform,
}

impl Member {
    pub fn plain(index: usize) -> Self {
        Self { index, transform: MemberTransform::Identity }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub label: usize,
    pub members: Vec<Member>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionConfig {
    pub min_cluster_size: usize,
    pub query_random_count: usize,
    pub mode: BalanceMode,
    /// Balanced size for threshold/augment; defaults to the floored mean size of clusters that reach `min_cluster_size`.
    pub target_size: Option<usize>,
    pub seed: u64,
}

impl Default for DistributionConfig {
    fn default() -> Self {
        Self {
            min_cluster_size: 3,
            query_random_count: 10,
            mode: BalanceMode::Off,
            target_size: None,
            seed: 0,
        }
    }
}

/// Clusters used as tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDistribution {
    clusters: Vec<Cluster>,
    pseudo_labels: Vec<usize>,
    query_random_count: usize,
    mode: BalanceMode,
    target_size: usize,
}

/// Samples of one side of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub members: Vec<Member>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn materialize(images: &Dataset, members: Vec<Member>, labels: Vec<usize>) -> Result<Self> {
        let shape = images.image_shape();
        let mut data = Vec::with_capacity(members.len() * shape.iter().product::<usize>());
        for m in &members {
            if m.index >= images.len() {
                return Err(FusionError::Index(format!(
                    "member {} outside dataset of {}",
                    m.index,
                    images.len()
                )));
            }
            data.extend(m.transform.apply(images.image(m.index), shape));
        }
        let tensor = Tensor::new(vec![members.len(), shape[0], shape[1], shape[2]], data)?;
        Ok(Self { images: tensor, labels, members })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEpisode {
    pub cluster_label: usize,
    /// Size of the cluster the task was drawn from.
    pub cluster_size: usize,
    pub support: Batch,
    /// Current-cluster samples first, then the random ones.
    pub query: Batch,
}

fn pad_transforms(max_shift: i32) -> Vec<MemberTransform> {
    let mut t = vec![MemberTransform::HorizontalFlip, MemberTransform::VerticalFlip];
    for dy in -max_shift..=max_shift {
        for dx in -max_shift..=max_shift {
            if dy != 0 || dx != 0 {
                t.push(MemberTransform::Shift { dy, dx });
            }
        }
    }
    t
}

pub fn build_task_distribution(pseudo_labels: &[usize], cfg: &DistributionConfig) -> Result<TaskDistribution> {
    if cfg.min_cluster_size < 3 {
        return Err(FusionError::Contract(format!(
            "min_cluster_size {} < 3",
            cfg.min_cluster_size
        )));
    }
    let k = pseudo_labels.iter().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in pseudo_labels.iter().enumerate() {
        groups[l].push(i);
    }
    let eligible: Vec<usize> = groups
        .iter()
        .map(Vec::len)
        .filter(|&s| s >= cfg.min_cluster_size)
        .collect();
    if eligible.is_empty() {
        return Err(FusionError::EmptyDistribution(format!(
            "no cluster reaches {} members",
            cfg.min_cluster_size
        )));
    }
    let target = cfg
        .target_size
        .unwrap_or(eligible.iter().sum::<usize>() / eligible.len())
        .max(cfg.min_cluster_size);
    let mut rng = rng::stream(cfg.seed, streams::DISTRIBUTION);
    let transforms = pad_transforms(2);
    let mut clusters = Vec::new();
    for (label, members) in groups.into_iter().enumerate() {
        let n = members.len();
        let kept: Vec<Member> = match cfg.mode {
            BalanceMode::Off if n >= cfg.min_cluster_size => members.into_iter().map(Member::plain).collect(),
            BalanceMode::Threshold if n >= target => {
                let mut pick: Vec<usize> = index::sample(&mut rng, n, target).into_iter().collect();
                pick.sort_unstable();
                pick.into_iter().map(|i| Member::plain(members[i])).collect()
            }
            BalanceMode::Augment if n >= target => {
                let mut pick: Vec<usize> = index::sample(&mut rng, n, target).into_iter().collect();
                pick.sort_unstable();
                pick.into_iter().map(|i| Member::plain(members[i])).collect()
            }
            BalanceMode::Augment if n > 0 => {
                let mut out: Vec<Member> = members.iter().copied().map(Member::plain).collect();
                while out.len() < target {
                    out.push(Member {
                        index: members[rng.random_range(0..n)],
                        transform: transforms[rng.random_range(0..transforms.len())],
                    });
                }
                out
            }
            _ => continue,
        };
        clusters.push(Cluster { label, members: kept });
    }
    if clusters.is_empty() {
        return Err(FusionError::EmptyDistribution("balancing removed every cluster".into()));
    }
    Ok(TaskDistribution {
        clusters,
        pseudo_labels: pseudo_labels.to_vec(),
        query_random_count: cfg.query_random_count,
        mode: cfg.mode,
        target_size: target,
    })
}

fn split_sizes(n: usize) -> (usize, usize) {
    let support = (2 * n).div_ceil(3);
    (support, n - support)
}

impl TaskDistribution {
    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn pseudo_labels(&self) -> &[usize] {
        &self.pseudo_labels
    }

    pub fn query_random_count(&self) -> usize {
        self.query_random_count
    }

    pub fn mode(&self) -> BalanceMode {
        self.mode
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    /// Number of pseudo-classes, i.e. the classifier width used in meta-training.
    pub fn label_count(&self) -> usize {
        self.pseudo_labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.members.len()).collect()
    }

    pub fn mean_cluster_size(&self) -> f64 {
        let sizes = self.cluster_sizes();
        sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
    }

    /// Loss multiplier that up-weights small clusters, clipped to `[0.25, 4]`.
    pub fn balance_weight(&self, cluster_size: usize) -> f64 {
        (self.mean_cluster_size() / cluster_size.max(1) as f64).clamp(0.25, 4.0)
    }

    /// Picks a cluster uniformly, puts the first ⌈2n/3⌉ shuffled members in the
    /// support set and the rest, plus `query_random_count` draws from other
    /// clusters, in the query set.
    pub fn sample_task(&self, images: &Dataset, rng: &mut FusionRng) -> Result<TaskEpisode> {
        if self.clusters.is_empty() {
            return Err(FusionError::EmptyDistribution("no clusters".into()));
        }
        let ci = rng.random_range(0..self.clusters.len());
        let cluster = &self.clusters[ci];
        let mut members = cluster.members.clone();
        members.shuffle(rng);
        let (n_support, _) = split_sizes(members.len());
        let query_own = members.split_off(n_support);
        let support = Batch::materialize(images, members, vec![cluster.label; n_support])?;

        let mut q_members = query_own;
        let mut q_labels = vec![cluster.label; q_members.len()];
        let q = self.query_random_count;
        if q > 0 {
            let others: Vec<(usize, usize)> = self
                .clusters
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != ci)
                .flat_map(|(j, c)| (0..c.members.len()).map(move |m| (j, m)))
                .collect();
            if others.is_empty() {
                return Err(FusionError::Contract(
                    "query_random_count > 0 needs at least two clusters".into(),
                ));
            }
            let picks: Vec<usize> = if others.len() >= q {
                index::sample(rng, others.len(), q).into_vec()
            } else {
                (0..q).map(|_| rng.random_range(0..others.len())).collect()
            };
            for p in picks {
                let (j, m) = others[p];
                q_members.push(self.clusters[j].members[m]);
                q_labels.push(self.clusters[j].label);
            }
        }
        let query = Batch::materialize(images, q_members, q_labels)?;
        Ok(TaskEpisode {
            cluster_label: cluster.label,
            cluster_size: cluster.members.len(),
            support,
            query,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(match self.mode {
            BalanceMode::Off => 0,
            BalanceMode::Threshold => 1,
            BalanceMode::Augment => 2,
        });
        for v in [self.query_random_count, self.target_size, self.pseudo_labels.len()] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &l in &self.pseudo_labels {
            buf.extend_from_slice(&(l as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(self.clusters.len() as u64).to_le_bytes());
        for c in &self.clusters {
            buf.extend_from_slice(&(c.label as u64).to_le_bytes());
            buf.extend_from_slice(&(c.members.len() as u64).to_le_bytes());
            for m in &c.members {
                let (tag, dy, dx) = m.transform.tag();
                buf.extend_from_slice(&(m.index as u64).to_le_bytes());
                buf.push(tag);
                buf.extend_from_slice(&dy.to_le_bytes());
                buf.extend_from_slice(&dx.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| FusionError::io(path, e))?;
        f.write_all(&buf).map_err(|e| FusionError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| FusionError::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.format("not a task distribution file"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(r.format(&format!("unsupported version {version}")));
        }
        let mode = match r.take(1)?[0] {
            0 => BalanceMode::Off,
            1 => BalanceMode::Threshold,
            2 => BalanceMode::Augment,
            t => return Err(r.format(&format!("unknown balance mode {t}"))),
        };
        let query_random_count = r.usize()?;
        let target_size = r.usize()?;
        let n = r.usize()?;
        let pseudo_labels = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let k = r.usize()?;
        let mut clusters = Vec::with_capacity(k.min(1 << 20));
        for _ in 0..k {
            let label = r.usize()?;
            let len = r.usize()?;
            let mut members = Vec::with_capacity(len.min(1 << 20));
            for _ in 0..len {
                let index = r.usize()?;
                let tag = r.take(1)?[0];
                let dy = i32::from_le_bytes(r.take(4)?.try_into().unwrap());
                let dx = i32::from_le_bytes(r.take(4)?.try_into().unwrap());
                let transform = MemberTransform::from_tag(tag, dy, dx)
                    .ok_or_else(|| r.format(&format!("unknown transform tag {tag}")))?;
                members.push(Member { index, transform });
            }
            clusters.push(Cluster { label, members });
        }
        if r.pos != bytes.len() {
            return Err(FusionError::Length {
                path: path.to_path_buf(),
                expected: r.pos,
                found: bytes.len(),
            });
        }
        Ok(Self { clusters, pseudo_labels, query_random_count, mode, target_size })
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
    pub(crate) path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FusionError::Length {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.format(&format!("count {v} too large")))
    }

    pub(crate) fn format(&self, reason: &str) -> FusionError {
        FusionError::Format { path: self.path.to_path_buf(), reason: reason.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize) -> Dataset {
        let images = Tensor::new(vec![n, 1, 2, 2], (0..n * 4).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        Dataset::new(images, vec![0; n], 1, "toy").unwrap()
    }

    fn labels(sizes: &[usize]) -> Vec<usize> {
        sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect()
    }

    #[test]
    fn two_thirds_split_of_nine() {
        let pl = labels(&[9, 20]);
        let cfg = DistributionConfig { query_random_count: 10, ..Default::default() };
        let dist = build_task_distribution(&pl, &cfg).unwrap();
        let ds = dataset(pl.len());
        let mut r = rng::stream(1, 0);
        for _ in 0..20 {
            let t = dist.sample_task(&ds, &mut r).unwrap();
            if t.cluster_label == 0 {
                assert_eq!((t.support.len(), t.query.len()), (6, 13));
                return;
            }
        }
        panic!("cluster 0 never sampled");
    }

    #[test]
    fn smallest_cluster_split() {
        assert_eq!(split_sizes(3), (2, 1));
        assert_eq!(split_sizes(9), (6, 3));
        assert_eq!(split_sizes(4), (3, 1));
    }

    #[test]
    fn single_cluster_without_random_queries() {
        let pl = labels(&[5]);
        let cfg = DistributionConfig { query_random_count: 0, ..Default::default() };
        let dist = build_task_distribution(&pl, &cfg).unwrap();
        let t = dist.sample_task(&dataset(5), &mut rng::stream(0, 0)).unwrap();
        assert_eq!(t.query.len(), 1);
        assert!(t.query.labels.iter().all(|&l| l == 0));
        let cfg = DistributionConfig { query_random_count: 2, ..cfg };
        let dist = build_task_distribution(&pl, &cfg).unwrap();
        assert!(dist.sample_task(&dataset(5), &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn off_mode_keeps_histogram_and_drops_tiny() {
        let pl = labels(&[3, 10, 2, 7]);
        let dist = build_task_distribution(&pl, &DistributionConfig::default()).unwrap();
        assert_eq!(dist.cluster_sizes(), vec![3, 10, 7]);
        assert_eq!(dist.target_size(), 6);
    }

    #[test]
    fn threshold_mode_equalizes() {
        let pl = labels(&[3, 10, 2, 7, 6]);
        let cfg = DistributionConfig { mode: BalanceMode::Threshold, ..Default::default() };
        let dist = build_task_distribution(&pl, &cfg).unwrap();
        assert_eq!(dist.cluster_sizes(), vec![6, 6, 6]);
    }

    #[test]
    fn augment_mode_pads_to_target() {
        let pl = labels(&[3, 10, 2, 7]);
        let cfg = DistributionConfig { mode: BalanceMode::Augment, ..Default::default() };
        let dist = build_task_distribution(&pl, &cfg).unwrap();
        assert_eq!(dist.cluster_sizes(), vec![6, 6, 6, 6]);
        let padded = &dist.clusters()[2].members;
        assert!(padded.iter().all(|m| pl[m.index] == 2));
        assert!(padded.iter().any(|m| m.transform != MemberTransform::Identity));
    }

    #[test]
    fn no_surviving_cluster_is_an_error() {
        let pl = labels(&[1, 2, 2]);
        assert!(matches!(
            build_task_distribution(&pl, &DistributionConfig::default()),
            Err(FusionError::EmptyDistribution(_))
        ));
    }

    #[test]
    fn balance_weight_is_clipped() {
        let pl = labels(&[3, 30]);
        let dist = build_task_distribution(&pl, &DistributionConfig::default()).unwrap();
        assert!((dist.balance_weight(3) - 4.0).abs() < 1e-15);
        assert!((dist.balance_weight(30) - 16.5 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let pl = labels(&[3, 10, 2, 7]);
        let cfg = DistributionConfig { mode: BalanceMode::Augment, ..Default::default() };
        let dist = build_task_distribution(&pl, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tasks.bin");
        dist.write(&p).unwrap();
        assert_eq!(TaskDistribution::read(&p).unwrap(), dist);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(TaskDistribution::read(&p), Err(FusionError::Length { .. })));
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(TaskDistribution::read(&p), Err(FusionError::Format { .. })));
    }
}
