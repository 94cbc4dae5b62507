//! Synthetic multi-domain datasets, seeded batch sampling and CSV persistence.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::export::{fmt_g17, write_atomic};
use crate::nn::{Batch, Targets};
use crate::{Error, Result};

/// Domain id stamped on batches pooled from several domains.
pub const MIXED_DOMAIN: usize = usize::MAX;

/// Derives an independent seed for a numbered sub-stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over the combined value
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// How a dataset was produced. Serialized into the CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Descriptor {
    RotatedMoons {
        angle_deg: f64,
        n: usize,
        noise_sd: f64,
        seed: u64,
    },
    ShiftedRegression {
        weights: Vec<f64>,
        bias_shift: f64,
        n: usize,
        noise_sd: f64,
        seed: u64,
    },
    /// A split of another dataset (`part` is e.g. "train" or "val").
    Split { parent: Box<Descriptor>, part: String },
    Custom { name: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes { labels: Vec<usize>, num_classes: usize },
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { labels, .. } => labels.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Classes {
                labels,
                num_classes,
            } => Labels::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Labels::Values(v) => Labels::Values(indices.iter().map(|&i| v[i]).collect()),
        }
    }

    fn to_targets(&self, indices: &[usize]) -> Targets {
        match self {
            Labels::Classes { labels, .. } => {
                Targets::Classes(indices.iter().map(|&i| labels[i]).collect())
            }
            Labels::Values(v) => Targets::Values(indices.iter().map(|&i| vec![v[i]]).collect()),
        }
    }

    fn same_kind(&self, other: &Labels) -> bool {
        match (self, other) {
            (
                Labels::Classes { num_classes: a, .. },
                Labels::Classes { num_classes: b, .. },
            ) => a == b,
            (Labels::Values(_), Labels::Values(_)) => true,
            _ => false,
        }
    }
}

/// Labeled samples of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub descriptor: Descriptor,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Labels,
}

impl DomainDataset {
    pub fn new(
        domain_id: usize,
        descriptor: Descriptor,
        inputs: Vec<Vec<f64>>,
        labels: Labels,
    ) -> Result<Self> {
        let d = Self {
            domain_id,
            descriptor,
            inputs,
            labels,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Shape(format!(
                "domain {} has no samples",
                self.domain_id
            )));
        }
        if self.inputs.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "domain {}: {} inputs but {} labels",
                self.domain_id,
                self.inputs.len(),
                self.labels.len()
            )));
        }
        let dim = self.inputs[0].len();
        if dim == 0 || self.inputs.iter().any(|x| x.len() != dim) {
            return Err(Error::Shape(format!(
                "domain {}: inputs do not share one positive dimension",
                self.domain_id
            )));
        }
        if let Labels::Classes {
            labels,
            num_classes,
        } = &self.labels
        {
            if let Some(c) = labels.iter().find(|&&c| c >= *num_classes) {
                return Err(Error::Shape(format!(
                    "domain {}: label {c} outside {num_classes} classes",
                    self.domain_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn subset(&self, indices: &[usize], part: &str) -> Result<DomainDataset> {
        DomainDataset::new(
            self.domain_id,
            Descriptor::Split {
                parent: Box::new(self.descriptor.clone()),
                part: part.to_owned(),
            },
            indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            self.labels.select(indices),
        )
    }

    pub fn batch_from_indices(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            self.labels.to_targets(indices),
            self.domain_id,
        )
    }

    /// Every sample, in storage order.
    pub fn full_batch(&self) -> Batch {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch_from_indices(&all).expect("validated dataset")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn to_csv(&self) -> Result<String> {
        let header = CsvHeader {
            domain_id: self.domain_id,
            descriptor: self.descriptor.clone(),
            dim: self.dim(),
            num_classes: match &self.labels {
                Labels::Classes { num_classes, .. } => Some(*num_classes),
                Labels::Values(_) => None,
            },
        };
        let mut out = format!("# {}\n", serde_json::to_string(&header)?);
        for (i, x) in self.inputs.iter().enumerate() {
            let mut fields: Vec<String> = x.iter().map(|&v| fmt_g17(v)).collect();
            fields.push(match &self.labels {
                Labels::Classes { labels, .. } => labels[i].to_string(),
                Labels::Values(v) => fmt_g17(v[i]),
            });
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn load_csv(path: &Path) -> Result<DomainDataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }

    /// Parses the CSV layout written by [`Self::to_csv`]; `path` is only used
    /// in error messages.
    pub fn parse_csv(text: &str, path: &Path) -> Result<DomainDataset> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_owned(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, first) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty file".into()))?;
        let json = first
            .strip_prefix('#')
            .ok_or_else(|| parse_err(1, "missing `# {json}` header line".into()))?;
        let header: CsvHeader = serde_json::from_str(json.trim())
            .map_err(|e| parse_err(1, format!("bad header metadata: {e}")))?;

        let mut inputs = Vec::new();
        let mut classes = Vec::new();
        let mut values = Vec::new();
        for (line_no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.dim + 1 {
                return Err(parse_err(
                    line_no,
                    format!(
                        "expected {} columns, found {}",
                        header.dim + 1,
                        fields.len()
                    ),
                ));
            }
            let x = fields[..header.dim]
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| parse_err(line_no, format!("bad number {f:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let label = fields[header.dim].trim();
            match header.num_classes {
                Some(k) => {
                    let c: usize = label.parse().map_err(|e| {
                        parse_err(line_no, format!("bad class label {label:?}: {e}"))
                    })?;
                    if c >= k {
                        return Err(parse_err(
                            line_no,
                            format!("label {c} outside {k} classes"),
                        ));
                    }
                    classes.push(c);
                }
                None => values.push(
                    label
                        .parse::<f64>()
                        .map_err(|e| parse_err(line_no, format!("bad target {label:?}: {e}")))?,
                ),
            }
            inputs.push(x);
        }
        if inputs.is_empty() {
            return Err(parse_err(text.lines().count().max(1), "no data rows".into()));
        }
        let labels = match header.num_classes {
            Some(num_classes) => Labels::Classes {
                labels: classes,
                num_classes,
            },
            None => Labels::Values(values),
        };
        DomainDataset::new(header.domain_id, header.descriptor, inputs, labels)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CsvHeader {
    domain_id: usize,
    descriptor: Descriptor,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
}

fn rotate(p: [f64; 2], angle_deg: f64) -> [f64; 2] {
    if angle_deg == 0.0 {
        return p;
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Unrotated, noise-free two-moons point for sample `i` of `n`.
///
/// Classes alternate (`i % 2`); within a class the points are evenly spaced
/// along the half circle, so sample 0 is the outer-moon point `(1, 0)`.
fn moon_point(i: usize, n: usize) -> ([f64; 2], usize) {
    let class = i % 2;
    let per_class = if class == 0 { n.div_ceil(2) } else { n / 2 };
    let j = i / 2;
    let t = if per_class > 1 {
        std::f64::consts::PI * j as f64 / (per_class - 1) as f64
    } else {
        0.0
    };
    let p = if class == 0 {
        [t.cos(), t.sin()]
    } else {
        [1.0 - t.cos(), 0.5 - t.sin()]
    };
    (p, class)
}

/// Two interleaved half circles with Gaussian noise, rotated about the origin.
pub fn make_rotated_moons(
    domain_id: usize,
    angle_deg: f64,
    n: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<DomainDataset> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("moons need n >= 2, got {n}")));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise_sd must be >= 0, got {noise_sd}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd).expect("noise_sd checked");
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (mut p, class) = moon_point(i, n);
        if noise_sd > 0.0 {
            p[0] += noise.sample(&mut rng);
            p[1] += noise.sample(&mut rng);
        }
        inputs.push(rotate(p, angle_deg).to_vec());
        labels.push(class);
    }
    DomainDataset::new(
        domain_id,
        Descriptor::RotatedMoons {
            angle_deg,
            n,
            noise_sd,
            seed,
        },
        inputs,
        Labels::Classes {
            labels,
            num_classes: 2,
        },
    )
}

/// Noise-free regression target `w.x + shift`.
pub fn regression_target(weights: &[f64], bias_shift: f64, x: &[f64]) -> f64 {
    weights.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + bias_shift
}

/// Linear regression domain: `x ~ N(0, I)`, `y = w.x + bias_shift + noise`.
pub fn make_shifted_regression(
    domain_id: usize,
    weights: &[f64],
    bias_shift: f64,
    n: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<DomainDataset> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "regression needs n >= 2, got {n}"
        )));
    }
    if weights.is_empty() {
        return Err(Error::InvalidConfig(
            "regression weights must be non-empty".into(),
        ));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise_sd must be >= 0, got {noise_sd}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..weights.len())
            .map(|_| std_normal.sample(&mut rng))
            .collect();
        let eps = std_normal.sample(&mut rng) * noise_sd;
        targets.push(regression_target(weights, bias_shift, &x) + eps);
        inputs.push(x);
    }
    DomainDataset::new(
        domain_id,
        Descriptor::ShiftedRegression {
            weights: weights.to_vec(),
            bias_shift,
            n,
            noise_sd,
            seed,
        },
        inputs,
        Labels::Values(targets),
    )
}

/// Source domains (with train/validation splits) and held-out targets.
#[derive(Debug, Clone)]
pub struct DomainSuite {
    pub sources: Vec<DomainDataset>,
    pub targets: Vec<DomainDataset>,
    pub val_fraction: f64,
    /// Training part of each source, same order as `sources`.
    pub train: Vec<DomainDataset>,
    /// Validation part of each source; `None` when the split is empty.
    pub val: Vec<Option<DomainDataset>>,
    /// Per source: (train indices, validation indices) into the source.
    pub splits: Vec<(Vec<usize>, Vec<usize>)>,
}

impl DomainSuite {
    pub fn new(
        sources: Vec<DomainDataset>,
        targets: Vec<DomainDataset>,
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidConfig(
                "a suite needs at least one source domain".into(),
            ));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must lie in [0, 1), got {val_fraction}"
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in sources.iter().chain(&targets) {
            if !seen.insert(d.domain_id) {
                return Err(Error::InvalidConfig(format!(
                    "domain id {} appears more than once",
                    d.domain_id
                )));
            }
            if d.dim() != sources[0].dim() || !d.labels.same_kind(&sources[0].labels) {
                return Err(Error::InvalidConfig(format!(
                    "domain {} does not match the input dimension or label kind of the suite",
                    d.domain_id
                )));
            }
        }

        let mut train = Vec::with_capacity(sources.len());
        let mut val = Vec::with_capacity(sources.len());
        let mut splits = Vec::with_capacity(sources.len());
        for src in &sources {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, src.domain_id as u64));
            let mut perm: Vec<usize> = (0..src.len()).collect();
            perm.shuffle(&mut rng);
            let n_val = ((val_fraction * src.len() as f64).round() as usize).min(src.len() - 1);
            let mut val_idx = perm[..n_val].to_vec();
            let mut train_idx = perm[n_val..].to_vec();
            val_idx.sort_unstable();
            train_idx.sort_unstable();
            train.push(src.subset(&train_idx, "train")?);
            val.push(if val_idx.is_empty() {
                None
            } else {
                Some(src.subset(&val_idx, "val")?)
            });
            splits.push((train_idx, val_idx));
        }
        Ok(Self {
            sources,
            targets,
            val_fraction,
            train,
            val,
            splits,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    /// Pooled validation set over all sources.
    pub fn val_batch(&self) -> Option<Batch> {
        let parts: Vec<Batch> = self.val.iter().flatten().map(|d| d.full_batch()).collect();
        (!parts.is_empty()).then(|| Batch::concat(&parts).expect("suite validated"))
    }

    /// Pooled target samples.
    pub fn target_batch(&self) -> Option<Batch> {
        let parts: Vec<Batch> = self.targets.iter().map(|d| d.full_batch()).collect();
        (!parts.is_empty()).then(|| Batch::concat(&parts).expect("suite validated"))
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.sources[0].labels, Labels::Classes { .. })
    }
}

/// Declarative suite recipe, as found in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SuiteConfig {
    RotatedMoons {
        source_angles: Vec<f64>,
        target_angles: Vec<f64>,
        n_per_domain: usize,
        noise_sd: f64,
        val_fraction: f64,
        seed: u64,
    },
    ShiftedRegression {
        weights: Vec<f64>,
        source_shifts: Vec<f64>,
        target_shifts: Vec<f64>,
        n_per_domain: usize,
        noise_sd: f64,
        val_fraction: f64,
        seed: u64,
    },
}

impl Default for SuiteConfig {
    /// Rotated moons: sources at 0/30/60 degrees, target at 90.
    fn default() -> Self {
        SuiteConfig::RotatedMoons {
            source_angles: vec![0.0, 30.0, 60.0],
            target_angles: vec![90.0],
            n_per_domain: 300,
            noise_sd: 0.1,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    /// Domain ids are assigned in order: sources first, then targets.
    pub fn build(&self) -> Result<DomainSuite> {
        match self {
            SuiteConfig::RotatedMoons {
                source_angles,
                target_angles,
                n_per_domain,
                noise_sd,
                val_fraction,
                seed,
            } => {
                let make = |id: usize, angle: f64| {
                    let s = derive_seed(*seed, 1000 + id as u64);
                    make_rotated_moons(id, angle, *n_per_domain, *noise_sd, s)
                };
                let sources = source_angles
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| make(i, a))
                    .collect::<Result<Vec<_>>>()?;
                let targets = target_angles
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| make(source_angles.len() + i, a))
                    .collect::<Result<Vec<_>>>()?;
                DomainSuite::new(sources, targets, *val_fraction, *seed)
            }
            SuiteConfig::ShiftedRegression {
                weights,
                source_shifts,
                target_shifts,
                n_per_domain,
                noise_sd,
                val_fraction,
                seed,
            } => {
                let make = |id: usize, shift: f64| {
                    let s = derive_seed(*seed, 1000 + id as u64);
                    make_shifted_regression(id, weights, shift, *n_per_domain, *noise_sd, s)
                };
                let sources = source_shifts
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| make(i, s))
                    .collect::<Result<Vec<_>>>()?;
                let targets = target_shifts
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| make(source_shifts.len() + i, s))
                    .collect::<Result<Vec<_>>>()?;
                DomainSuite::new(sources, targets, *val_fraction, *seed)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Cursor {
    perm: Vec<usize>,
    pos: usize,
}

/// Seeded without-replacement sampler with one cursor per domain.
///
/// Cloning the state snapshots it; replaying a clone reproduces the same
/// batch sequence.
#[derive(Debug, Clone)]
pub struct SamplerState {
    rng: ChaCha8Rng,
    cursors: BTreeMap<usize, Cursor>,
}

impl SamplerState {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursors: BTreeMap::new(),
        }
    }

    /// Cursor for `dataset`, (re)initialised if its size changed.
    fn cursor(&mut self, dataset: &DomainDataset) -> &mut Cursor {
        let cursor = self
            .cursors
            .entry(dataset.domain_id)
            .or_insert_with(|| Cursor {
                perm: Vec::new(),
                pos: 0,
            });
        if cursor.perm.len() != dataset.len() {
            cursor.perm = (0..dataset.len()).collect();
            cursor.perm.shuffle(&mut self.rng);
            cursor.pos = 0;
        }
        cursor
    }

    /// Draws `batch_size` distinct samples from one domain. A new epoch
    /// (fresh shuffle) starts when the current one cannot fill the batch.
    pub fn sample_batch(&mut self, dataset: &DomainDataset, batch_size: usize) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if batch_size > dataset.len() {
            return Err(Error::InvalidConfig(format!(
                "batch_size {batch_size} exceeds the {} samples of domain {}",
                dataset.len(),
                dataset.domain_id
            )));
        }
        self.cursor(dataset);
        let cursor = self.cursors.get_mut(&dataset.domain_id).expect("inserted");
        if cursor.pos + batch_size > cursor.perm.len() {
            cursor.perm.shuffle(&mut self.rng);
            cursor.pos = 0;
        }
        let indices = cursor.perm[cursor.pos..cursor.pos + batch_size].to_vec();
        cursor.pos += batch_size;
        dataset.batch_from_indices(&indices)
    }

    fn next_index(&mut self, dataset: &DomainDataset) -> usize {
        self.cursor(dataset);
        let cursor = self.cursors.get_mut(&dataset.domain_id).expect("inserted");
        if cursor.pos == cursor.perm.len() {
            cursor.perm.shuffle(&mut self.rng);
            cursor.pos = 0;
        }
        cursor.pos += 1;
        cursor.perm[cursor.pos - 1]
    }

    /// Pools a batch by choosing the source domain of every slot uniformly at
    /// random. Returns the batch and the domain index (into `datasets`) of each
    /// sample. With a single domain this is exactly [`Self::sample_batch`].
    pub fn sample_mixture(
        &mut self,
        datasets: &[DomainDataset],
        batch_size: usize,
    ) -> Result<(Batch, Vec<usize>)> {
        match datasets {
            [] => Err(Error::InvalidConfig("mixture over zero domains".into())),
            [only] => Ok((self.sample_batch(only, batch_size)?, vec![0; batch_size])),
            _ => {
                if batch_size == 0 {
                    return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
                }
                let mut parts = Vec::with_capacity(batch_size);
                let mut sources = Vec::with_capacity(batch_size);
                for _ in 0..batch_size {
                    let d = self.rng.random_range(0..datasets.len());
                    let idx = self.next_index(&datasets[d]);
                    parts.push(datasets[d].batch_from_indices(&[idx])?);
                    sources.push(d);
                }
                let mut batch = Batch::concat(&parts)?;
                batch.domain_id = MIXED_DOMAIN;
                Ok((batch, sources))
            }
        }
    }
}
