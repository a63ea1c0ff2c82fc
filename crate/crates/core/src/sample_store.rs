//! The growing set of true-model evaluations and the exact neighbor queries
//! run against it.
//!
//! Queries are a linear scan. Sample sets in this setting hold a few thousand
//! points in low dimension, where a scan with partial selection beats tree
//! construction and keeps results exact and tie-break deterministic.

use std::cmp::Ordering;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Default Euclidean tolerance under which two locations are considered equal.
pub const DEFAULT_DEDUP_TOLERANCE: f64 = 1e-10;

/// One evaluated point: a parameter location and the model outputs there.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub location: Vec<f64>,
    pub values: Vec<f64>,
}

impl Sample {
    pub fn new(location: Vec<f64>, values: Vec<f64>) -> Self {
        Self { location, values }
    }
}

/// A stored sample's position in a query result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Insertion index into the owning set.
    pub index: usize,
    pub distance: f64,
}

/// Result of a k-nearest query.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    /// Sorted by increasing distance, ties by insertion order.
    pub neighbors: Vec<Neighbor>,
    /// Distance from the center to the k-th nearest sample.
    pub radius: f64,
}

impl Neighborhood {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.neighbors.iter().map(|n| n.index)
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    dimension: usize,
    output_dim: usize,
    dedup_tolerance: f64,
    samples: Vec<Sample>,
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl SampleSet {
    pub fn new(dimension: usize, output_dim: usize) -> Self {
        Self::with_tolerance(dimension, output_dim, DEFAULT_DEDUP_TOLERANCE)
    }

    pub fn with_tolerance(dimension: usize, output_dim: usize, dedup_tolerance: f64) -> Self {
        assert!(dimension > 0 && output_dim > 0, "sample set dimensions must be positive");
        assert!(dedup_tolerance >= 0.0, "dedup tolerance must be nonnegative");
        Self {
            dimension,
            output_dim,
            dedup_tolerance,
            samples: Vec::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn dedup_tolerance(&self) -> f64 {
        self.dedup_tolerance
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    fn check_location(&self, location: &[f64]) -> Result<()> {
        if location.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got: location.len(),
            });
        }
        Ok(())
    }

    /// Appends `sample` unless a stored location lies within the dedup
    /// tolerance. Returns whether the sample was stored.
    pub fn insert(&mut self, sample: Sample) -> Result<bool> {
        self.check_location(&sample.location)?;
        if sample.values.len() != self.output_dim {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim,
                got: sample.values.len(),
            });
        }
        if !sample.location.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sample location"));
        }
        if !sample.values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sample values"));
        }
        if self.is_duplicate(&sample.location) {
            return Ok(false);
        }
        self.samples.push(sample);
        Ok(true)
    }

    /// True if `location` is within the dedup tolerance of a stored sample.
    pub fn is_duplicate(&self, location: &[f64]) -> bool {
        let tol2 = self.dedup_tolerance * self.dedup_tolerance;
        self.samples
            .iter()
            .any(|s| squared_distance(&s.location, location) <= tol2)
    }

    /// Distance from `location` to the closest stored sample, or infinity for
    /// an empty set.
    pub fn min_distance(&self, location: &[f64]) -> f64 {
        self.samples
            .iter()
            .map(|s| squared_distance(&s.location, location))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    fn scored(&self, center: &[f64]) -> Vec<(f64, usize)> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (squared_distance(&s.location, center), i))
            .collect()
    }

    /// The `k` nearest samples to `center`.
    pub fn nearest(&self, center: &[f64], k: usize) -> Result<Neighborhood> {
        self.nearest_impl(center, k, false)
    }

    /// Like [`SampleSet::nearest`], but samples tied with the k-th distance
    /// are all included, so the result may exceed `k`.
    pub fn nearest_with_ties(&self, center: &[f64], k: usize) -> Result<Neighborhood> {
        self.nearest_impl(center, k, true)
    }

    fn nearest_impl(&self, center: &[f64], k: usize, keep_ties: bool) -> Result<Neighborhood> {
        self.check_location(center)?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        if k > self.samples.len() {
            return Err(Error::InsufficientSamples {
                needed: k,
                available: self.samples.len(),
            });
        }
        let mut scored = self.scored(center);
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_distance_then_index);
        }
        let kth = scored[k - 1].0;
        let mut chosen: Vec<(f64, usize)> = scored[..k].to_vec();
        if keep_ties {
            chosen.extend(scored[k..].iter().filter(|(d2, _)| *d2 == kth));
        }
        chosen.sort_unstable_by(by_distance_then_index);
        Ok(Neighborhood {
            neighbors: chosen
                .into_iter()
                .map(|(d2, index)| Neighbor {
                    index,
                    distance: d2.sqrt(),
                })
                .collect(),
            radius: kth.sqrt(),
        })
    }

    /// All samples with distance at most `radius`, sorted by distance.
    pub fn within_ball(&self, center: &[f64], radius: f64) -> Result<Vec<Neighbor>> {
        self.check_location(center)?;
        if radius < 0.0 || radius.is_nan() {
            return Err(Error::InvalidArgument(format!("negative radius {radius}")));
        }
        let mut hits: Vec<(f64, usize)> = self
            .scored(center)
            .into_iter()
            .filter(|(d2, _)| d2.sqrt() <= radius)
            .collect();
        hits.sort_unstable_by(by_distance_then_index);
        Ok(hits
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect())
    }

    /// Writes one row per sample: `theta_1..theta_d, f_1..f_n, index`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dimension).map(|i| format!("theta_{i}")).collect();
        header.extend((1..=self.output_dim).map(|j| format!("f_{j}")));
        header.push("index".into());
        w.write_record(&header)?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut row: Vec<String> = s.location.iter().map(|v| v.to_string()).collect();
            row.extend(s.values.iter().map(|v| v.to_string()));
            row.push(i.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a set written by [`SampleSet::write_csv`]. Column counts are
    /// recovered from the `theta_`/`f_` header prefixes.
    pub fn read_csv<R: Read>(reader: R, dedup_tolerance: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let dimension = header.iter().filter(|h| h.starts_with("theta_")).count();
        let output_dim = header.iter().filter(|h| h.starts_with("f_")).count();
        if dimension == 0 || output_dim == 0 {
            return Err(Error::InvalidArgument("sample csv lacks theta_/f_ columns".into()));
        }
        let mut set = SampleSet::with_tolerance(dimension, output_dim, dedup_tolerance);
        for record in r.records() {
            let record = record?;
            let parse = |k: usize| -> Result<f64> {
                record[k]
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad number {:?}: {e}", &record[k])))
            };
            let location = (0..dimension).map(parse).collect::<Result<Vec<_>>>()?;
            let values = (dimension..dimension + output_dim)
                .map(parse)
                .collect::<Result<Vec<_>>>()?;
            set.insert(Sample::new(location, values))?;
        }
        Ok(set)
    }
}
