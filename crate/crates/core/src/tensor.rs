//! Sparse tensors in coordinate form: entry files, train/test splits,
//! active-node reindexing and negative sampling for link prediction.
//!
//! Entry file format (UTF-8):
//!
//! ```text
//! # comment
//! 3;200,100,200          <- optional header "K;D_1,...,D_K"
//! 0,4,17,1.25            <- "i_1,...,i_K,value", 0-based indices
//! ```
//!
//! Without a header the dims are inferred as `1 + max index` per mode.
//! Index-only files (link lists) drop the value column.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensorData {
    dims: Vec<usize>,
    /// Flat row-major index storage, `num_modes` components per entry.
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseTensorData {
    /// Builds a tensor from explicit entries, checking bounds and finiteness.
    pub fn new(dims: Vec<usize>, entries: Vec<(Vec<usize>, f64)>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "a tensor needs at least 2 modes, got {}",
                dims.len()
            )));
        }
        let k = dims.len();
        let mut indices = Vec::with_capacity(entries.len() * k);
        let mut values = Vec::with_capacity(entries.len());
        for (n, (idx, value)) in entries.into_iter().enumerate() {
            if idx.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: idx.len(),
                });
            }
            for (mode, (&i, &d)) in idx.iter().zip(&dims).enumerate() {
                if i >= d {
                    return Err(Error::Bounds {
                        line: n + 1,
                        mode,
                        index: i,
                        dim: d,
                    });
                }
            }
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("value of entry {n}")));
            }
            indices.extend_from_slice(&idx);
            values.push(value);
        }
        Ok(SparseTensorData {
            dims,
            indices,
            values,
        })
    }

    pub(crate) fn from_raw(dims: Vec<usize>, indices: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(indices.len(), values.len() * dims.len());
        SparseTensorData {
            dims,
            indices,
            values,
        }
    }

    pub fn num_modes(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[allow(clippy::should_implement_trait)] // returns a slice, not an element reference
    pub fn index(&self, n: usize) -> &[usize] {
        let k = self.dims.len();
        &self.indices[n * k..(n + 1) * k]
    }

    pub fn value(&self, n: usize) -> f64 {
        self.values[n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> + '_ {
        self.indices
            .chunks_exact(self.dims.len())
            .zip(self.values.iter().copied())
    }

    /// Number of cells in the full tensor, saturating at `u128::MAX`.
    pub fn size(&self) -> u128 {
        index_space(&self.dims)
    }

    /// Fraction of cells holding at least one observation.
    pub fn density(&self) -> f64 {
        self.distinct_indices().len() as f64 / self.size() as f64
    }

    pub fn distinct_indices(&self) -> Vec<Vec<usize>> {
        let mut seen = HashSet::with_capacity(self.len());
        let mut out = Vec::new();
        for (idx, _) in self.iter() {
            if seen.insert(idx) {
                out.push(idx.to_vec());
            }
        }
        out
    }

    /// Every entry's index tuple, duplicates included, in storage order.
    pub fn index_list(&self) -> Vec<Vec<usize>> {
        self.iter().map(|(idx, _)| idx.to_vec()).collect()
    }

    /// Keeps the entries at `positions`, in that order.
    pub fn select(&self, positions: &[usize]) -> SparseTensorData {
        let mut indices = Vec::with_capacity(positions.len() * self.num_modes());
        let mut values = Vec::with_capacity(positions.len());
        for &p in positions {
            indices.extend_from_slice(self.index(p));
            values.push(self.values[p]);
        }
        SparseTensorData::from_raw(self.dims.clone(), indices, values)
    }
}

pub(crate) fn index_space(dims: &[usize]) -> u128 {
    dims.iter()
        .try_fold(1u128, |acc, &d| acc.checked_mul(d as u128))
        .unwrap_or(u128::MAX)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_header(path: &Path, line_no: usize, line: &str) -> Result<Vec<usize>> {
    let (k, dims) = line
        .split_once(';')
        .ok_or_else(|| parse_err(path, line_no, "header must look like K;D_1,...,D_K"))?;
    let k: usize = k
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line_no, format!("bad mode count {k:?}")))?;
    let dims = dims
        .split(',')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| parse_err(path, line_no, format!("bad dimension {d:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if dims.len() != k {
        return Err(parse_err(
            path,
            line_no,
            format!("header declares {k} modes but lists {} dims", dims.len()),
        ));
    }
    if k < 2 {
        return Err(parse_err(path, line_no, "need at least 2 modes"));
    }
    Ok(dims)
}

struct RawRows {
    header: Option<Vec<usize>>,
    /// (line number, index tuple, value if present)
    rows: Vec<(usize, Vec<usize>, Option<f64>)>,
}

/// Splits an entry file into header and rows. `arity` gives the number of
/// modes when known; otherwise it is taken from the header or the first row.
fn read_rows(
    path: &Path,
    text: &str,
    arity: Option<usize>,
    with_values: Option<bool>,
) -> Result<RawRows> {
    let mut header = None;
    let mut rows = Vec::new();
    let mut modes = arity;
    let mut has_value = with_values;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.contains(';') {
            if header.is_some() || !rows.is_empty() {
                return Err(parse_err(
                    path,
                    line_no,
                    "header must be the first data line",
                ));
            }
            let dims = parse_header(path, line_no, line)?;
            if let Some(k) = modes {
                if k != dims.len() {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!("expected {k} modes, header declares {}", dims.len()),
                    ));
                }
            }
            modes = Some(dims.len());
            header = Some(dims);
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (k, valued) = match (modes, has_value) {
            (Some(k), Some(v)) => (k, v),
            (Some(k), None) => {
                let v = fields.len() == k + 1;
                if !v && fields.len() != k {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!("expected {k} or {} fields, got {}", k + 1, fields.len()),
                    ));
                }
                (k, v)
            }
            (None, Some(true)) => (fields.len().saturating_sub(1), true),
            (None, _) => (fields.len().saturating_sub(1), true),
        };
        if k < 2 {
            return Err(parse_err(path, line_no, "need at least 2 index fields"));
        }
        modes = Some(k);
        if arity.is_none() {
            // tensors fix the value column on the first row; index lists may mix
            has_value = Some(valued);
        }
        let expected = k + usize::from(valued);
        if fields.len() != expected {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {expected} fields, got {}", fields.len()),
            ));
        }
        let idx = fields[..k]
            .iter()
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|_| parse_err(path, line_no, format!("bad index {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let value = if valued {
            let v: f64 = fields[k]
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("bad value {:?}", fields[k])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line_no, "value is not finite"));
            }
            Some(v)
        } else {
            None
        };
        rows.push((line_no, idx, value));
    }
    Ok(RawRows { header, rows })
}

/// Loads an entry file (see the module docs for the format).
pub fn load_tensor(path: impl AsRef<Path>) -> Result<SparseTensorData> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(crate::error::with_path(path))?;
    parse_tensor(path, &text)
}

pub(crate) fn parse_tensor(path: &Path, text: &str) -> Result<SparseTensorData> {
    let RawRows { header, rows } = read_rows(path, text, None, Some(true))?;
    let dims = match header {
        Some(dims) => dims,
        None => {
            let first = rows
                .first()
                .ok_or_else(|| parse_err(path, 0, "no header and no entries to infer dims from"))?;
            let mut dims = vec![0usize; first.1.len()];
            for (_, idx, _) in &rows {
                for (d, &i) in dims.iter_mut().zip(idx) {
                    *d = (*d).max(i + 1);
                }
            }
            dims
        }
    };
    let k = dims.len();
    let mut indices = Vec::with_capacity(rows.len() * k);
    let mut values = Vec::with_capacity(rows.len());
    for (line, idx, value) in rows {
        for (mode, (&i, &d)) in idx.iter().zip(&dims).enumerate() {
            if i >= d {
                return Err(Error::Bounds {
                    line,
                    mode,
                    index: i,
                    dim: d,
                });
            }
        }
        indices.extend_from_slice(&idx);
        values.push(value.expect("valued rows"));
    }
    Ok(SparseTensorData::from_raw(dims, indices, values))
}

/// Reads a list of index tuples for a `num_modes`-mode tensor. A value
/// column, if present, is ignored; a header is checked for arity only.
pub fn load_index_list(path: impl AsRef<Path>, num_modes: usize) -> Result<Vec<Vec<usize>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(crate::error::with_path(path))?;
    let RawRows { rows, .. } = read_rows(path, &text, Some(num_modes), None)?;
    Ok(rows.into_iter().map(|(_, idx, _)| idx).collect())
}

/// Writes `data` with a header line; values use the shortest decimal
/// representation that parses back to the same `f64`.
pub fn save_tensor(data: &SparseTensorData, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(data.len() * 16);
    write_tensor(data, &mut out)?;
    write_atomic(path.as_ref(), &out)
}

pub fn write_tensor(data: &SparseTensorData, out: &mut impl Write) -> std::io::Result<()> {
    let dims: Vec<String> = data.dims.iter().map(|d| d.to_string()).collect();
    writeln!(out, "{};{}", data.num_modes(), dims.join(","))?;
    for (idx, value) in data.iter() {
        for i in idx {
            write!(out, "{i},")?;
        }
        writeln!(out, "{value:?}")?;
    }
    Ok(())
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// Random partition of entry positions; `round(train_fraction * N)` go to train.
pub fn split_train_test(
    data: &SparseTensorData,
    spec: SplitSpec,
) -> Result<(SparseTensorData, SparseTensorData)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must lie in (0,1), got {}",
            spec.train_fraction
        )));
    }
    if data.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "cannot split {} entries",
            data.len()
        )));
    }
    let n = data.len();
    let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(0, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(spec.seed));
    let (train, test) = order.split_at_mut(n_train);
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.select(train), data.select(test)))
}

/// Map from original node ids to compact ids `0..D_k` for every mode.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeMaps {
    /// `forward[k][original] = compact`
    pub forward: Vec<HashMap<usize, usize>>,
    /// `original_ids[k][compact] = original`
    pub original_ids: Vec<Vec<usize>>,
}

impl NodeMaps {
    pub fn from_original_ids(original_ids: Vec<Vec<usize>>) -> Self {
        let forward = original_ids
            .iter()
            .map(|ids| ids.iter().enumerate().map(|(j, &o)| (o, j)).collect())
            .collect();
        NodeMaps {
            forward,
            original_ids,
        }
    }

    pub fn active_dims(&self) -> Vec<usize> {
        self.original_ids.iter().map(Vec::len).collect()
    }

    pub fn lookup(&self, mode: usize, original: usize) -> Option<usize> {
        self.forward[mode].get(&original).copied()
    }
}

/// Assigns compact ids to the distinct nodes of each mode in order of first appearance.
pub fn reindex_active_nodes<'a, I>(entries: I) -> Result<NodeMaps>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let mut iter = entries.into_iter().peekable();
    let k = iter
        .peek()
        .map(|idx| idx.len())
        .ok_or_else(|| Error::InsufficientData("no entries to reindex".into()))?;
    let mut forward: Vec<HashMap<usize, usize>> = vec![HashMap::new(); k];
    let mut original_ids: Vec<Vec<usize>> = vec![Vec::new(); k];
    for idx in iter {
        if idx.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: idx.len(),
            });
        }
        for (mode, &i) in idx.iter().enumerate() {
            forward[mode].entry(i).or_insert_with(|| {
                original_ids[mode].push(i);
                original_ids[mode].len() - 1
            });
        }
    }
    Ok(NodeMaps {
        forward,
        original_ids,
    })
}

/// Rewrites `data` onto its active nodes. Returns the compact tensor and the maps.
pub fn compact(data: &SparseTensorData) -> Result<(SparseTensorData, NodeMaps)> {
    let maps = reindex_active_nodes(data.iter().map(|(idx, _)| idx))?;
    let mut indices = Vec::with_capacity(data.indices.len());
    for (idx, _) in data.iter() {
        for (mode, &i) in idx.iter().enumerate() {
            indices.push(maps.forward[mode][&i]);
        }
    }
    let dims = maps.active_dims();
    Ok((
        SparseTensorData::from_raw(dims, indices, data.values.clone()),
        maps,
    ))
}

/// Draws `ratio` x (distinct observed indices) unobserved cells, uniformly and without duplicates.
pub fn sample_negatives(
    data: &SparseTensorData,
    ratio: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let observed: HashSet<Vec<usize>> = data.iter().map(|(idx, _)| idx.to_vec()).collect();
    let count = ratio
        .checked_mul(observed.len())
        .ok_or_else(|| Error::InvalidConfig("negative count overflows".into()))?;
    sample_unobserved(data.dims(), &observed, count, seed)
}

/// Uniform draws from the complement of `exclude` within `dims`, without duplicates.
pub fn sample_unobserved(
    dims: &[usize],
    exclude: &HashSet<Vec<usize>>,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let space = index_space(dims);
    let taken = exclude
        .iter()
        .filter(|idx| idx.len() == dims.len() && idx.iter().zip(dims).all(|(&i, &d)| i < d))
        .count() as u128;
    let available = space.saturating_sub(taken);
    if count as u128 > available {
        return Err(Error::Capacity {
            requested: count as u128,
            available,
        });
    }
    let mut rng = rng::seeded(seed);

    // Dense requests against a small complement: enumerate it and shuffle.
    if available <= 4 * count as u128 && space <= 10_000_000 {
        let mut complement = Vec::with_capacity(available as usize);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..space {
            if !exclude.contains(&idx) {
                complement.push(idx.clone());
            }
            for (i, &d) in idx.iter_mut().zip(dims).rev() {
                *i += 1;
                if *i < d {
                    break;
                }
                *i = 0;
            }
        }
        let (picked, _) = complement.partial_shuffle(&mut rng, count);
        return Ok(picked.to_vec());
    }

    let mut chosen: HashSet<Vec<usize>> = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let idx: Vec<usize> = dims.iter().map(|&d| rng.random_range(0..d)).collect();
        if exclude.contains(&idx) || chosen.contains(&idx) {
            continue;
        }
        chosen.insert(idx.clone());
        out.push(idx);
    }
    Ok(out)
}
