//! Bags of quantized source feature pixels and patchworks assembled from
//! them, plus index-distribution histograms.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::codec::{nearest, Codebook, FeatureGrid, QuantizedGrid};
use crate::error::{Error, Result};

/// Distinct codebook entries present in one quantized grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    /// Sorted, deduplicated.
    member_indices: Vec<usize>,
    /// `|bag| × c_q`, aligned with `member_indices`.
    member_vectors: Vec<f64>,
    code_dim: usize,
    codebook_size: usize,
    pub source_shape: (usize, usize),
}

impl Bag {
    /// Builds a bag from explicit indices (deduplicated) against a codebook.
    pub fn from_indices(
        indices: impl IntoIterator<Item = usize>,
        codebook: &Codebook,
        source_shape: (usize, usize),
    ) -> Result<Self> {
        let set: BTreeSet<usize> = indices.into_iter().collect();
        if let Some(&bad) = set.iter().find(|&&k| k >= codebook.len()) {
            return Err(Error::InvalidInput(format!(
                "bag index {bad} outside codebook of size {}",
                codebook.len()
            )));
        }
        let member_indices: Vec<usize> = set.into_iter().collect();
        Ok(Self {
            member_vectors: codebook.lookup(&member_indices),
            member_indices,
            code_dim: codebook.dim(),
            codebook_size: codebook.len(),
            source_shape,
        })
    }

    pub fn member_indices(&self) -> &[usize] {
        &self.member_indices
    }

    pub fn member_vector(&self, i: usize) -> &[f64] {
        &self.member_vectors[i * self.code_dim..(i + 1) * self.code_dim]
    }

    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn contains(&self, k: usize) -> bool {
        self.member_indices.binary_search(&k).is_ok()
    }

    /// Membership as a dense length-`m` mask.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.codebook_size];
        for &k in &self.member_indices {
            mask[k] = true;
        }
        mask
    }
}

pub fn build_bag(zq: &QuantizedGrid, codebook: &Codebook) -> Result<Bag> {
    Bag::from_indices(zq.indices.iter().copied(), codebook, (zq.h, zq.w))
}

/// A latent grid whose every pixel is a bag member.
#[derive(Clone, Debug, PartialEq)]
pub struct Patchwork {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
    pub indices: Vec<usize>,
    /// Indices of the bag the patchwork was drawn from.
    pub bag_indices: Vec<usize>,
}

impl FeatureGrid for Patchwork {
    fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Replaces each pixel of `z_ref` by its nearest bag member (squared L2,
/// lowest codebook index on ties).
pub fn scrabble_patchwork<G: FeatureGrid>(z_ref: &G, bag: &Bag) -> Result<Patchwork> {
    if bag.is_empty() {
        return Err(Error::InvalidInput("cannot scrabble from an empty bag".into()));
    }
    let (h, w, c) = z_ref.dims();
    if c != bag.code_dim {
        return Err(Error::Shape(format!(
            "reference width {c} != bag code dim {}",
            bag.code_dim
        )));
    }
    let mut indices = Vec::with_capacity(h * w);
    let mut data = Vec::with_capacity(h * w * c);
    for p in 0..h * w {
        let v = z_ref.pixel(p);
        let slot = nearest_member(v, bag);
        indices.push(bag.member_indices[slot]);
        data.extend_from_slice(bag.member_vector(slot));
    }
    Ok(Patchwork {
        h,
        w,
        c,
        data,
        indices,
        bag_indices: bag.member_indices.clone(),
    })
}

fn nearest_member(v: &[f64], bag: &Bag) -> usize {
    let mut best = (0, f64::INFINITY);
    for slot in 0..bag.len() {
        let d = crate::codec::sq_dist(v, bag.member_vector(slot));
        if d < best.1 {
            best = (slot, d);
        }
    }
    best.0
}

/// Same as [`scrabble_patchwork`] but returns indices only, searching the
/// codebook directly. Used by the trainers where only indices are needed.
pub(crate) fn scrabble_indices<G: FeatureGrid>(z_ref: &G, bag: &Bag, codebook: &Codebook) -> Vec<usize> {
    let (h, w, _) = z_ref.dims();
    (0..h * w)
        .map(|p| {
            nearest(z_ref.pixel(p), codebook, bag.member_indices.iter().copied())
                .expect("bag nonempty")
        })
        .collect()
}

/// Occurrence counts of every codebook index.
pub fn index_histogram(indices: &[usize], m: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; m];
    for &k in indices {
        if k >= m {
            return Err(Error::InvalidInput(format!("index {k} outside [0, {m})")));
        }
        counts[k] += 1;
    }
    Ok(counts)
}

/// Cosine similarity of two count vectors; 0 when either is all-zero.
pub fn histogram_cosine(a: &[u64], b: &[u64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Exported histogram record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub label: String,
    pub counts: Vec<u64>,
}
