//! Exact Euclidean nearest-neighbour index over training-image embeddings.

use std::fs;
use std::path::Path;

use crate::diffcore::{DiffError, Tensor};
use crate::networks::{ReconNet, EMBEDDING_DIM};

use super::{Dataset, DatasetError, Split};

const MAGIC: &[u8; 8] = b"PREKNN\0\0";
const VERSION: u32 = 1;
/// Images embedded per forward pass while building.
const CHUNK: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum KnnError {
    #[error("asked for {k} neighbours but only {available} are available")]
    TooMany { k: usize, available: usize },
    #[error("embedding has {got} values, index expects {expected}")]
    Dimension { got: usize, expected: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnIndex {
    ids: Vec<usize>,
    dim: usize,
    vectors: Vec<f64>,
}

impl KnnIndex {
    pub fn from_embeddings(ids: Vec<usize>, embeddings: &[Vec<f64>]) -> Result<Self, KnnError> {
        let dim = embeddings.first().map_or(EMBEDDING_DIM, Vec::len);
        let mut vectors = Vec::with_capacity(ids.len() * dim);
        for e in embeddings {
            if e.len() != dim {
                return Err(KnnError::Dimension { got: e.len(), expected: dim });
            }
            vectors.extend_from_slice(e);
        }
        assert_eq!(ids.len(), embeddings.len());
        Ok(Self { ids, dim, vectors })
    }

    /// Embeds every training image with a frozen snapshot of `net`.
    pub fn build(dataset: &Dataset, net: &ReconNet) -> Result<Self, KnnError> {
        let ids = dataset.ids(Split::Train);
        let mut embeddings = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(CHUNK) {
            let images: Vec<&Tensor> = chunk
                .iter()
                .map(|&id| dataset.sample(id).map(|s| &s.image))
                .collect::<Result<_, _>>()?;
            embeddings.extend(net.embed(&images)?);
        }
        Self::from_embeddings(ids, &embeddings)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn embedding(&self, slot: usize) -> &[f64] {
        &self.vectors[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Squared distances from `query` to every indexed embedding.
    fn distances(&self, query: &[f64]) -> Result<Vec<(usize, f64)>, KnnError> {
        if query.len() != self.dim {
            return Err(KnnError::Dimension {
                got: query.len(),
                expected: self.dim,
            });
        }
        Ok(self
            .ids
            .iter()
            .enumerate()
            .map(|(slot, &id)| {
                let d = self
                    .embedding(slot)
                    .iter()
                    .zip(query)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                (id, d)
            })
            .collect())
    }

    /// The `k` closest ids (ascending distance, ties by id) excluding `exclude`.
    /// Distances are Euclidean.
    pub fn query(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<(usize, f64)>, KnnError> {
        let mut all = self.distances(query)?;
        all.retain(|(id, _)| Some(*id) != exclude);
        if k > all.len() {
            return Err(KnnError::TooMany { k, available: all.len() });
        }
        let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        if k < all.len() {
            all.select_nth_unstable_by(k, cmp);
            all.truncate(k);
        }
        all.sort_by(cmp);
        Ok(all.into_iter().map(|(id, d)| (id, d.sqrt())).collect())
    }

    /// Neighbours of an image; pass its id as `exclude` when it is indexed.
    pub fn query_image(
        &self,
        net: &ReconNet,
        image: &Tensor,
        k: usize,
        exclude: Option<usize>,
    ) -> Result<Vec<(usize, f64)>, KnnError> {
        let e = net.embed(&[image])?;
        self.query(&e[0], k, exclude)
    }

    /// Flat little-endian layout: magic, u32 version, u64 count, u64 dim,
    /// `count` u64 ids, then `count × dim` f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.ids.len() * 8 + self.vectors.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for &id in &self.ids {
            out.extend_from_slice(&(id as u64).to_le_bytes());
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, KnnError> {
        let corrupt = |m: &str| KnnError::Corrupt(m.to_string());
        if b.len() < 28 || &b[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        if u32::from_le_bytes(b[8..12].try_into().unwrap()) != VERSION {
            return Err(corrupt("unsupported version"));
        }
        let (n, dim) = (u64_at(12) as usize, u64_at(20) as usize);
        let body = 28;
        if b.len() != body + 8 * n + 8 * n * dim {
            return Err(corrupt("size does not match header"));
        }
        let ids = (0..n).map(|i| u64_at(body + 8 * i) as usize).collect();
        let off = body + 8 * n;
        let vectors = (0..n * dim)
            .map(|i| f64::from_le_bytes(b[off + 8 * i..off + 8 * i + 8].try_into().unwrap()))
            .collect();
        Ok(Self { ids, dim, vectors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KnnError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KnnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
