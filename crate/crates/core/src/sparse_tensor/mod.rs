//! COO sparse 2D tensors.
//!
//! A [`SparseTensor2D`] stores one channel vector per occupied site
//! `(b, x, y)`. Sites are kept sorted by `(b, y, x)` and all-zero vectors are
//! never stored, so two tensors with the same content have the same layout.

mod conv;
mod pool;

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub use conv::{conv_at_sites, out_coords, sparse_conv2d, ConvKernel2D};
pub use pool::{sparse_max_pool2d, sparse_max_pool2d_with_argmax};

/// A spatial coordinate inside a batch. Field order gives the canonical
/// `(b, y, x)` iteration order through the derived `Ord`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site {
    pub b: u32,
    pub y: u32,
    pub x: u32,
}

impl Site {
    pub fn new(b: u32, x: u32, y: u32) -> Self {
        Site { b, y, x }
    }
}

/// Dense geometry `[batch][channels][height][width]` of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape2D {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape2D {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape2D {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn dense_len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn sites_len(&self) -> usize {
        self.batch * self.height * self.width
    }

    /// Flat offset of `(site, channel)` in a `[B][C][H][W]` array.
    #[inline]
    pub fn dense_index(&self, site: Site, channel: usize) -> usize {
        ((site.b as usize * self.channels + channel) * self.height + site.y as usize) * self.width
            + site.x as usize
    }

    /// Flat offset of a site in a `[B][H][W]` array.
    #[inline]
    pub fn site_index(&self, site: Site) -> usize {
        (site.b as usize * self.height + site.y as usize) * self.width + site.x as usize
    }

    pub fn contains(&self, site: Site) -> bool {
        (site.b as usize) < self.batch
            && (site.y as usize) < self.height
            && (site.x as usize) < self.width
    }
}

/// Result of [`SparseTensor2D::count_nonzero`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonzeroCount {
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor2D {
    shape: Shape2D,
    sites: Vec<Site>,
    values: Vec<f64>,
}

impl SparseTensor2D {
    pub fn empty(shape: Shape2D) -> Self {
        SparseTensor2D {
            shape,
            sites: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a tensor from `(site, channel vector)` pairs in any order.
    /// All-zero vectors are dropped; duplicate sites are rejected.
    pub fn from_entries<I>(shape: Shape2D, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Site, Vec<f64>)>,
    {
        let mut entries: Vec<(Site, Vec<f64>)> = entries.into_iter().collect();
        entries.sort_by_key(|(site, _)| *site);
        let mut tensor = SparseTensor2D::empty(shape);
        for (site, vector) in entries {
            if !shape.contains(site) {
                return Err(Error::shape(format!(
                    "site (b={}, x={}, y={}) outside extent {}x{} with batch {}",
                    site.b, site.x, site.y, shape.height, shape.width, shape.batch
                )));
            }
            if vector.len() != shape.channels {
                return Err(Error::shape(format!(
                    "channel vector of length {} for a {}-channel tensor",
                    vector.len(),
                    shape.channels
                )));
            }
            if tensor.sites.last() == Some(&site) {
                return Err(Error::shape(format!(
                    "duplicate site (b={}, x={}, y={})",
                    site.b, site.x, site.y
                )));
            }
            tensor.push_sorted(site, &vector);
        }
        Ok(tensor)
    }

    /// Appends an entry whose site is strictly greater than every stored site.
    /// Zero vectors are skipped.
    pub(crate) fn push_sorted(&mut self, site: Site, vector: &[f64]) {
        debug_assert_eq!(vector.len(), self.shape.channels);
        debug_assert!(self.sites.last().is_none_or(|last| *last < site));
        if vector.iter().all(|v| *v == 0.0) {
            return;
        }
        self.sites.push(site);
        self.values.extend_from_slice(vector);
    }

    pub fn shape(&self) -> Shape2D {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    /// Number of occupied sites.
    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn get(&self, site: Site) -> Option<&[f64]> {
        let c = self.shape.channels;
        self.sites
            .binary_search(&site)
            .ok()
            .map(|i| &self.values[i * c..(i + 1) * c])
    }

    pub fn iter(&self) -> impl Iterator<Item = (Site, &[f64])> + '_ {
        let c = self.shape.channels.max(1);
        self.sites.iter().copied().zip(self.values.chunks(c))
    }

    /// Per-site lookup table into the entry list, `u32::MAX` where absent.
    pub(crate) fn site_lookup(&self) -> Vec<u32> {
        let mut lookup = vec![u32::MAX; self.shape.sites_len()];
        for (i, site) in self.sites.iter().enumerate() {
            lookup[self.shape.site_index(*site)] = i as u32;
        }
        lookup
    }

    pub(crate) fn entry_values(&self, entry: usize) -> &[f64] {
        let c = self.shape.channels;
        &self.values[entry * c..(entry + 1) * c]
    }

    /// Dense `[B][C][H][W]` array.
    pub fn densify(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.shape.dense_len()];
        for (site, vector) in self.iter() {
            for (c, v) in vector.iter().enumerate() {
                dense[self.shape.dense_index(site, c)] = *v;
            }
        }
        dense
    }

    /// Inverse of [`densify`](Self::densify); only exact zeros are pruned.
    pub fn sparsify(dense: &[f64], shape: Shape2D) -> Result<Self> {
        if dense.len() != shape.dense_len() {
            return Err(Error::shape(format!(
                "dense array of length {} for shape {:?}",
                dense.len(),
                shape
            )));
        }
        let mut tensor = SparseTensor2D::empty(shape);
        let mut vector = vec![0.0; shape.channels];
        for b in 0..shape.batch {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let site = Site::new(b as u32, x as u32, y as u32);
                    for (c, slot) in vector.iter_mut().enumerate() {
                        *slot = dense[shape.dense_index(site, c)];
                    }
                    tensor.push_sorted(site, &vector);
                }
            }
        }
        Ok(tensor)
    }

    /// Counts nonzero scalars (per channel, not per site).
    pub fn count_nonzero(&self) -> NonzeroCount {
        let count = self.values.iter().filter(|v| **v != 0.0).count();
        let size = self.shape.dense_len();
        NonzeroCount {
            count,
            fraction: if size == 0 {
                0.0
            } else {
                count as f64 / size as f64
            },
        }
    }

    /// Elementwise sum of two tensors with the same shape.
    pub fn add(&self, other: &SparseTensor2D) -> Result<SparseTensor2D> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let mut entries: Vec<(Site, Vec<f64>)> = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.sites.len() || j < other.sites.len() {
            let take_left = j >= other.sites.len()
                || (i < self.sites.len() && self.sites[i] <= other.sites[j]);
            let take_right = i >= self.sites.len()
                || (j < other.sites.len() && other.sites[j] <= self.sites[i]);
            let site = if take_left {
                self.sites[i]
            } else {
                other.sites[j]
            };
            let mut vector = vec![0.0; self.shape.channels];
            if take_left {
                for (slot, v) in vector.iter_mut().zip(self.entry_values(i)) {
                    *slot += v;
                }
                i += 1;
            }
            if take_right {
                for (slot, v) in vector.iter_mut().zip(other.entry_values(j)) {
                    *slot += v;
                }
                j += 1;
            }
            entries.push((site, vector));
        }
        let mut out = SparseTensor2D::empty(self.shape);
        for (site, vector) in entries {
            out.push_sorted(site, &vector);
        }
        Ok(out)
    }

    /// Text dump, one `(b,x,y): [values...]` line per entry.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (site, vector) in self.iter() {
            let values: Vec<String> = vector.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(
                out,
                "({},{},{}): [{}]",
                site.b,
                site.x,
                site.y,
                values.join(", ")
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(c: usize, h: usize, w: usize) -> Shape2D {
        Shape2D::new(1, c, h, w)
    }

    #[test]
    fn iteration_is_sorted_by_batch_row_column() {
        let t = SparseTensor2D::from_entries(
            Shape2D::new(2, 1, 4, 4),
            vec![
                (Site::new(1, 0, 0), vec![1.0]),
                (Site::new(0, 3, 0), vec![2.0]),
                (Site::new(0, 0, 1), vec![3.0]),
            ],
        )
        .unwrap();
        let order: Vec<Site> = t.sites().to_vec();
        assert_eq!(
            order,
            vec![Site::new(0, 3, 0), Site::new(0, 0, 1), Site::new(1, 0, 0)]
        );
    }

    #[test]
    fn zero_vectors_are_pruned() {
        let t = SparseTensor2D::from_entries(
            shape(2, 4, 4),
            vec![
                (Site::new(0, 1, 1), vec![0.0, 0.0]),
                (Site::new(0, 2, 2), vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        assert_eq!(t.num_sites(), 1);
    }

    #[test]
    fn out_of_extent_and_duplicates_are_rejected() {
        let oob = SparseTensor2D::from_entries(shape(1, 4, 4), vec![(Site::new(0, 4, 0), vec![1.0])]);
        assert!(matches!(oob, Err(Error::Shape(_))));
        let dup = SparseTensor2D::from_entries(
            shape(1, 4, 4),
            vec![(Site::new(0, 1, 0), vec![1.0]), (Site::new(0, 1, 0), vec![2.0])],
        );
        assert!(matches!(dup, Err(Error::Shape(_))));
    }

    #[test]
    fn densify_empty_and_single() {
        let empty = SparseTensor2D::empty(shape(2, 3, 3));
        assert!(empty.densify().iter().all(|v| *v == 0.0));
        let one =
            SparseTensor2D::from_entries(shape(2, 3, 3), vec![(Site::new(0, 2, 1), vec![0.0, 5.0])])
                .unwrap();
        let dense = one.densify();
        assert_eq!(dense.iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(dense[(1 * 3 + 1) * 3 + 2], 5.0);
    }

    #[test]
    fn count_nonzero_is_per_scalar() {
        let empty = SparseTensor2D::empty(shape(4, 8, 8));
        assert_eq!(
            empty.count_nonzero(),
            NonzeroCount {
                count: 0,
                fraction: 0.0
            }
        );
        let t = SparseTensor2D::from_entries(
            shape(4, 8, 8),
            vec![(Site::new(0, 1, 1), vec![1.0, 0.0, 1.0, 0.0])],
        )
        .unwrap();
        assert_eq!(t.count_nonzero().count, 2);
        let ones = SparseTensor2D::sparsify(&vec![1.0; 4 * 8 * 8], shape(4, 8, 8)).unwrap();
        assert_eq!(ones.count_nonzero().fraction, 1.0);
    }

    #[test]
    fn dump_format() {
        let t = SparseTensor2D::from_entries(shape(2, 4, 4), vec![(Site::new(0, 3, 1), vec![1.0, -0.5])])
            .unwrap();
        assert_eq!(t.dump(), "(0,3,1): [1, -0.5]\n");
    }

    #[test]
    fn add_merges_sites() {
        let a = SparseTensor2D::from_entries(
            shape(1, 4, 4),
            vec![(Site::new(0, 0, 0), vec![1.0]), (Site::new(0, 1, 0), vec![2.0])],
        )
        .unwrap();
        let b = SparseTensor2D::from_entries(
            shape(1, 4, 4),
            vec![(Site::new(0, 1, 0), vec![-2.0]), (Site::new(0, 3, 3), vec![4.0])],
        )
        .unwrap();
        let sum = a.add(&b).unwrap();
        assert_eq!(sum.sites(), &[Site::new(0, 0, 0), Site::new(0, 3, 3)]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tensor_strategy() -> impl Strategy<Value = SparseTensor2D> {
            (1usize..3, 1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(b, c, h, w)| {
                let shape = Shape2D::new(b, c, h, w);
                proptest::collection::vec(
                    prop_oneof![Just(0.0), -3.0f64..3.0],
                    shape.dense_len(),
                )
                .prop_map(move |dense| SparseTensor2D::sparsify(&dense, shape).unwrap())
            })
        }

        proptest! {
            #[test]
            fn sparsify_densify_round_trip(t in tensor_strategy()) {
                let back = SparseTensor2D::sparsify(&t.densify(), t.shape()).unwrap();
                prop_assert_eq!(back, t);
            }

            #[test]
            fn traversal_is_deterministic(t in tensor_strategy()) {
                let first: Vec<Site> = t.iter().map(|(s, _)| s).collect();
                let second: Vec<Site> = t.iter().map(|(s, _)| s).collect();
                prop_assert_eq!(&first, &second);
                let mut sorted = first.clone();
                sorted.sort();
                prop_assert_eq!(first, sorted);
            }
        }
    }
}
